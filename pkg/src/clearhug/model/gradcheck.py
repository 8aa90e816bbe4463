"""Central finite-difference verification of the autograd gradients."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np
import torch

from ..mask import Policy, TokenLayout, Variant, sample_masked
from .network import ClearModel, ModelConfig, batch_loss, compute_gradients, prepare_batch, tensor_class


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_class: dict  # tensor class -> (max relative error, coordinates checked)
    worst: tuple  # (parameter name, flat index, analytic, numeric)


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def toy_batch(cfg: ModelConfig, variant, policy, rng, ratio=0.5, dtype=torch.float64):
    """Two random records; the second one ends with a padding beat."""
    layout = TokenLayout(cfg.N)
    beats = rng.standard_normal((2, 12, cfg.N, cfg.T_b))
    valid = np.ones((2, cfg.N), dtype=bool)
    if cfg.N > 1:
        valid[1, -1] = False
        beats[1, :, -1] = 0.0
    K = [sample_masked(layout, v, ratio, rng) for v in valid]
    return prepare_batch(beats, valid, K, variant, policy, dtype=dtype)


def grad_check(cfg: ModelConfig | None = None, variant=Variant.CLEAR, policy=Policy.PAPER_LITERAL,
               n_coords: int = 200, step: float = 1e-4, seed: int = 0, scope: str = "masked",
               batch=None) -> GradCheckResult:
    """Compare autograd with central differences in float64.

    Up to ``n_coords`` coordinates are drawn per tensor class (a class pools the same
    parameter role across layers); classes with fewer coordinates are checked in full.
    """
    cfg = cfg or ModelConfig.toy()
    rng = np.random.default_rng(seed)
    model = ClearModel(cfg, seed=seed).double()
    with torch.no_grad():
        # move off the symmetric init (unit norms, zero biases)
        g = torch.Generator().manual_seed(seed + 1)
        for p in model.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    if batch is None:
        batch = toy_batch(cfg, variant, policy, rng)
    _, grads = compute_gradients(model, batch, scope)
    params = dict(model.named_parameters())

    classes = defaultdict(list)
    for name, p in params.items():
        classes[tensor_class(name)].append(name)

    per_class = {}
    worst = (None, -1, 0.0, 0.0)
    max_err = 0.0
    with torch.no_grad():
        for cls_name, names in sorted(classes.items()):
            sizes = [params[n].numel() for n in names]
            total = sum(sizes)
            picks = rng.choice(total, size=min(n_coords, total), replace=False)
            offsets = np.cumsum([0] + sizes)
            cls_err = 0.0
            for flat in np.sort(picks):
                t = int(np.searchsorted(offsets, flat, side="right") - 1)
                name, idx = names[t], int(flat - offsets[t])
                view = params[name].view(-1)
                orig = view[idx].item()
                view[idx] = orig + step
                up = batch_loss(model, batch, scope).item()
                view[idx] = orig - step
                down = batch_loss(model, batch, scope).item()
                view[idx] = orig
                numeric = (up - down) / (2 * step)
                analytic = grads[name].view(-1)[idx].item()
                err = relative_error(analytic, numeric)
                cls_err = max(cls_err, err)
                if err > max_err or worst[0] is None:
                    max_err = max(max_err, err)
                    worst = (name, idx, analytic, numeric)
            per_class[cls_name] = (cls_err, len(picks))
    return GradCheckResult(max_err, per_class, worst)
