"""Probe heads over the 12 encoder cls outputs and the frozen-encoder probe trainer.

Lead groups: G1 = {I, II, III} (bipolar limb), G2 = {aVR, aVL, aVF} (augmented limb),
G3 = {V1..V6} (precordial). The hierarchical head maps each group through its own
linear layer and averages (level 1), combines the three level-1 outputs pairwise
(level 2), then merges the pairs (level 3).
"""

from __future__ import annotations

import copy
import enum
import logging
import math
from dataclasses import asdict, dataclass
from itertools import combinations

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .evaluate import ProbeReport, activation_ratios, macro_auc
from .mask import N_LEADS, Policy, Variant
from .model import ClearModel, prepare_batch
from .pretrain import lr_at
from .signal import LEADS
from .tokenizer import TokenizedDataset

log = logging.getLogger(__name__)

GROUPS = ((0, 1, 2), (3, 4, 5), tuple(range(6, 12)))
PAIRS = ((0, 1), (0, 2), (1, 2))
GROUP_NAMES = ("G1", "G2", "G3", "G1+G2", "G1+G3", "G2+G3", "G1+G2+G3")
SUBSETS = tuple(s for r in (1, 2, 3) for s in combinations(range(3), r))  # same order as GROUP_NAMES


class HeadVariant(str, enum.Enum):
    HUG = "hug"
    AVERAGED = "averaged"
    WEIGHTED = "weighted"
    SINGLE_LEVEL = "single-level"


def _present_mask(present, like: torch.Tensor) -> torch.Tensor:
    if present is None:
        return torch.ones(N_LEADS, dtype=torch.bool)
    arr = np.asarray(present)
    if arr.dtype == bool:
        if arr.shape != (N_LEADS,):
            raise ValueError(f"present mask must have {N_LEADS} entries")
        m = torch.as_tensor(arr)
    else:
        m = torch.zeros(N_LEADS, dtype=torch.bool)
        m[[int(i) for i in arr.reshape(-1)]] = True
    if not bool(m.any()):
        raise ValueError("at least one lead must be present")
    return m


def _group_mean(x: torch.Tensor, members, present: torch.Tensor):
    """Mean over the present members of ``x[..., members, :]``; zeros if none are present."""
    keep = present[list(members)]
    n = int(keep.sum())
    if n == 0:
        return x.new_zeros(x.shape[:-2] + x.shape[-1:]), True
    sel = x[..., [m for m, k in zip(members, keep.tolist()) if k], :]
    return sel.sum(dim=-2) / n, False


def _identity_init(layers):
    """phi starts as the identity with zero bias, so training begins from plain group means."""
    with torch.no_grad():
        for lin in layers:
            lin.weight.copy_(torch.eye(lin.weight.shape[0], lin.weight.shape[1]))
            lin.bias.zero_()


def _aggregate(outs: torch.Tensor, agg: str) -> torch.Tensor:
    if agg == "mean":
        # fixed left-to-right order keeps f_g reproducible to the last bit
        acc = outs[..., 0, :]
        for k in range(1, outs.shape[-2]):
            acc = acc + outs[..., k, :]
        return acc / outs.shape[-2]
    if agg == "concat":
        return outs.flatten(-2)
    raise ValueError(f"unknown aggregation {agg!r}")


class HugHead(nn.Module):
    def __init__(self, d_t: int, n_classes: int, agg: str = "mean"):
        super().__init__()
        self.agg = agg
        self.phi = nn.ModuleList(nn.Linear(d_t, d_t) for _ in range(7))
        self.classifier = nn.Linear(d_t if agg == "mean" else 7 * d_t, n_classes)
        _identity_init(self.phi)

    def group_outputs(self, cls: torch.Tensor, present=None):
        """``(outputs, empty)``: the seven vectors ``[l1_1, l1_2, l1_3, l2_1, l2_2, l2_3, l3]``
        stacked on dim -2, and which level-1 groups had no present lead."""
        present = _present_mask(present, cls)
        l1, empty = [], []
        for k, members in enumerate(GROUPS):
            v, e = _group_mean(self.phi[k](cls), members, present)
            l1.append(v)
            empty.append(e)
        l2 = [(self.phi[3 + k](l1[a]) + self.phi[3 + k](l1[b])) / 2 for k, (a, b) in enumerate(PAIRS)]
        l3 = sum(self.phi[6](v) for v in l2) / 3
        return torch.stack(l1 + l2 + [l3], dim=-2), empty

    def features(self, cls, present=None):
        outs, _ = self.group_outputs(cls, present)
        return _aggregate(outs, self.agg)

    def forward(self, cls, present=None):
        return self.classifier(self.features(cls, present))


def hug_forward(cls: torch.Tensor, head: HugHead):
    """``(f_g, group_outputs)`` for ``cls`` of shape ``(..., 12, d_t)``."""
    outs, _ = head.group_outputs(cls)
    return _aggregate(outs, head.agg), outs


def missing_lead_forward(cls: torch.Tensor, present, head: HugHead):
    """Like :func:`hug_forward` with level-1 means over present leads only.

    Returns ``(f_g, group_outputs, empty_groups)``; an empty group contributes a zero vector.
    """
    outs, empty = head.group_outputs(cls, present)
    return _aggregate(outs, head.agg), outs, empty


class AveragedHead(nn.Module):
    def __init__(self, d_t: int, n_classes: int, agg: str = "mean"):
        super().__init__()
        self.classifier = nn.Linear(d_t, n_classes)

    def features(self, cls, present=None):
        m = _present_mask(present, cls)
        return cls[..., m, :].mean(dim=-2)

    def forward(self, cls, present=None):
        return self.classifier(self.features(cls, present))


class WeightedHead(nn.Module):
    """Learned scalar weight per lead, then a linear classifier."""

    def __init__(self, d_t: int, n_classes: int, agg: str = "mean"):
        super().__init__()
        self.lead_weights = nn.Parameter(torch.full((N_LEADS,), 1.0 / N_LEADS))
        self.classifier = nn.Linear(d_t, n_classes)

    def features(self, cls, present=None):
        m = _present_mask(present, cls).to(cls.dtype)
        return ((self.lead_weights * m).unsqueeze(-1) * cls).sum(dim=-2)

    def forward(self, cls, present=None):
        return self.classifier(self.features(cls, present))


class SingleLevelHead(nn.Module):
    """One linear map per non-empty subset of {G1, G2, G3}, no hierarchy."""

    def __init__(self, d_t: int, n_classes: int, agg: str = "mean", subsets=SUBSETS):
        super().__init__()
        self.agg = agg
        self.subsets = tuple(tuple(s) for s in subsets)
        self.phi = nn.ModuleList(nn.Linear(d_t, d_t) for _ in self.subsets)
        width = d_t if agg == "mean" else len(self.subsets) * d_t
        self.classifier = nn.Linear(width, n_classes)
        _identity_init(self.phi)

    def group_outputs(self, cls, present=None):
        present = _present_mask(present, cls)
        outs, empty = [], []
        for phi, subset in zip(self.phi, self.subsets):
            members = tuple(i for g in subset for i in GROUPS[g])
            v, e = _group_mean(phi(cls), members, present)
            outs.append(v)
            empty.append(e)
        return torch.stack(outs, dim=-2), empty

    def features(self, cls, present=None):
        outs, _ = self.group_outputs(cls, present)
        return _aggregate(outs, self.agg)

    def forward(self, cls, present=None):
        return self.classifier(self.features(cls, present))


HEADS = {
    HeadVariant.HUG: HugHead,
    HeadVariant.AVERAGED: AveragedHead,
    HeadVariant.WEIGHTED: WeightedHead,
    HeadVariant.SINGLE_LEVEL: SingleLevelHead,
}


def make_head(variant, d_t: int, n_classes: int, agg: str = "mean", seed: int = 0) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return HEADS[HeadVariant(variant)](d_t, n_classes, agg)


# -- probe training -------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    head: str = "hug"
    agg: str = "mean"
    fraction: float = 1.0
    leads: tuple | None = None  # lead names kept; None = all 12
    epochs: int = 100
    warmup_epochs: int = 10
    peak_lr: float = 5e-3
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        HeadVariant(self.head)
        if self.agg not in ("mean", "concat"):
            raise ValueError(f"unknown aggregation {self.agg!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        if self.leads is not None:
            leads = tuple(self.leads)
            bad = [l for l in leads if l not in LEADS]
            if bad or not leads:
                raise ValueError(f"unknown or empty lead list {leads}")
            object.__setattr__(self, "leads", leads)
        object.__setattr__(self, "betas", tuple(self.betas))

    @property
    def present(self):
        if self.leads is None:
            return None
        return [LEADS.index(l) for l in self.leads]

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["leads"] = list(self.leads) if self.leads is not None else None
        return d


def subsample(n: int, fraction: float, seed: int) -> np.ndarray:
    """First ``ceil(fraction * n)`` indices of a seeded permutation."""
    perm = np.random.default_rng([seed, 0x9B0E]).permutation(n)
    return np.sort(perm[: math.ceil(fraction * n)])


@torch.no_grad()
def extract_cls(model: ClearModel, ds: TokenizedDataset, policy="paper_literal", present=None, batch_size=128):
    """Frozen-encoder cls outputs ``(R, 12, d_t)`` with the CLEAR mask and nothing masked.

    Absent leads are zeroed in the input.
    """
    model.eval()
    beats = ds.beats
    if present is not None:
        keep = np.zeros(N_LEADS, dtype=bool)
        keep[list(present)] = True
        beats = beats * keep[None, :, None, None]
    feats = []
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        batch = prepare_batch(beats[idx], ds.valid[idx], [()] * len(idx), Variant.CLEAR, Policy(policy))
        feats.append(model.cls_features(batch))
    return torch.cat(feats)


@torch.no_grad()
def _scores(head, feats, present):
    head.eval()
    out = torch.sigmoid(head(feats, present)).numpy()
    head.train()
    return out


def probe_train(model: ClearModel, train_set: TokenizedDataset, val_set: TokenizedDataset,
                test_set: TokenizedDataset, cfg: ProbeConfig = ProbeConfig(), policy="paper_literal",
                features=None):
    """Train a head on a frozen encoder; pick the epoch with the best validation macro AUC.

    ``features`` may pass precomputed ``(train, val, test)`` cls tensors.
    Returns ``(head, ProbeReport)``.
    """
    for p in model.parameters():
        p.requires_grad_(False)
    present = cfg.present
    if features is None:
        features = tuple(extract_cls(model, ds, policy, present) for ds in (train_set, val_set, test_set))
    f_train, f_val, f_test = features
    keep = subsample(len(train_set), cfg.fraction, cfg.seed)
    f_train = f_train[keep]
    y_train = torch.as_tensor(train_set.labels[keep], dtype=torch.float32)
    n_classes = train_set.labels.shape[1]

    head = make_head(cfg.head, f_train.shape[-1], n_classes, cfg.agg, cfg.seed)
    decay = [p for n, p in head.named_parameters() if n.endswith("weight") and p.dim() > 1]
    rest = [p for n, p in head.named_parameters() if not (n.endswith("weight") and p.dim() > 1)]
    opt = torch.optim.AdamW([{"params": decay, "weight_decay": cfg.weight_decay},
                             {"params": rest, "weight_decay": 0.0}], lr=0.0, betas=cfg.betas)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(keep) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch

    best = (-math.inf, 0, copy.deepcopy(head.state_dict()))
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(keep))
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            for g in opt.param_groups:
                g["lr"] = lr_at(step, total, warm, cfg.peak_lr, cfg.min_lr)
            loss = F.binary_cross_entropy_with_logits(head(f_train[idx], present), y_train[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
        val_scores = _scores(head, f_val, present)
        try:
            crit, _, _ = macro_auc(val_scores, val_set.labels, val_set.classes)
        except ValueError:
            with torch.no_grad():
                crit = -F.binary_cross_entropy(torch.as_tensor(val_scores), torch.as_tensor(val_set.labels, dtype=torch.float32)).item()
        if crit > best[0]:
            best = (crit, epoch, copy.deepcopy(head.state_dict()))
    head.load_state_dict(best[2])

    test_scores = _scores(head, f_test, present)
    macro, per_class, excluded = macro_auc(test_scores, test_set.labels, test_set.classes)
    ratios = None
    if hasattr(head, "group_outputs"):
        with torch.no_grad():
            outs, _ = head.group_outputs(f_test, present)
        ratios = activation_ratios(outs.numpy(), test_set.labels, test_set.classes)
    report = ProbeReport(
        per_class_auc=per_class,
        macro_auc=macro,
        activation_ratios=ratios.ratios if ratios else {},
        excluded_classes=excluded,
        config={**cfg.to_dict(), "policy": str(policy), "n_train_used": int(len(keep)),
                "best_epoch": best[1], "best_val_macro_auc": float(best[0])},
        zero_activation_samples=ratios.n_zero if ratios else 0,
    )
    return head, report
