"""Metrics and diagnostics: ROC AUC, activation ratios, reconstruction and efficiency reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .mask import MaskSpec, Policy, Stage, TokenLayout, Variant, build_mask_matrix, sample_masked
from .model import ClearModel, ModelConfig, MultiHeadAttention, load_checkpoint, prepare_batch, sparse_attention
from .pretrain import fixed_masks, masked_mse
from .signal import LEADS
from .tokenizer import TokenizedDataset


class UndefinedAUC(ValueError):
    pass


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative; ties count 0.5."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUC("undefined AUC: labels contain a single class")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def macro_auc(scores, labels, classes=None):
    """``(macro, per_class, excluded)``; classes without both labels are excluded."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    classes = list(classes) if classes is not None else [str(c) for c in range(s.shape[1])]
    per_class, excluded = {}, []
    for c, name in enumerate(classes):
        try:
            per_class[name] = roc_auc(s[:, c], y[:, c])
        except UndefinedAUC:
            excluded.append(name)
    if not per_class:
        raise UndefinedAUC("undefined AUC: every class lacks positives or negatives")
    return float(np.mean(list(per_class.values()))), per_class, excluded


@dataclass
class ActivationRatios:
    ratios: dict  # class -> list of 7 fractions
    n_zero: int  # samples whose group outputs were all zero


def activation_ratios(group_outputs, labels, classes) -> ActivationRatios:
    """Per-sample L1 norms of the 7 group outputs, normalised to sum 1, averaged per class.

    ``group_outputs`` has shape ``(S, 7, d)``; a sample with all-zero outputs gets 1/7 each.
    """
    g = np.asarray(group_outputs, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    a = np.abs(g).sum(-1)
    tot = a.sum(-1, keepdims=True)
    zero = tot[:, 0] == 0
    k = a.shape[1]
    norm = np.where(zero[:, None], 1.0 / k, a / np.where(tot == 0, 1.0, tot))
    out = {}
    for c, name in enumerate(classes):
        if y[:, c].any():
            out[name] = norm[y[:, c]].mean(0).tolist()
    return ActivationRatios(out, int(zero.sum()))


@dataclass
class ProbeReport:
    per_class_auc: dict
    macro_auc: float
    activation_ratios: dict = field(default_factory=dict)
    excluded_classes: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    zero_activation_samples: int = 0

    def to_dict(self):
        return asdict(self)


def write_probe_report(report: ProbeReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    with open(out / "per_class_auc.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "auc"])
        for name, v in report.per_class_auc.items():
            w.writerow([name, repr(v)])
        for name in report.excluded_classes:
            w.writerow([name, "excluded"])
    if report.activation_ratios:
        from .hug import GROUP_NAMES

        with open(out / "activation_ratios.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", *GROUP_NAMES])
            for name, v in report.activation_ratios.items():
                w.writerow([name, *map(repr, v)])


# -- reconstruction --------------------------------------------------------------

def _load(item):
    if isinstance(item, (str, Path)):
        return load_checkpoint(item)
    return item


def _polyline(xs, ys, color, width=1.0):
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{pts}"/>'


PALETTE = ("#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd")


def overlay_svg(original, recons: dict, masked, title="") -> str:
    """12 stacked panels (one per lead) of the beat sequence; reconstructions drawn over masked beats.

    ``original`` is ``(12, N, T_b)``, ``recons`` maps a label to the same shape, ``masked`` is ``(12, N)``.
    """
    _, N, T_b = original.shape
    panel_w, panel_h, left = 60 * N, 60, 40
    scale = 25.0 / max(1e-9, float(np.abs(original).max()))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + panel_w + 10}" '
             f'height="{panel_h * 12 + 30}">', f'<text x="4" y="14" font-size="11">{title}</text>']
    for i in range(12):
        y0 = 30 + panel_h * i + panel_h / 2
        parts.append(f'<text x="2" y="{y0:.0f}" font-size="10">{LEADS[i]}</text>')
        for j in range(N):
            xs = left + 60 * j + np.arange(T_b) * (56.0 / T_b)
            parts.append(_polyline(xs, y0 - scale * original[i, j], "#000000", 0.8))
            if masked[i, j]:
                for color, rec in zip(PALETTE, recons.values()):
                    parts.append(_polyline(xs, y0 - scale * rec[i, j], color, 0.8))
    for k, label in enumerate(recons):
        parts.append(f'<text x="{left + 90 * k}" y="26" font-size="10" fill="{PALETTE[k % len(PALETTE)]}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def recon_report(checkpoints: dict, test_set: TokenizedDataset, out_dir=None, mask_ratio=0.8, seed=0, n_svg=3):
    """Masked MSE per checkpoint on shared seeded masks, with SVG overlays.

    ``checkpoints`` maps a label to a checkpoint path or a ``(model, meta)`` pair. Each model is
    run with the variant and policy stored in its meta. Returns the table rows.
    """
    loaded = {k: _load(v) for k, v in checkpoints.items()}
    configs = {k: meta["config"] for k, (_, meta) in loaded.items()}
    first = next(iter(configs.values()))
    for k, c in configs.items():
        if c != first:
            raise ValueError(f"checkpoint config mismatch: {k} has {c}, expected {first}")
    K = fixed_masks(test_set, mask_ratio, seed)
    rows = []
    for label, (model, meta) in loaded.items():
        mse = masked_mse(model, test_set, K, meta["variant"], meta["policy"])
        rows.append({"label": label, "variant": meta["variant"], "policy": meta["policy"], "masked_mse": mse})
    base = next((r["masked_mse"] for r in rows if r["variant"] == Variant.CLEAR.value), rows[0]["masked_mse"])
    for r in rows:
        r["delta_vs_clear"] = r["masked_mse"] - base

    if out_dir is not None:
        out = Path(out_dir)
        (out / "recon").mkdir(parents=True, exist_ok=True)
        with open(out / "recon_mse.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["label", "variant", "policy", "masked_mse", "delta_vs_clear"])
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        idx = np.arange(min(n_svg, len(test_set)))
        recons = {}
        with torch.no_grad():
            for label, (model, meta) in loaded.items():
                model.eval()
                batch = prepare_batch(test_set.beats[idx], test_set.valid[idx], [K[i] for i in idx],
                                      Variant(meta["variant"]), Policy(meta["policy"]))
                recons[label] = model(batch).numpy()
                masked = batch.masked.numpy()
        for n, i in enumerate(idx):
            svg = overlay_svg(test_set.beats[i], {k: v[n] for k, v in recons.items()}, masked[n],
                              title=f"{test_set.record_ids[i]}: black original, colour reconstructions")
            (out / "recon" / f"{test_set.record_ids[i]}.svg").write_text(svg)
    return rows


# -- efficiency ------------------------------------------------------------------

def _stage_pairs(matrix, cfg: ModelConfig) -> int:
    """Pair count reported by the sparse kernel on this allow matrix."""
    allow = torch.as_tensor(matrix.allow)
    attn = MultiHeadAttention(cfg.d_t, cfg.n_heads)
    x = torch.zeros(allow.shape[0], cfg.d_t)
    with torch.no_grad():
        _, pairs = sparse_attention(x, allow, attn)
    return int(pairs)


def layer_flops(L: int, pairs: int, d_t: int, mlp_dim: int) -> dict:
    """Closed-form multiply-add flops (x2) for one transformer block over ``L`` tokens."""
    return {
        "projections": 8 * L * d_t * d_t,  # q, k, v, o
        "attention": 4 * pairs * d_t,  # scores + weighted sum over allowed pairs
        "mlp": 4 * L * d_t * mlp_dim,
    }


def efficiency_report(cfg: ModelConfig, spec: MaskSpec, policy=Policy.PAPER_LITERAL, out_dir=None) -> dict:
    """Dense vs sparse attention pair counts, flop estimates and peak attention-tensor bytes."""
    policy = Policy(policy)
    report = {"variant": spec.variant.value, "policy": policy.value, "N": spec.layout.N,
              "n_masked": len(spec.K), "config": cfg.to_dict(), "stages": {}}
    totals = {"pair_count_dense": 0, "pair_count_sparse": 0, "est_flops_dense": 0, "est_flops_sparse": 0,
              "peak_bytes_dense": 0, "peak_bytes_sparse": 0}
    for stage, layers in ((Stage.ENCODER, cfg.enc_layers), (Stage.DECODER, cfg.dec_layers)):
        m = build_mask_matrix(spec, stage, policy)
        L = m.allow.shape[0]
        dense, sparse = L * L, _stage_pairs(m, cfg)
        fd, fs = layer_flops(L, dense, cfg.d_t, cfg.mlp_dim), layer_flops(L, sparse, cfg.d_t, cfg.mlp_dim)
        st = {
            "tokens": L, "layers": layers,
            "pair_count_dense": dense, "pair_count_sparse": sparse,
            "attention_flops_dense": layers * fd["attention"], "attention_flops_sparse": layers * fs["attention"],
            "est_flops_dense": layers * sum(fd.values()), "est_flops_sparse": layers * sum(fs.values()),
            # float32 score tensor per head
            "peak_bytes_dense": 4 * cfg.n_heads * dense, "peak_bytes_sparse": 4 * cfg.n_heads * sparse,
        }
        report["stages"][stage.value] = st
        for k in ("pair_count_dense", "pair_count_sparse", "est_flops_dense", "est_flops_sparse"):
            totals[k] += layers * st[k] if k.startswith("pair") else st[k]
        for k in ("peak_bytes_dense", "peak_bytes_sparse"):
            totals[k] = max(totals[k], st[k])
    embed = 2 * 2 * 12 * spec.layout.N * cfg.T_b * cfg.d_t  # beat embedding + reconstruction head
    totals["est_flops_dense"] += embed
    totals["est_flops_sparse"] += embed
    report.update(totals)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "efficiency.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def efficiency_for(cfg: ModelConfig, variant=Variant.CLEAR, policy=Policy.PAPER_LITERAL, ratio=0.8, seed=0, out_dir=None):
    """Efficiency report for a record with all ``cfg.N`` beats valid and a seeded mask."""
    layout = TokenLayout(cfg.N)
    valid = np.ones(cfg.N, dtype=bool)
    K = sample_masked(layout, valid, ratio, np.random.default_rng(seed))
    spec = MaskSpec(layout, K, frozenset(), Variant(variant))
    return efficiency_report(cfg, spec, policy, out_dir)
