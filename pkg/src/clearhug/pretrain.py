"""Masked-reconstruction pretraining loop: AdamW, warmup + cosine schedule, checkpoints, metrics CSV."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .mask import Policy, TokenLayout, Variant, sample_masked
from .model import (
    ClearModel,
    EmptySelection,
    ModelConfig,
    NonFiniteError,
    batch_loss,
    decay_split,
    prepare_batch,
    save_checkpoint,
)
from .tokenizer import TokenizedDataset

log = logging.getLogger(__name__)

METRICS_FIELDS = ("epoch", "step", "lr", "train_loss", "val_masked_mse")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 10
    peak_lr: float = 5e-4
    min_lr: float = 1e-5
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.99)
    batch_size: int = 64
    mask_ratio: float = 0.8
    seed: int = 0
    variant: str = "clear"
    policy: str = "paper_literal"
    loss_scope: str = "masked"
    save_every: int = 0  # epochs between checkpoints; 0 = final only

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        Variant(self.variant)
        Policy(self.policy)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be < epochs")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must lie in [0, 1]")
        if self.loss_scope not in ("masked", "all"):
            raise ValueError(f"unknown loss scope {self.loss_scope!r}")
        if self.loss_scope == "masked" and self.mask_ratio == 0:
            raise EmptySelection("empty selection: mask_ratio 0 leaves nothing to reconstruct under loss_scope=masked")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def lr_at(step: int, total_steps: int, warmup_steps: int, peak_lr: float = 5e-4, min_lr: float = 1e-5) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine decay reaching ``min_lr`` at the final step.

    The final step is ``total_steps - 1`` (the last optimiser update).
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = max(1, total_steps - 1 - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + (peak_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(model, cfg: TrainConfig):
    decay, no_decay = decay_split(model)
    params = dict(model.named_parameters())
    groups = [
        {"params": [params[n] for n in decay], "weight_decay": cfg.weight_decay},
        {"params": [params[n] for n in no_decay], "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=0.0, betas=cfg.betas)


def sample_batch(ds: TokenizedDataset, idx, ratio, rng, variant, policy):
    layout = TokenLayout(ds.N)
    K = [sample_masked(layout, ds.valid[i], ratio, rng) for i in idx]
    return prepare_batch(ds.beats[idx], ds.valid[idx], K, Variant(variant), Policy(policy))


@torch.no_grad()
def masked_mse(model, ds: TokenizedDataset, K_list, variant, policy, batch_size=128):
    """Masked-beat MSE over a dataset with fixed masks, pooled over all masked beats."""
    model.eval()
    total, count = 0.0, 0
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        batch = prepare_batch(ds.beats[idx], ds.valid[idx], [K_list[i] for i in idx], Variant(variant), Policy(policy))
        sel = batch.masked
        if not bool(sel.any()):
            continue
        err = ((model(batch) - batch.beats) ** 2).mean(-1)
        total += float(err[sel].double().sum())
        count += int(sel.sum())
    model.train()
    if count == 0:
        raise EmptySelection("empty selection")
    return total / count


def fixed_masks(ds: TokenizedDataset, ratio, seed):
    """Seed-derived masks, identical at every epoch and across variants."""
    rng = np.random.default_rng([seed, 0xC1EA])
    layout = TokenLayout(ds.N)
    return [sample_masked(layout, ds.valid[i], ratio, rng) for i in range(len(ds))]


@dataclass
class TrainResult:
    model: ClearModel
    metrics: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def _write_metrics(rows, path):
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    tmp.replace(path)


def read_metrics(path):
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), "step": int(r["step"]), "lr": float(r["lr"]),
                 "train_loss": float(r["train_loss"]), "val_masked_mse": float(r["val_masked_mse"])}
                for r in csv.DictReader(fh)]


def train(train_set: TokenizedDataset, val_set: TokenizedDataset | None, cfg: TrainConfig,
          model_cfg: ModelConfig, out_dir=None) -> TrainResult:
    """Pretrain a fresh model; returns the final model and per-epoch metrics.

    Epoch 0 in the metrics is the untrained model (``train_loss`` NaN). With ``out_dir`` the
    metrics CSV and checkpoints (``epoch_XXXX.chck``, ``final.chck``) are written there.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if (train_set.N, train_set.T_b) != (model_cfg.N, model_cfg.T_b):
        raise ValueError(f"dataset tokens (N={train_set.N}, T_b={train_set.T_b}) do not match the model config")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    model = ClearModel(model_cfg, seed=cfg.seed)
    opt = make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    val_masks = fixed_masks(val_set, cfg.mask_ratio, cfg.seed) if val_set is not None and len(val_set) else None

    def val_mse():
        if val_masks is None:
            return float("nan")
        return masked_mse(model, val_set, val_masks, cfg.variant, cfg.policy)

    result = TrainResult(model)
    result.metrics.append({"epoch": 0, "step": 0, "lr": 0.0, "train_loss": float("nan"), "val_masked_mse": val_mse()})

    def checkpoint(name, epoch):
        if out is None:
            return
        path = out / name
        save_checkpoint(path, model, cfg.variant, cfg.policy, cfg.seed, epoch)
        result.checkpoints.append(path)

    step = 0
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            batch = sample_batch(train_set, idx, cfg.mask_ratio, rng, cfg.variant, cfg.policy)
            lr = lr_at(step, total_steps, warmup_steps, cfg.peak_lr, cfg.min_lr)
            for g in opt.param_groups:
                g["lr"] = lr
            loss = batch_loss(model, batch, cfg.loss_scope)
            if not torch.isfinite(loss):
                checkpoint("last_good.chck", epoch - 1)
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            for name, p in model.named_parameters():
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    checkpoint("last_good.chck", epoch - 1)
                    raise NonFiniteError(f"non-finite gradient in {name} at step {step}")
            opt.step()
            losses.append(loss.item())
            step += 1
        row = {"epoch": epoch, "step": step, "lr": lr, "train_loss": float(np.mean(losses)), "val_masked_mse": val_mse()}
        result.metrics.append(row)
        log.info("epoch %d step %d lr %.3g train %.5f val %.5f", epoch, step, lr, row["train_loss"], row["val_masked_mse"])
        if cfg.save_every and epoch % cfg.save_every == 0 and epoch != cfg.epochs:
            checkpoint(f"epoch_{epoch:04d}.chck", epoch)
        if out is not None:
            _write_metrics(result.metrics, out / "metrics.csv")
    checkpoint("final.chck", cfg.epochs)
    return result
