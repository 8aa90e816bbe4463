"""Encoder/decoder transformer that reconstructs masked beat tokens."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ..mask import N_LEADS, MaskSpec, Policy, Stage, TokenLayout, Variant, build_mask_matrix
from .attention import MultiHeadAttention, masked_attention, sparse_attention


class EmptySelection(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Non-finite loss or gradient."""


@dataclass(frozen=True)
class ModelConfig:
    d_t: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 1
    mlp_dim: int = 128
    T_b: int = 64
    N: int = 15
    dropout: float = 0.0
    mask_fill: str = "token"  # "token": learned mask token, "zero": embedding of an all-zero beat

    def __post_init__(self):
        for name in ("d_t", "n_heads", "enc_layers", "dec_layers", "mlp_dim", "T_b", "N"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_t % self.n_heads:
            raise ValueError("d_t must be divisible by n_heads")
        if self.mask_fill not in ("token", "zero"):
            raise ValueError(f"unknown mask_fill {self.mask_fill!r}")

    @property
    def d_k(self) -> int:
        return self.d_t // self.n_heads

    @classmethod
    def toy(cls, **kw):
        base = dict(d_t=16, n_heads=2, enc_layers=1, dec_layers=1, mlp_dim=32, T_b=8, N=3)
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        return asdict(self)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_t)
        self.attn = MultiHeadAttention(cfg.d_t, cfg.n_heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.d_t)
        self.fc1 = nn.Linear(cfg.d_t, cfg.mlp_dim)
        self.fc2 = nn.Linear(cfg.mlp_dim, cfg.d_t)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, allow, impl="dense", trace=None):
        y = self.norm1(x)
        if impl == "sparse":
            a, _ = sparse_attention(y, allow, self.attn)
        else:
            a, w = masked_attention(y, allow, self.attn, return_weights=True)
            if trace is not None:
                trace.append(w.detach())
        x = x + self.drop(a)
        return x + self.drop(self.fc2(F.gelu(self.fc1(self.norm2(x)))))


@dataclass
class ForwardTrace:
    encoder: list = field(default_factory=list)  # per layer (B, heads, Le, Le)
    decoder: list = field(default_factory=list)  # per layer (B, heads, T, T)


@dataclass
class Batch:
    beats: torch.Tensor  # (B, 12, N, T_b)
    enc_index: torch.Tensor  # (B, Le) layout positions; batch padding points at slot T
    enc_pad: torch.Tensor  # (B, Le)
    enc_allow: torch.Tensor  # (B, Le, Le)
    dec_allow: torch.Tensor  # (B, T, T)
    masked: torch.Tensor  # (B, 12, N) beats hidden from the encoder
    valid: torch.Tensor  # (B, 12, N)
    specs: list

    def __len__(self):
        return self.beats.shape[0]

    def selection(self, scope: str) -> torch.Tensor:
        if scope == "masked":
            return self.masked
        if scope == "all":
            return self.valid
        raise ValueError(f"unknown loss scope {scope!r}")


def prepare_batch(beats, valid, K_list, variant=Variant.CLEAR, policy=Policy.PAPER_LITERAL, dtype=torch.float32) -> Batch:
    """Assemble mask matrices and gather indices for a batch of tokenized records.

    ``beats`` is ``(B, 12, N, T_b)``, ``valid`` is ``(B, N)``, ``K_list`` holds one masked
    position set per record. Padding rows (invalid beats, batch padding) attend only to
    themselves and no other row attends to them, so they never influence real tokens.
    """
    beats = np.asarray(beats)
    B, _, N, _ = beats.shape
    layout = TokenLayout(N)
    T = layout.total
    specs, enc_mats, dec_mats = [], [], []
    for b in range(B):
        spec = MaskSpec(layout, tuple(K_list[b]), layout.invalid_positions(valid[b]), variant)
        specs.append(spec)
        enc_mats.append(build_mask_matrix(spec, Stage.ENCODER, policy))
        dec_mats.append(build_mask_matrix(spec, Stage.DECODER, policy))
    Le = max(m.allow.shape[0] for m in enc_mats)
    enc_index = np.full((B, Le), T, dtype=np.int64)
    enc_pad = np.ones((B, Le), dtype=bool)
    enc_allow = np.zeros((B, Le, Le), dtype=bool)
    dec_allow = np.zeros((B, T, T), dtype=bool)
    for b, (em, dm) in enumerate(zip(enc_mats, dec_mats)):
        n = em.allow.shape[0]
        enc_index[b, :n] = em.positions
        enc_pad[b, :n] = False
        enc_allow[b, :n, :n] = em.allow
        dec_allow[b] = dm.allow
    idx = np.arange(Le)
    enc_allow[:, idx, idx] |= enc_pad
    inert = ~dec_allow.any(axis=2)
    dec_allow[:, np.arange(T), np.arange(T)] |= inert
    masked = np.stack([s.masked[N_LEADS:] for s in specs]).reshape(B, N_LEADS, N)
    valid_beats = np.stack([s.valid[N_LEADS:] for s in specs]).reshape(B, N_LEADS, N)
    return Batch(
        beats=torch.as_tensor(beats, dtype=dtype),
        enc_index=torch.from_numpy(enc_index),
        enc_pad=torch.from_numpy(enc_pad),
        enc_allow=torch.from_numpy(enc_allow),
        dec_allow=torch.from_numpy(dec_allow),
        masked=torch.from_numpy(masked),
        valid=torch.from_numpy(valid_beats),
        specs=specs,
    )


class ClearModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_t
        self.beat_embed = nn.Linear(cfg.T_b, d)
        self.beat_pos_embed = nn.Parameter(torch.zeros(cfg.N, d))
        self.lead_embed = nn.Parameter(torch.zeros(N_LEADS, d))
        self.cls_tokens = nn.Parameter(torch.zeros(N_LEADS, d))
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.encoder = nn.ModuleList(Block(cfg) for _ in range(cfg.enc_layers))
        self.enc_norm = nn.LayerNorm(d)
        self.decoder = nn.ModuleList(Block(cfg) for _ in range(cfg.dec_layers))
        self.dec_norm = nn.LayerNorm(d)
        self.recon_head = nn.Linear(d, cfg.T_b)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0):
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name in ("beat_pos_embed", "lead_embed", "cls_tokens", "mask_token"):
                    p.normal_(0.0, 0.02, generator=g)
                elif "norm" in name:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    nn.init.xavier_uniform_(p, generator=g)

    # -- embedding ---------------------------------------------------------------

    def embed_full(self, beats):
        """Embeddings of the whole layout ``(B, T, d)``: cls tokens then lead-major beats."""
        B = beats.shape[0]
        tok = self.beat_embed(beats) + self.beat_pos_embed[None, None] + self.lead_embed[None, :, None]
        cls = (self.cls_tokens + self.lead_embed).unsqueeze(0).expand(B, -1, -1)
        return torch.cat([cls, tok.reshape(B, -1, self.cfg.d_t)], dim=1)

    def mask_embedding(self):
        """Decoder fill for masked beats, ``(12, N, d)``."""
        if self.cfg.mask_fill == "zero":
            fill = self.beat_embed.bias
        else:
            fill = self.mask_token
        return fill + self.beat_pos_embed[None] + self.lead_embed[:, None]

    def embed(self, batch: Batch):
        """``(encoder_input, decoder_scaffold)``.

        The scaffold covers the full layout plus one spill slot (index ``T``) for batch
        padding; it holds mask embeddings at masked/padding beats and zeros at positions
        the encoder output will fill.
        """
        B = len(batch)
        d = self.cfg.d_t
        full = self.embed_full(batch.beats)
        full = torch.cat([full, full.new_zeros(B, 1, d)], dim=1)
        enc_in = torch.gather(full, 1, batch.enc_index.unsqueeze(-1).expand(-1, -1, d))
        hidden = (batch.masked | ~batch.valid).reshape(B, -1, 1)
        beats_part = torch.where(hidden, self.mask_embedding().reshape(1, -1, d), full.new_zeros(()))
        scaffold = torch.cat([full.new_zeros(B, N_LEADS, d), beats_part, full.new_zeros(B, 1, d)], dim=1)
        return enc_in, scaffold

    # -- forward -----------------------------------------------------------------

    def encode(self, batch: Batch, impl="dense", trace: ForwardTrace | None = None):
        h, _ = self.embed(batch)
        for blk in self.encoder:
            h = blk(h, batch.enc_allow, impl, None if trace is None else trace.encoder)
        return self.enc_norm(h)

    def forward(self, batch: Batch, impl: str = "dense", trace: ForwardTrace | None = None):
        """Reconstructed beats ``(B, 12, N, T_b)``."""
        B = len(batch)
        d = self.cfg.d_t
        T = N_LEADS * (self.cfg.N + 1)
        enc_in, scaffold = self.embed(batch)
        h = enc_in
        for blk in self.encoder:
            h = blk(h, batch.enc_allow, impl, None if trace is None else trace.encoder)
        h = self.enc_norm(h)
        g = scaffold.scatter(1, batch.enc_index.unsqueeze(-1).expand(-1, -1, d), h)[:, :T]
        for blk in self.decoder:
            g = blk(g, batch.dec_allow, impl, None if trace is None else trace.decoder)
        g = self.dec_norm(g)
        out = self.recon_head(g[:, N_LEADS:])
        return out.reshape(B, N_LEADS, self.cfg.N, self.cfg.T_b)

    def cls_features(self, batch: Batch, impl="dense"):
        """Encoder outputs of the 12 cls tokens, ``(B, 12, d)``."""
        return self.encode(batch, impl)[:, :N_LEADS]


def reconstruction_loss(recon, target, select):
    """Mean squared error over the selected beats (``select`` is ``(B, 12, N)`` bool)."""
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(recon.shape)} vs {tuple(target.shape)}")
    if not bool(select.any()):
        raise EmptySelection("empty selection")
    per_beat = ((recon - target) ** 2).mean(dim=-1)
    return per_beat[select].mean()


def batch_loss(model: ClearModel, batch: Batch, scope="masked", impl="dense"):
    return reconstruction_loss(model(batch, impl), batch.beats, batch.selection(scope))


def compute_gradients(model: ClearModel, batch: Batch, scope="masked"):
    """Reverse-mode gradients of the batch loss, keyed by parameter name."""
    model.zero_grad(set_to_none=True)
    loss = batch_loss(model, batch, scope)
    if not torch.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss.item()}")
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in {name}")
        grads[name] = g
    return loss.detach(), grads


def tensor_class(name: str) -> str:
    """Parameter role shared across layers, e.g. ``encoder.0.attn.w_q.weight`` -> ``block.attn.w_q.weight``."""
    return re.sub(r"^(encoder|decoder)\.\d+\.", "block.", name)


NO_DECAY_PATTERNS = ("norm", "embed", "cls_tokens", "mask_token")


def decay_split(model: nn.Module):
    """``(decayed, not_decayed)`` parameter-name lists.

    Norms, embeddings, cls tokens, the mask token and biases are not decayed.
    """
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if any(k in name for k in NO_DECAY_PATTERNS) or name.endswith(".bias"):
            no_decay.append(name)
        else:
            decay.append(name)
    return decay, no_decay
