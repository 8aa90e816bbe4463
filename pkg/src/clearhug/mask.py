"""Conduction/view sparse attention structure.

Token layout (0-based): positions ``0..11`` hold the per-lead cls tokens, beat ``j`` of
lead ``i`` sits at ``12 + i*N + j`` (lead-major, ``X = [C, B_1, ..., B_12]``).

Allow rules for variant CLEAR:

* cls row of lead ``i``: itself plus every valid beat of lead ``i``;
* masked beat ``(i, j)``: every valid beat of heartbeat ``j`` (all 12 leads) plus cls ``i``;
* visible beat ``(i, j)``: every valid beat of lead ``i`` plus cls ``i``;
* padding beats: no row, no column.

The printed index formulas for the same-heartbeat set use heartbeat-major arithmetic;
these sets are defined by meaning (same heartbeat / same lead) on the lead-major layout.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

N_LEADS = 12


class Variant(str, enum.Enum):
    CLEAR = "clear"
    NO_IC = "no_ic"  # masked beats lose the other leads of their heartbeat
    NO_IV = "no_iv"  # cls tokens cut off from beats in both directions
    NO_IC_IV = "no_ic_iv"  # both ablations at once
    FULL = "full"  # plain MAE attention over valid positions


class Stage(str, enum.Enum):
    ENCODER = "encoder"
    DECODER = "decoder"


class Policy(str, enum.Enum):
    PAPER_LITERAL = "paper_literal"  # encoder: only the cls rows are restricted
    CONSISTENT = "consistent"  # encoder beat rows also follow the visible-beat rule


@dataclass(frozen=True)
class TokenLayout:
    N: int
    n_leads: int = N_LEADS

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")

    @property
    def total(self) -> int:
        return self.n_leads * (self.N + 1)

    @property
    def n_beats(self) -> int:
        return self.n_leads * self.N

    def cls(self, lead: int) -> int:
        return lead

    def pos(self, lead: int, beat: int) -> int:
        return self.n_leads + lead * self.N + beat

    def is_cls(self, p: int) -> bool:
        return p < self.n_leads

    def lead_of(self, p: int) -> int:
        return p if p < self.n_leads else (p - self.n_leads) // self.N

    def beat_of(self, p: int) -> int:
        """Heartbeat index of a beat position, -1 for cls positions."""
        return -1 if p < self.n_leads else (p - self.n_leads) % self.N

    def arrays(self):
        """Per-position ``(is_cls, lead, beat)`` arrays over the whole layout."""
        p = np.arange(self.total)
        is_cls = p < self.n_leads
        q = np.maximum(p - self.n_leads, 0)
        lead = np.where(is_cls, p, q // self.N)
        beat = np.where(is_cls, -1, q % self.N)
        return is_cls, lead, beat

    def invalid_positions(self, valid) -> frozenset:
        """Padding positions from a per-heartbeat (N,) or per-beat (12, N) validity mask."""
        v = np.broadcast_to(np.asarray(valid, dtype=bool), (self.n_leads, self.N))
        leads, beats = np.nonzero(~v)
        return frozenset(int(self.pos(i, j)) for i, j in zip(leads, beats))


@dataclass(frozen=True)
class MaskSpec:
    layout: TokenLayout
    K: tuple = ()
    invalid: frozenset = frozenset()
    variant: Variant = Variant.CLEAR

    def __post_init__(self):
        K = tuple(sorted(int(k) for k in self.K))
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "invalid", frozenset(int(p) for p in self.invalid))
        object.__setattr__(self, "variant", Variant(self.variant))
        lay = self.layout
        if len(set(K)) != len(K):
            raise ValueError("K has duplicate positions")
        if any(k < lay.n_leads or k >= lay.total for k in K):
            raise ValueError("K may only hold beat positions")
        if self.invalid & set(K):
            raise ValueError("padding positions cannot be masked")
        if any(p < lay.n_leads or p >= lay.total for p in self.invalid):
            raise ValueError("only beat positions can be padding")

    @property
    def masked(self) -> np.ndarray:
        m = np.zeros(self.layout.total, dtype=bool)
        m[list(self.K)] = True
        return m

    @property
    def valid(self) -> np.ndarray:
        v = np.ones(self.layout.total, dtype=bool)
        v[list(self.invalid)] = False
        return v

    @property
    def visible(self) -> np.ndarray:
        """Layout positions fed to the encoder: cls tokens then unmasked valid beats."""
        return np.flatnonzero(self.valid & ~self.masked)


@dataclass(frozen=True)
class MaskMatrix:
    allow: np.ndarray  # (rows, cols) bool, True = attend
    positions: np.ndarray  # layout position of each row/column
    stage: Stage
    policy: Policy
    variant: Variant

    @property
    def row_sizes(self) -> np.ndarray:
        return self.allow.sum(axis=1)

    @property
    def pair_count(self) -> int:
        return int(self.allow.sum())

    def additive(self, neg: float = -np.inf) -> np.ndarray:
        """The 0 / -inf matrix form."""
        return np.where(self.allow, 0.0, neg)


def allow_set(p: int, spec: MaskSpec) -> frozenset:
    """Positions that row ``p`` may attend to (decoder semantics, full layout)."""
    lay, variant = spec.layout, spec.variant
    if not 0 <= p < lay.total:
        raise IndexError(f"position {p} outside layout of {lay.total}")
    if p in spec.invalid:
        return frozenset()
    valid = lambda q: q not in spec.invalid  # noqa: E731
    if variant is Variant.FULL:
        return frozenset(q for q in range(lay.total) if valid(q))

    no_ic = variant in (Variant.NO_IC, Variant.NO_IC_IV)
    no_iv = variant in (Variant.NO_IV, Variant.NO_IC_IV)
    lead = lay.lead_of(p)
    if lay.is_cls(p):
        out = {p}
        if not no_iv:
            out |= {lay.pos(lead, k) for k in range(lay.N) if valid(lay.pos(lead, k))}
        return frozenset(out)

    j = lay.beat_of(p)
    if p in spec.K:
        if no_ic:
            out = {p}
        else:
            out = {lay.pos(i, j) for i in range(lay.n_leads) if valid(lay.pos(i, j))}
    else:
        out = {lay.pos(lead, k) for k in range(lay.N) if valid(lay.pos(lead, k))}
    if not no_iv:
        out.add(lay.cls(lead))
    return frozenset(out)


def decoder_allow(spec: MaskSpec) -> np.ndarray:
    """Vectorised full-layout allow matrix; row ``p`` equals ``allow_set(p, spec)``."""
    lay, variant = spec.layout, spec.variant
    is_cls, lead, beat = lay.arrays()
    valid = spec.valid
    masked = spec.masked
    col_ok = valid[None, :]
    row_ok = valid[:, None]
    if variant is Variant.FULL:
        return row_ok & col_ok

    no_ic = variant in (Variant.NO_IC, Variant.NO_IC_IV)
    no_iv = variant in (Variant.NO_IV, Variant.NO_IC_IV)
    eye = np.eye(lay.total, dtype=bool)
    same_lead_beat = (lead[:, None] == lead[None, :]) & ~is_cls[None, :]
    same_heartbeat = (beat[:, None] == beat[None, :]) & ~is_cls[None, :] & ~is_cls[:, None]
    own_cls = is_cls[None, :] & (lead[:, None] == lead[None, :])

    cls_rows = eye.copy() if no_iv else eye | same_lead_beat
    masked_rows = eye.copy() if no_ic else same_heartbeat
    visible_rows = same_lead_beat.copy()
    if not no_iv:
        masked_rows = masked_rows | own_cls
        visible_rows = visible_rows | own_cls

    A = np.where(is_cls[:, None], cls_rows, np.where(masked[:, None], masked_rows, visible_rows))
    return A & row_ok & col_ok


def build_mask_matrix(spec: MaskSpec, stage: Stage = Stage.DECODER,
                      policy: Policy = Policy.PAPER_LITERAL) -> MaskMatrix:
    """Realise the allow matrix for the decoder (full layout) or the encoder (visible tokens).

    The decoder keeps padding positions as empty rows/columns; callers running attention
    must keep those rows out of the softmax (see ``model.prepare_batch``).
    """
    stage, policy = Stage(stage), Policy(policy)
    full = decoder_allow(spec)
    if stage is Stage.DECODER:
        return MaskMatrix(full, np.arange(spec.layout.total), stage, policy, spec.variant)

    vis = spec.visible
    # rows of visible beats never use the masked-row rule, so the submatrix is exact
    A = full[np.ix_(vis, vis)].copy()
    if policy is Policy.PAPER_LITERAL:
        A[vis >= spec.layout.n_leads, :] = True
    return MaskMatrix(A, vis, stage, policy, spec.variant)


def sample_masked(layout: TokenLayout, valid, ratio: float, rng: np.random.Generator) -> tuple:
    """Draw ``round(ratio * n_valid_beats)`` valid beat positions uniformly without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("mask ratio must lie in [0, 1]")
    invalid = layout.invalid_positions(valid)
    candidates = np.array([p for p in range(layout.n_leads, layout.total) if p not in invalid], dtype=np.int64)
    n = round(ratio * candidates.size)
    if n == 0:
        return ()
    picked = rng.choice(candidates, size=n, replace=False)
    return tuple(sorted(int(p) for p in picked))


def row_size_histogram(matrix: MaskMatrix) -> dict:
    sizes, counts = np.unique(matrix.row_sizes, return_counts=True)
    return {int(s): int(c) for s, c in zip(sizes, counts)}
