"""Multi-lead ECG records: cleaning, resampling, scaling and the CSV record format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

LEADS = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
N_LEADS = len(LEADS)
SPLITS = ("train", "val", "test")


class ParseError(ValueError):
    """Malformed record or manifest file."""


class IrreparableLead(ValueError):
    pass


@dataclass(frozen=True)
class EcgRecord:
    sample_rate: int
    signal: np.ndarray  # (12, S) millivolts, lead order LEADS
    labels: frozenset = frozenset()
    record_id: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        sig = np.asarray(self.signal, dtype=np.float64)
        if sig.ndim != 2 or sig.shape[0] != N_LEADS:
            raise ValueError(f"expected 12 leads, got signal of shape {sig.shape}")
        if sig.shape[1] < 1:
            raise ValueError("record has no samples")
        if int(self.sample_rate) < 1:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        sig.setflags(write=False)
        object.__setattr__(self, "signal", sig)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))
        object.__setattr__(self, "labels", frozenset(self.labels))

    @property
    def n_samples(self) -> int:
        return self.signal.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    def __eq__(self, other):
        if not isinstance(other, EcgRecord):
            return NotImplemented
        return (
            self.sample_rate == other.sample_rate
            and self.labels == other.labels
            and self.record_id == other.record_id
            and self.signal.shape == other.signal.shape
            and np.array_equal(self.signal, other.signal, equal_nan=True)
        )

    def with_signal(self, signal, **changes) -> "EcgRecord":
        return replace(self, signal=signal, **changes)


def _repair_lead(x: np.ndarray, n_neighbors: int = 6) -> np.ndarray:
    finite = np.isfinite(x)
    if finite.all():
        return x
    good = np.flatnonzero(finite)
    if good.size == 0:
        raise IrreparableLead("irreparable lead")
    out = x.copy()
    half = n_neighbors // 2
    for t in np.flatnonzero(~finite):
        split = np.searchsorted(good, t)
        left, right = good[:split], good[split:]
        n_left = min(half, left.size)
        n_right = min(half, right.size)
        # near a boundary, borrow the shortfall from the other side
        short = n_neighbors - n_left - n_right
        extra = min(short, left.size - n_left)
        n_left += extra
        n_right += min(short - extra, right.size - n_right)
        idx = np.concatenate([left[left.size - n_left:], right[:n_right]])
        out[t] = x[idx].mean()
    return out


def repair_nonfinite(rec: EcgRecord) -> EcgRecord:
    """Replace NaN/Inf samples by the mean of the six nearest finite samples of the same lead.

    Three neighbours are taken on each side; near a boundary the missing ones are
    taken from the other side. Records without non-finite samples are returned as is.
    """
    sig = rec.signal
    if np.isfinite(sig).all():
        return rec
    rows = []
    for i, lead in enumerate(sig):
        try:
            rows.append(_repair_lead(lead))
        except IrreparableLead:
            raise IrreparableLead(f"irreparable lead {LEADS[i]} in record {rec.record_id!r}") from None
    return rec.with_signal(np.stack(rows))


def resample(rec: EcgRecord, target_rate: int) -> EcgRecord:
    """Linear-interpolation resampling of every lead to ``target_rate`` Hz."""
    target_rate = int(target_rate)
    if target_rate < 1:
        raise ValueError("target_rate must be >= 1")
    if target_rate == rec.sample_rate:
        return rec
    n_out = max(1, round(rec.n_samples * target_rate / rec.sample_rate))
    src = np.arange(rec.n_samples, dtype=np.float64)
    t = np.arange(n_out, dtype=np.float64) * (rec.sample_rate / target_rate)
    out = np.stack([np.interp(t, src, lead) for lead in rec.signal])
    meta = dict(rec.meta)
    if target_rate > rec.sample_rate:
        meta["upsampled_from"] = rec.sample_rate
    return rec.with_signal(out, sample_rate=target_rate, meta=meta)


def _affine(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    x_min, x_max = x.min(), x.max()
    if x_max == x_min:
        return np.full_like(x, (lo + hi) / 2.0)
    out = lo + (x - x_min) * ((hi - lo) / (x_max - x_min))
    # pin the endpoints against rounding
    out[x == x_min] = lo
    out[x == x_max] = hi
    return out


def scale_range(rec: EcgRecord, lo: float = -3.0, hi: float = 3.0, scope: str = "record") -> EcgRecord:
    """Min-max map the signal onto ``[lo, hi]``, over the whole record or lead by lead."""
    if not lo < hi:
        raise ValueError("scale_range needs lo < hi")
    if scope == "record":
        out = _affine(rec.signal, lo, hi)
    elif scope == "lead":
        out = np.stack([_affine(lead, lo, hi) for lead in rec.signal])
    else:
        raise ValueError(f"unknown scale scope {scope!r}")
    return rec.with_signal(out)


# -- record CSV ----------------------------------------------------------------

def _fmt(v: float) -> str:
    if math.isnan(v):
        return "NaN"
    if math.isinf(v):
        return "Inf" if v > 0 else "-Inf"
    return repr(v)  # shortest string that parses back to the same double


def save_record(rec: EcgRecord, path) -> None:
    """Write a record CSV; every sample reads back bit-identical."""
    sig = rec.signal
    lines = [f"# sample_rate={rec.sample_rate}", ",".join(LEADS)]
    lines.extend(",".join(_fmt(v) for v in row) for row in sig.T.tolist())
    Path(path).write_text("\n".join(lines) + "\n")


def load_record(path, labels=(), record_id: str | None = None) -> EcgRecord:
    path = Path(path)
    with open(path) as fh:
        text = fh.read().splitlines()
    if not text or not text[0].startswith("# sample_rate="):
        raise ParseError(f"{path}:1: expected '# sample_rate=<int>' header")
    try:
        rate = int(text[0].split("=", 1)[1].strip())
    except ValueError:
        raise ParseError(f"{path}:1: sample rate is not an integer") from None
    if len(text) < 2:
        raise ParseError(f"{path}:2: missing lead header")
    header = [h.strip() for h in text[1].split(",")]
    if len(header) != N_LEADS:
        raise ParseError(f"{path}:2: expected 12 leads, found {len(header)} columns")
    if tuple(header) != LEADS:
        raise ParseError(f"{path}:2: leads out of order; expected order {','.join(LEADS)}")
    rows = []
    for lineno, line in enumerate(text[2:], start=3):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != N_LEADS:
            raise ParseError(f"{path}:{lineno}: expected 12 leads, found {len(cells)} values")
        row = []
        for col, cell in enumerate(cells, start=1):
            try:
                row.append(float(cell))
            except ValueError:
                raise ParseError(f"{path}:{lineno}:{col}: non-numeric value {cell!r}") from None
        rows.append(row)
    if not rows:
        raise ParseError(f"{path}: no samples")
    signal = np.asarray(rows, dtype=np.float64).T
    return EcgRecord(rate, signal, frozenset(labels), record_id if record_id is not None else path.stem)


# -- manifest ------------------------------------------------------------------

def write_manifest(entries, path) -> None:
    Path(path).write_text(json.dumps(list(entries), indent=1) + "\n")


def read_manifest(path) -> list[dict]:
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(entries, list):
        raise ParseError(f"{path}: manifest must be a JSON array")
    for k, e in enumerate(entries):
        if not isinstance(e, dict) or not isinstance(e.get("path"), str):
            raise ParseError(f"{path}: entry {k} lacks a 'path' string")
        if e.get("split") not in SPLITS:
            raise ParseError(f"{path}: entry {k} has split {e.get('split')!r}, expected one of {SPLITS}")
        if not isinstance(e.get("labels", []), list):
            raise ParseError(f"{path}: entry {k} labels must be a list")
    return entries


def load_manifest_records(path):
    """Yield ``(entry, EcgRecord)`` for every manifest entry; paths resolve relative to the manifest."""
    path = Path(path)
    for e in read_manifest(path):
        rec_path = Path(e["path"])
        if not rec_path.is_absolute():
            rec_path = path.parent / rec_path
        yield e, load_record(rec_path, labels=e.get("labels", []))
