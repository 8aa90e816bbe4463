"""Heartbeat detection and beat tokenisation."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter1d, uniform_filter1d

from .signal import N_LEADS, EcgRecord, load_manifest_records, repair_nonfinite, resample, scale_range

log = logging.getLogger(__name__)

BEAT_BEFORE = 0.3  # s before R
BEAT_AFTER = 0.4  # s after R (exclusive)
REFRACTORY = 0.25  # s
ENERGY_FLOOR = 0.1  # fraction of the record's peak energy
MAGIC = b"CHTK"
VERSION = 1


class NoHeartbeats(ValueError):
    pass


@dataclass(frozen=True)
class TokenizedRecord:
    beats: np.ndarray  # (12, N, T_b) float32
    valid: np.ndarray  # (N,) bool; a beat exists in all leads or in none
    beat_times: np.ndarray  # (N,) R-peak sample indices, -1 for padding
    labels: frozenset = frozenset()
    record_id: str = ""

    @property
    def N(self) -> int:
        return self.beats.shape[1]

    @property
    def T_b(self) -> int:
        return self.beats.shape[2]

    @property
    def valid_matrix(self) -> np.ndarray:
        return np.broadcast_to(self.valid, (N_LEADS, self.N))


def detect_r_peaks(rec: EcgRecord) -> list[int]:
    """R-peak sample indices from the mean of leads I and II.

    Energy = squared first difference smoothed over 0.12 s; a candidate must exceed half
    the running 2 s maximum of that energy (and a tenth of the record maximum). Candidates closer than the refractory
    period keep the stronger one; each survivor is then snapped to the signal maximum
    within +-0.08 s.
    """
    fs = rec.sample_rate
    x = 0.5 * (rec.signal[0] + rec.signal[1])
    if not np.isfinite(x).all():
        raise ValueError("detect_r_peaks needs a finite record; run repair_nonfinite first")
    d = np.zeros_like(x)
    d[1:] = np.diff(x) ** 2
    energy = uniform_filter1d(d, size=max(1, round(0.12 * fs)), mode="constant")
    thresh = 0.5 * maximum_filter1d(energy, size=max(1, round(2.0 * fs)), mode="nearest")
    # floor for stretches (record edges, long pauses) whose 2 s window holds no beat
    thresh = np.maximum(thresh, ENERGY_FLOOR * energy.max())

    e_prev = np.concatenate([[-np.inf], energy[:-1]])
    e_next = np.concatenate([energy[1:], [-np.inf]])
    cand = np.flatnonzero((energy > thresh) & (energy > 0) & (energy >= e_prev) & (energy > e_next))
    if cand.size == 0:
        raise NoHeartbeats("no heartbeats detected")

    gap = REFRACTORY * fs
    accepted: list[int] = []
    for c in cand[np.argsort(-energy[cand], kind="stable")]:
        if all(abs(c - a) >= gap for a in accepted):
            accepted.append(int(c))
    accepted.sort()

    half = max(1, round(0.08 * fs))
    peaks: list[int] = []
    for c in accepted:
        lo, hi = max(0, c - half), min(len(x), c + half + 1)
        r = lo + int(np.argmax(x[lo:hi]))
        if not peaks or r - peaks[-1] >= gap:
            peaks.append(r)
    return peaks


def beat_window(lead: np.ndarray, r: int, fs: int, T_b: int) -> np.ndarray:
    """Resample ``[r - 0.3 s, r + 0.4 s)`` of one lead to ``T_b`` points, zero outside the record."""
    width = BEAT_BEFORE + BEAT_AFTER
    pos = r + (-BEAT_BEFORE + np.arange(T_b) * (width / T_b)) * fs
    return np.interp(pos, np.arange(lead.size), lead, left=0.0, right=0.0)


def tokenize(rec: EcgRecord, N: int = 15, T_b: int = 64, peaks=None) -> TokenizedRecord:
    """Cut every lead into exactly ``N`` beat tokens of ``T_b`` samples.

    The first ``N`` detected beats are kept; missing ones are zero beats with ``valid`` false.
    """
    if peaks is None:
        peaks = detect_r_peaks(rec)
    peaks = list(peaks)[:N]
    beats = np.zeros((N_LEADS, N, T_b), dtype=np.float32)
    valid = np.zeros(N, dtype=bool)
    times = np.full(N, -1, dtype=np.int64)
    for j, r in enumerate(peaks):
        for i in range(N_LEADS):
            beats[i, j] = beat_window(rec.signal[i], r, rec.sample_rate, T_b)
        valid[j] = True
        times[j] = r
    return TokenizedRecord(beats, valid, times, rec.labels, rec.record_id)


# -- tokenized dataset ----------------------------------------------------------

@dataclass
class TokenizedDataset:
    beats: np.ndarray  # (R, 12, N, T_b) float32
    valid: np.ndarray  # (R, N) bool
    labels: np.ndarray  # (R, C) bool
    classes: list
    record_ids: list

    def __len__(self):
        return self.beats.shape[0]

    @property
    def N(self):
        return self.beats.shape[2]

    @property
    def T_b(self):
        return self.beats.shape[3]

    @classmethod
    def from_records(cls, toks, classes=None):
        toks = list(toks)
        if classes is None:
            classes = sorted(set().union(*(t.labels for t in toks))) if toks else []
        index = {c: k for k, c in enumerate(classes)}
        labels = np.zeros((len(toks), len(classes)), dtype=bool)
        for r, t in enumerate(toks):
            for lab in t.labels:
                labels[r, index[lab]] = True
        return cls(
            beats=np.stack([t.beats for t in toks]).astype(np.float32),
            valid=np.stack([t.valid for t in toks]),
            labels=labels,
            classes=list(classes),
            record_ids=[t.record_id for t in toks],
        )

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return TokenizedDataset(self.beats[idx], self.valid[idx], self.labels[idx], list(self.classes),
                                [self.record_ids[k] for k in idx])


def _put_str(buf: bytearray, s: str):
    raw = s.encode("utf-8")
    buf += struct.pack("<H", len(raw)) + raw


def save_tokenized(ds: TokenizedDataset, path) -> None:
    """Little-endian: magic, version u32, n_records u32, N u16, T_b u16, class table, records."""
    R, L, N, T_b = ds.beats.shape
    buf = bytearray(MAGIC)
    buf += struct.pack("<IIHH", VERSION, R, N, T_b)
    buf += struct.pack("<H", len(ds.classes))
    for c in ds.classes:
        _put_str(buf, c)
    for r in range(R):
        _put_str(buf, ds.record_ids[r])
        buf += np.packbits(ds.labels[r], bitorder="little").tobytes()
        buf += np.packbits(ds.valid[r], bitorder="little").tobytes()
        buf += ds.beats[r].astype("<f4").tobytes(order="C")
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def load_tokenized(path) -> TokenizedDataset:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a tokenized dataset (bad magic)")
    version, R, N, T_b = struct.unpack_from("<IIHH", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 16

    def get_str():
        nonlocal off
        (n,) = struct.unpack_from("<H", data, off)
        s = data[off + 2: off + 2 + n].decode("utf-8")
        off += 2 + n
        return s

    (n_classes,) = struct.unpack_from("<H", data, off)
    off += 2
    classes = [get_str() for _ in range(n_classes)]
    lab_bytes, val_bytes = (n_classes + 7) // 8, (N + 7) // 8
    beat_bytes = N_LEADS * N * T_b * 4
    beats = np.empty((R, N_LEADS, N, T_b), dtype=np.float32)
    valid = np.empty((R, N), dtype=bool)
    labels = np.empty((R, n_classes), dtype=bool)
    ids = []
    for r in range(R):
        ids.append(get_str())
        labels[r] = np.unpackbits(np.frombuffer(data, np.uint8, lab_bytes, off), count=n_classes, bitorder="little")
        off += lab_bytes
        valid[r] = np.unpackbits(np.frombuffer(data, np.uint8, val_bytes, off), count=N, bitorder="little")
        off += val_bytes
        beats[r] = np.frombuffer(data, "<f4", beat_bytes // 4, off).reshape(N_LEADS, N, T_b)
        off += beat_bytes
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return TokenizedDataset(beats, valid, labels, classes, ids)


def prepare_record(rec: EcgRecord, target_rate: int = 100, scale=None, scale_scope: str = "record") -> EcgRecord:
    rec = repair_nonfinite(rec)
    rec = resample(rec, target_rate)
    if scale is not None:
        rec = scale_range(rec, scale[0], scale[1], scope=scale_scope)
    return rec


def tokenize_manifest(manifest, out_dir, N=15, T_b=64, target_rate=100, scale=None, scale_scope="record"):
    """Tokenize every manifest record and write ``<split>.chtk`` files. Returns split sizes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_split: dict[str, list] = {"train": [], "val": [], "test": []}
    skipped = []
    for entry, rec in load_manifest_records(manifest):
        rec = prepare_record(rec, target_rate, scale, scale_scope)
        try:
            per_split[entry["split"]].append(tokenize(rec, N, T_b))
        except NoHeartbeats:
            skipped.append(rec.record_id)
            log.warning("skipping %s: no heartbeats detected", rec.record_id)
    all_toks = [t for v in per_split.values() for t in v]
    classes = sorted(set().union(*(t.labels for t in all_toks))) if all_toks else []
    sizes = {}
    for split, toks in per_split.items():
        if toks:
            save_tokenized(TokenizedDataset.from_records(toks, classes), out_dir / f"{split}.chtk")
        sizes[split] = len(toks)
    sizes["skipped"] = skipped
    return sizes
