"""Synthetic labelled 12-lead ECG with planted R peaks.

Each beat is a sum of five Gaussian bumps (P, Q, R, S, T). Every lead sees the same
bumps through its own fixed row of ``LEAD_PROJECTION``, so all twelve leads share
one conduction event per beat but differ in view.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .signal import EcgRecord, save_record, write_manifest

CLASSES = ("SINUS", "TACHY", "BRADY", "IRREGULAR", "PREMATURE")

# bump order: P, Q, R, S, T
BUMP_AMP = np.array([0.15, -0.12, 1.0, -0.25, 0.30])
BUMP_WIDTH = np.array([0.025, 0.015, 0.020, 0.015, 0.050])  # seconds
BUMP_OFFSET = np.array([-0.16, -0.035, 0.0, 0.035, 0.30])  # seconds from R; T scales with sqrt(RR)
# per-beat amplitude jitter (std, relative); shared by all leads of a beat, small on QRS
BEAT_JITTER = np.array([0.20, 0.05, 0.04, 0.05, 0.20])

# Limb rows follow Einthoven/Goldberger (III = II - I, aVR = -(I+II)/2, ...).
LEAD_PROJECTION = np.array([
    [0.60, 0.50, 0.70, 0.40, 0.60],     # I
    [1.00, 0.60, 1.00, 0.50, 1.00],     # II
    [0.40, 0.10, 0.30, 0.10, 0.40],     # III
    [-0.80, -0.55, -0.85, -0.45, -0.80],  # aVR
    [0.10, 0.20, 0.20, 0.15, 0.10],     # aVL
    [0.70, 0.35, 0.65, 0.30, 0.70],     # aVF
    [0.30, 0.10, 0.30, 1.50, -0.20],    # V1
    [0.40, 0.20, 0.60, 1.60, 0.60],     # V2
    [0.40, 0.30, 1.00, 1.00, 0.80],     # V3
    [0.45, 0.40, 1.50, 0.60, 0.85],     # V4
    [0.40, 0.50, 1.30, 0.30, 0.65],     # V5
    [0.35, 0.45, 1.00, 0.20, 0.50],     # V6
])

RATE_RANGE = {  # bpm
    "SINUS": (60.0, 90.0),
    "TACHY": (110.0, 150.0),
    "BRADY": (35.0, 55.0),
    "IRREGULAR": (60.0, 90.0),
    "PREMATURE": (60.0, 90.0),
}


def _uniform_mix():
    return {c: 1.0 / len(CLASSES) for c in CLASSES}


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_records: int = 100
    sample_rate: int = 100
    duration: float = 10.0
    class_mix: dict = field(default_factory=_uniform_mix)
    noise_std: float = 0.02
    wander_amp: float = 0.15

    def __post_init__(self):
        unknown = set(self.class_mix) - set(CLASSES)
        if unknown:
            raise ValueError(f"unknown classes in class_mix: {sorted(unknown)}")
        if any(p < 0 for p in self.class_mix.values()):
            raise ValueError("class probabilities must be non-negative")
        if abs(sum(self.class_mix.values()) - 1.0) > 1e-9:
            raise ValueError("class_mix probabilities must sum to 1")
        if self.duration * self.sample_rate < 100:
            raise ValueError("duration * sample_rate must be >= 100")
        if self.n_records < 0:
            raise ValueError("n_records must be >= 0")
        if self.noise_std < 0 or self.wander_amp < 0:
            raise ValueError("noise_std and wander_amp must be >= 0")

    def to_dict(self):
        return {
            "seed": self.seed, "n_records": self.n_records, "sample_rate": self.sample_rate,
            "duration": self.duration, "class_mix": dict(self.class_mix),
            "noise_std": self.noise_std, "wander_amp": self.wander_amp,
        }


def _beat_schedule(klass, bpm, duration, rng):
    """R-peak times (s), per-beat RR used for T placement, and the premature beat index."""
    rr = 60.0 / bpm
    t = rng.uniform(0.1, 0.1 + rr)
    times, rrs = [], []
    while t < duration:
        times.append(t)
        if klass == "IRREGULAR":
            step = rr * rng.uniform(0.7, 1.3)
        else:
            step = rr
        rrs.append(step)
        t += step
    times = np.array(times)
    rrs = np.array(rrs)
    premature = -1
    if klass == "PREMATURE" and len(times) >= 4:
        premature = int(rng.integers(2, len(times) - 1))
        times[premature] = times[premature - 1] + 0.6 * rr
        rrs[premature] = 0.6 * rr
    return times, rrs, premature


def generate_record(cfg: SynthConfig, index: int, klass: str | None = None, bpm: float | None = None):
    """Return ``(EcgRecord, planted_peak_indices)``; deterministic in ``(cfg.seed, index)``.

    ``klass`` and ``bpm`` override the sampled class and rate (used for controlled tests).
    """
    rng = np.random.default_rng([cfg.seed, index])
    classes = list(cfg.class_mix)
    probs = np.array([cfg.class_mix[c] for c in classes], dtype=np.float64)
    drawn = classes[int(rng.choice(len(classes), p=probs / probs.sum()))]
    klass = klass or drawn
    lo, hi = RATE_RANGE[klass]
    drawn_bpm = rng.uniform(lo, hi)
    bpm = drawn_bpm if bpm is None else float(bpm)

    fs = cfg.sample_rate
    n = int(round(cfg.duration * fs))
    t = np.arange(n) / fs
    times, rrs, premature = _beat_schedule(klass, bpm, cfg.duration, rng)

    record_amp = BUMP_AMP * rng.uniform(0.8, 1.2, size=5)
    bumps = np.zeros((5, n))
    for k, (r, rr) in enumerate(zip(times, rrs)):
        amp = record_amp * (1.0 + BEAT_JITTER * rng.standard_normal(5))
        width = BUMP_WIDTH.copy()
        offset = BUMP_OFFSET.copy()
        offset[4] *= math.sqrt(min(rr, 1.6))
        if k == premature:
            amp[0] = 0.0
            amp[2] *= 2.2  # ectopic QRS: wide and tall
            width[2] *= 2.5
        for b in range(5):
            bumps[b] += amp[b] * np.exp(-0.5 * ((t - r - offset[b]) / width[b]) ** 2)

    signal = LEAD_PROJECTION @ bumps
    phase = rng.uniform(0, 2 * np.pi)
    signal += cfg.wander_amp * np.sin(2 * np.pi * 0.3 * t + phase)[None, :]
    signal += cfg.noise_std * rng.standard_normal(signal.shape)
    signal = signal.astype(np.float32).astype(np.float64)

    peaks = np.round(times * fs).astype(int)
    peaks = peaks[(peaks >= 0) & (peaks < n)]
    rec = EcgRecord(fs, signal, frozenset({klass}), f"synth_{index:05d}",
                    meta={"bpm": bpm, "class": klass})
    return rec, peaks.tolist()


def split_of(index: int, n_records: int) -> str:
    if index < int(0.7 * n_records):
        return "train"
    if index < int(0.8 * n_records):
        return "val"
    return "test"


def _write_one(args):
    cfg, index, rec_dir = args
    rec, peaks = generate_record(cfg, index)
    save_record(rec, rec_dir / f"{rec.record_id}.csv")
    return rec.record_id, sorted(rec.labels), peaks


def generate_dataset(cfg: SynthConfig, out_dir, workers: int = 1) -> dict:
    """Write record CSVs, ``manifest.json`` and ``peaks.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    rec_dir = out_dir / "records"
    rec_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, i, rec_dir) for i in range(cfg.n_records)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_write_one, jobs, chunksize=16))
    else:
        results = [_write_one(j) for j in jobs]

    manifest, peaks = [], {}
    for index, (rid, labels, pk) in enumerate(results):
        manifest.append({"path": f"records/{rid}.csv", "labels": labels, "split": split_of(index, cfg.n_records)})
        peaks[rid] = pk
    write_manifest(manifest, out_dir / "manifest.json")
    (out_dir / "peaks.json").write_text(json.dumps(peaks, sort_keys=True) + "\n")
    return {"manifest": manifest, "peaks": peaks}
