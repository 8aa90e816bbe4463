import numpy as np
import pytest

from clearhug.signal import EcgRecord
from clearhug.synth import SynthConfig, generate_dataset, generate_record
from clearhug.tokenizer import (
    NoHeartbeats,
    TokenizedDataset,
    detect_r_peaks,
    load_tokenized,
    save_tokenized,
    tokenize,
    tokenize_manifest,
)


def interior_match(found, planted, n_samples, tol=3, margin=20):
    """Every planted peak away from the record edges is found, and nothing extra inside."""
    found, planted = np.asarray(found), np.asarray(planted)
    inner = planted[(planted > margin) & (planted < n_samples - margin)]
    hit = all(np.abs(found - q).min() <= tol for q in inner)
    spurious = any(np.abs(planted - q).min() > tol for q in found if margin < q < n_samples - margin)
    return hit and not spurious


class TestDetector:
    def test_sixty_bpm(self):
        rec, planted = generate_record(SynthConfig(noise_std=0.0), 0, klass="SINUS", bpm=60)
        peaks = detect_r_peaks(rec)
        assert 9 <= len(peaks) <= 11
        np.testing.assert_allclose(np.diff(peaks) / rec.sample_rate, 1.0, atol=0.05)

    def test_seventy_five_bpm_noiseless(self):
        rec, planted = generate_record(SynthConfig(noise_std=0.0), 3, klass="SINUS", bpm=75)
        assert interior_match(detect_r_peaks(rec), planted, rec.n_samples)

    @pytest.mark.parametrize("klass", ["SINUS", "TACHY", "BRADY", "IRREGULAR", "PREMATURE"])
    def test_every_class(self, klass):
        cfg = SynthConfig(seed=5)
        for i in range(25):
            rec, planted = generate_record(cfg, i, klass=klass)
            assert interior_match(detect_r_peaks(rec), planted, rec.n_samples), (klass, i)

    def test_flat_signal(self):
        with pytest.raises(NoHeartbeats, match="no heartbeats detected"):
            detect_r_peaks(EcgRecord(100, np.zeros((12, 1000))))

    def test_amplitude_invariant(self):
        rec, _ = generate_record(SynthConfig(), 11)
        doubled = rec.with_signal(rec.signal * 2)
        assert detect_r_peaks(rec) == detect_r_peaks(doubled)

    def test_refractory_and_increasing(self):
        cfg = SynthConfig(seed=9)
        for i in range(20):
            rec, _ = generate_record(cfg, i)
            p = np.asarray(detect_r_peaks(rec))
            assert np.all(np.diff(p) >= 0.25 * rec.sample_rate)


class TestTokenize:
    def test_shape_always(self):
        rec, _ = generate_record(SynthConfig(), 0, klass="TACHY")
        tok = tokenize(rec, 15, 64)
        assert tok.beats.shape == (12, 15, 64) and tok.beats.dtype == np.float32
        assert np.isfinite(tok.beats).all()

    def test_padding_count(self):
        rec, _ = generate_record(SynthConfig(noise_std=0.0), 2, klass="SINUS", bpm=72)
        tok = tokenize(rec, 15, 64)
        assert tok.valid.sum() == 12
        assert not tok.valid[12:].any()
        assert np.all(tok.beats[:, 12:] == 0)
        assert np.all(tok.beat_times[12:] == -1)

    def test_exactly_n_beats(self):
        rec, planted = generate_record(SynthConfig(), 0, klass="SINUS", bpm=60)
        tok = tokenize(rec, len(planted), 16, peaks=planted)
        assert tok.valid.all()

    def test_first_n_kept(self):
        rec, planted = generate_record(SynthConfig(), 0, klass="TACHY")
        tok = tokenize(rec, 4, 16, peaks=planted)
        assert list(tok.beat_times) == planted[:4]

    def test_window_content(self):
        # a ramp makes the resampled window easy to predict
        S = 1000
        sig = np.tile(np.arange(S, dtype=float), (12, 1))
        tok = tokenize(EcgRecord(100, sig), N=1, T_b=70, peaks=[500])
        np.testing.assert_allclose(tok.beats[0, 0], np.arange(470, 540), atol=1e-3)

    def test_edge_beat_zero_padded_and_valid(self):
        sig = np.ones((12, 300))
        tok = tokenize(EcgRecord(100, sig), N=2, T_b=70, peaks=[10, 295])
        assert tok.valid.all()
        assert np.all(tok.beats[:, 0, :20] == 0) and np.all(tok.beats[:, 0, 21:] == 1)
        assert np.all(tok.beats[:, 1, 35:] == 0)

    def test_beat_times_shared_by_leads(self):
        rec, _ = generate_record(SynthConfig(), 1)
        tok = tokenize(rec)
        assert tok.valid_matrix.shape == (12, 15)
        assert (tok.valid_matrix == tok.valid[None]).all()

    def test_precordial_permutation(self):
        rec, _ = generate_record(SynthConfig(), 6)
        perm = [0, 1, 2, 3, 4, 5, 11, 7, 9, 8, 10, 6]
        a = tokenize(rec)
        b = tokenize(rec.with_signal(rec.signal[perm]))
        np.testing.assert_array_equal(b.beats, a.beats[perm])
        np.testing.assert_array_equal(a.valid, b.valid)

    def test_deterministic(self):
        rec, _ = generate_record(SynthConfig(), 8)
        assert tokenize(rec).beats.tobytes() == tokenize(rec).beats.tobytes()


class TestDatasetFile:
    def test_round_trip(self, tmp_path):
        cfg = SynthConfig(seed=4)
        toks = [tokenize(generate_record(cfg, i)[0], 5, 16) for i in range(6)]
        ds = TokenizedDataset.from_records(toks, ["A", "BRADY", "IRREGULAR", "PREMATURE", "SINUS", "TACHY"])
        save_tokenized(ds, tmp_path / "x.chtk")
        back = load_tokenized(tmp_path / "x.chtk")
        assert back.beats.tobytes() == ds.beats.tobytes()
        assert np.array_equal(back.valid, ds.valid) and np.array_equal(back.labels, ds.labels)
        assert back.classes == ds.classes and back.record_ids == ds.record_ids

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.chtk").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValueError, match="bad magic"):
            load_tokenized(tmp_path / "x.chtk")

    def test_manifest_pipeline(self, tmp_path):
        generate_dataset(SynthConfig(seed=0, n_records=10), tmp_path / "raw")
        sizes = tokenize_manifest(tmp_path / "raw" / "manifest.json", tmp_path / "tok", N=4, T_b=16, scale=(-3, 3))
        assert (sizes["train"], sizes["val"], sizes["test"]) == (7, 1, 2)
        train = load_tokenized(tmp_path / "tok" / "train.chtk")
        assert train.beats.shape == (7, 12, 4, 16)
        assert np.abs(train.beats).max() <= 3.0 + 1e-6

    def test_manifest_skips_flat_record(self, tmp_path):
        from clearhug.signal import save_record, write_manifest

        save_record(EcgRecord(100, np.zeros((12, 500)), record_id="flat"), tmp_path / "flat.csv")
        rec, _ = generate_record(SynthConfig(), 0)
        save_record(rec, tmp_path / "ok.csv")
        write_manifest([{"path": "flat.csv", "split": "train", "labels": ["X"]},
                        {"path": "ok.csv", "split": "train", "labels": ["SINUS"]}], tmp_path / "m.json")
        sizes = tokenize_manifest(tmp_path / "m.json", tmp_path / "tok", N=3, T_b=8)
        assert sizes["train"] == 1 and sizes["skipped"] == ["flat"]
