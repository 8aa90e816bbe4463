import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest
import torch

from clearhug.evaluate import (
    ProbeReport,
    UndefinedAUC,
    activation_ratios,
    efficiency_for,
    efficiency_report,
    layer_flops,
    macro_auc,
    recon_report,
    roc_auc,
    write_probe_report,
)
from clearhug.mask import MaskSpec, TokenLayout, Variant, build_mask_matrix, sample_masked
from clearhug.model import ClearModel, ModelConfig
from clearhug.pretrain import fixed_masks
from oracles import brute_allow, pair_auc


class TestAUC:
    def test_perfect_and_inverted(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_all_tied(self):
        assert roc_auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_hand_example(self):
        # positives 0.35, 0.8 ; negatives 0.1, 0.4 -> 3 of 4 pairs ordered
        assert roc_auc([0.1, 0.35, 0.4, 0.8], [0, 1, 0, 1]) == 0.75

    def test_single_class(self):
        with pytest.raises(UndefinedAUC, match="single class"):
            roc_auc([0.1, 0.2], [1, 1])

    def test_matches_pair_counting(self):
        rng = np.random.default_rng(0)
        for k in range(1000):
            n = int(rng.integers(2, 40))
            labels = rng.integers(0, 2, n)
            labels[0], labels[1] = 0, 1
            scores = rng.integers(0, 5, n) / 4 if k % 2 else rng.standard_normal(n)
            assert roc_auc(scores, labels) == pair_auc(scores, labels)

    def test_monotone_invariance(self):
        rng = np.random.default_rng(1)
        s, y = rng.standard_normal(200), rng.integers(0, 2, 200)
        assert roc_auc(s, y) == roc_auc(np.exp(3 * s) + 7, y)

    def test_complement(self):
        rng = np.random.default_rng(2)
        s, y = rng.standard_normal(300), rng.integers(0, 2, 300)
        assert roc_auc(s, y) + roc_auc(-s, y) == pytest.approx(1.0, abs=1e-12)
        assert roc_auc(s, y) + roc_auc(s, 1 - y) == pytest.approx(1.0, abs=1e-12)


class TestMacro:
    def test_excludes_single_class_columns(self):
        scores = np.array([[0.1, 0.5, 0.9], [0.9, 0.5, 0.2], [0.2, 0.5, 0.3]])
        labels = np.array([[0, 0, 1], [1, 0, 0], [0, 0, 1]])
        macro, per, excluded = macro_auc(scores, labels, ["A", "B", "C"])
        assert excluded == ["B"]
        assert per == {"A": 1.0, "C": 1.0} and macro == 1.0

    def test_all_excluded(self):
        with pytest.raises(UndefinedAUC):
            macro_auc(np.zeros((3, 2)), np.zeros((3, 2)))

    def test_random_scores_near_half(self):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 2, (2000, 5))
        macro, _, _ = macro_auc(rng.random((2000, 5)), labels)
        assert abs(macro - 0.5) <= 0.05


class TestActivationRatios:
    def test_normalised_per_class(self):
        g = np.zeros((2, 7, 3))
        g[0, 0] = [1, -1, 0]  # all mass in G1
        g[1, :, 0] = 1.0  # uniform
        r = activation_ratios(g, [[1, 0], [1, 1]], ["A", "B"])
        assert r.ratios["B"] == [1 / 7] * 7
        np.testing.assert_allclose(r.ratios["A"], [(1 + 1 / 7) / 2] + [1 / 14] * 6)
        assert r.n_zero == 0

    def test_zero_sample_is_uniform(self):
        r = activation_ratios(np.zeros((1, 7, 4)), [[1]], ["A"])
        assert r.ratios["A"] == [1 / 7] * 7 and r.n_zero == 1

    def test_class_without_positives_omitted(self):
        r = activation_ratios(np.ones((2, 7, 2)), [[1, 0], [1, 0]], ["A", "B"])
        assert list(r.ratios) == ["A"]


def test_write_probe_report(tmp_path):
    rep = ProbeReport({"A": 0.75}, 0.75, {"A": [1 / 7] * 7}, ["B"], {"head": "hug"})
    write_probe_report(rep, tmp_path)
    assert json.loads((tmp_path / "metrics.json").read_text())["macro_auc"] == 0.75
    rows = list(csv.reader(open(tmp_path / "per_class_auc.csv")))
    assert rows == [["class", "auc"], ["A", "0.75"], ["B", "excluded"]]
    header = next(csv.reader(open(tmp_path / "activation_ratios.csv")))
    assert header[1] == "G1" and header[-1] == "G1+G2+G3"


# -- reconstruction report ---------------------------------------------------------

TOY = ModelConfig.toy(N=3, T_b=8)


def meta(variant="clear", cfg=TOY):
    return {"variant": variant, "policy": "paper_literal", "rng_seed": 0, "epoch": 0, "config": cfg}


def test_recon_report_rows_and_files(toy_sets, tmp_path):
    test_set = toy_sets[2]
    m = ClearModel(TOY, seed=0)
    ckpts = {name: (m, meta(v)) for name, v in
             (("clear", "clear"), ("no_ic", "no_ic"), ("no_iv", "no_iv"), ("no_ic_iv", "no_ic_iv"))}
    rows = recon_report(ckpts, test_set, out_dir=tmp_path, n_svg=2)
    assert len(rows) == 4
    assert rows[0]["delta_vs_clear"] == 0.0
    table = list(csv.DictReader(open(tmp_path / "recon_mse.csv")))
    assert [r["label"] for r in table] == ["clear", "no_ic", "no_iv", "no_ic_iv"]
    svgs = sorted((tmp_path / "recon").glob("*.svg"))
    assert len(svgs) == 2
    for p in svgs:
        assert ET.parse(p).getroot().tag.endswith("svg")


def test_recon_self_comparison(toy_sets):
    m = ClearModel(TOY, seed=1)
    rows = recon_report({"a": (m, meta()), "b": (m, meta())}, toy_sets[2])
    assert rows[0]["masked_mse"] == rows[1]["masked_mse"] and rows[1]["delta_vs_clear"] == 0.0


def test_recon_config_mismatch(toy_sets):
    other = ModelConfig.toy(N=3, T_b=8, d_t=8)
    with pytest.raises(ValueError, match="config mismatch"):
        recon_report({"a": (ClearModel(TOY), meta()), "b": (ClearModel(other), meta(cfg=other))}, toy_sets[2])


def test_zero_head_mse_is_second_moment(toy_sets):
    test_set = toy_sets[2]
    m = ClearModel(TOY)
    with torch.no_grad():
        m.recon_head.weight.zero_()
        m.recon_head.bias.zero_()
    rows = recon_report({"z": (m, meta())}, test_set, mask_ratio=0.5, seed=4)
    K = fixed_masks(test_set, 0.5, 4)
    lay = TokenLayout(TOY.N)
    sq = [np.mean(test_set.beats[r, lay.lead_of(p), lay.beat_of(p)].astype(np.float64) ** 2)
          for r, ks in enumerate(K) for p in ks]
    assert rows[0]["masked_mse"] == pytest.approx(np.mean(sq), rel=1e-6)


# -- efficiency -------------------------------------------------------------------------

def test_full_variant_sparse_equals_dense():
    rep = efficiency_for(ModelConfig(), Variant.FULL)
    assert rep["pair_count_sparse"] == rep["pair_count_dense"]
    assert rep["est_flops_sparse"] == rep["est_flops_dense"]


def test_decoder_pairs_match_mask_oracle(tmp_path):
    cfg = ModelConfig()
    rep = efficiency_for(cfg, Variant.CLEAR, out_dir=tmp_path)
    lay = TokenLayout(cfg.N)
    K = sample_masked(lay, np.ones(cfg.N, bool), 0.8, np.random.default_rng(0))
    masked = {(lay.lead_of(p), lay.beat_of(p)) for p in K}
    dec = rep["stages"]["decoder"]
    assert dec["pair_count_sparse"] == int(brute_allow(cfg.N, masked, set(), "clear").sum()) == 2640
    assert dec["pair_count_dense"] == 192 ** 2
    assert dec["pair_count_dense"] >= 10 * dec["pair_count_sparse"]
    assert json.loads((tmp_path / "efficiency.json").read_text()) == rep


def test_attention_flops_scale_with_width():
    spec = MaskSpec(TokenLayout(5), tuple(range(12, 30)))
    a = efficiency_report(ModelConfig.toy(N=5, d_t=16, n_heads=2), spec)
    b = efficiency_report(ModelConfig.toy(N=5, d_t=8, n_heads=2), spec)
    for stage in ("encoder", "decoder"):
        assert a["stages"][stage]["attention_flops_sparse"] == 2 * b["stages"][stage]["attention_flops_sparse"]


def test_layer_flops_closed_form():
    assert layer_flops(10, 30, 4, 8) == {"projections": 1280, "attention": 480, "mlp": 1280}


def test_encoder_pairs_match_matrix():
    cfg = ModelConfig.toy(N=4)
    lay = TokenLayout(4)
    spec = MaskSpec(lay, sample_masked(lay, np.ones(4, bool), 0.5, np.random.default_rng(1)))
    rep = efficiency_report(cfg, spec)
    from clearhug.mask import Stage

    enc = build_mask_matrix(spec, Stage.ENCODER)
    assert rep["stages"]["encoder"]["pair_count_sparse"] == int(enc.allow.sum())
    assert rep["stages"]["encoder"]["tokens"] == 12 + 48 - len(spec.K)
