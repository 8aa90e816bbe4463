import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clearhug.mask import (
    MaskSpec,
    Policy,
    Stage,
    TokenLayout,
    Variant,
    allow_set,
    build_mask_matrix,
    decoder_allow,
    row_size_histogram,
    sample_masked,
)
from oracles import brute_allow, brute_encoder_allow

VARIANTS = [v.value for v in Variant]


def spec_from(N, masked, padding, variant):
    lay = TokenLayout(N)
    K = [lay.pos(i, j) for i, j in masked]
    return MaskSpec(lay, tuple(K), frozenset(lay.pos(i, j) for i, j in padding), Variant(variant))


def random_case(rng, N, ratio, pad_beats=0):
    lay = TokenLayout(N)
    valid = np.ones(N, dtype=bool)
    if pad_beats:
        valid[N - pad_beats:] = False
    K = sample_masked(lay, valid, ratio, rng)
    masked = {(lay.lead_of(p), lay.beat_of(p)) for p in K}
    padding = {(i, j) for i in range(12) for j in range(N) if not valid[j]}
    return masked, padding


def set_matrix(spec):
    T = spec.layout.total
    A = np.zeros((T, T), dtype=bool)
    for p in range(T):
        A[p, list(allow_set(p, spec))] = True
    return A


class TestLayout:
    def test_positions(self):
        lay = TokenLayout(15)
        assert lay.total == 192
        assert [lay.cls(i) for i in range(12)] == list(range(12))
        assert lay.pos(0, 0) == 12 and lay.pos(11, 14) == 191
        assert lay.pos(2, 3) == 12 + 2 * 15 + 3

    @pytest.mark.parametrize("N", [1, 2, 5, 15])
    def test_pos_is_bijection(self, N):
        lay = TokenLayout(N)
        got = sorted(lay.pos(i, j) for i in range(12) for j in range(N))
        assert got == list(range(12, lay.total))
        for p in got:
            assert lay.pos(lay.lead_of(p), lay.beat_of(p)) == p


class TestSpecValidation:
    def test_cls_cannot_be_masked(self):
        with pytest.raises(ValueError):
            MaskSpec(TokenLayout(2), (3,))

    def test_padding_cannot_be_masked(self):
        lay = TokenLayout(2)
        with pytest.raises(ValueError):
            MaskSpec(lay, (12,), frozenset({12}))

    def test_duplicates(self):
        with pytest.raises(ValueError):
            MaskSpec(TokenLayout(2), (12, 12))


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("N", [1, 2, 3, 5, 15])
@pytest.mark.parametrize("ratio", [0.0, 0.5, 0.8])
def test_allow_sets_match_oracle(variant, N, ratio):
    rng = np.random.default_rng(N * 100 + int(ratio * 10))
    masked, padding = random_case(rng, N, ratio)
    spec = spec_from(N, masked, padding, variant)
    expected = brute_allow(N, masked, padding, variant)
    assert np.array_equal(set_matrix(spec), expected)
    assert np.array_equal(decoder_allow(spec), expected)


@pytest.mark.parametrize("variant", VARIANTS)
def test_padding_matches_oracle(variant):
    rng = np.random.default_rng(7)
    masked, padding = random_case(rng, 5, 0.5, pad_beats=2)
    spec = spec_from(5, masked, padding, variant)
    A = decoder_allow(spec)
    assert np.array_equal(A, brute_allow(5, masked, padding, variant))
    pads = sorted(spec.invalid)
    assert not A[pads].any() and not A[:, pads].any()


@pytest.mark.parametrize("N", [1, 2, 3, 5, 15])
def test_row_size_law(N):
    rng = np.random.default_rng(N)
    masked, padding = random_case(rng, N, 0.5)
    spec = spec_from(N, masked, padding, "clear")
    sizes = build_mask_matrix(spec).row_sizes
    m = spec.masked
    assert np.all(sizes[:12] == N + 1)
    assert np.all(sizes[12:][m[12:]] == 13)
    assert np.all(sizes[12:][~m[12:]] == N + 1)


def test_pair_count_clear_vs_full():
    lay = TokenLayout(15)
    K = sample_masked(lay, np.ones(15, bool), 0.8, np.random.default_rng(0))
    assert len(K) == 144
    clear = build_mask_matrix(MaskSpec(lay, K, variant=Variant.CLEAR))
    full = build_mask_matrix(MaskSpec(lay, K, variant=Variant.FULL))
    assert clear.pair_count == 12 * 16 + 144 * 13 + 36 * 16 == 2640
    assert full.pair_count == 192 ** 2
    assert full.pair_count >= 10 * clear.pair_count
    assert row_size_histogram(clear) == {13: 144, 16: 48}


@given(st.integers(1, 6), st.floats(0, 1), st.integers(0, 2 ** 32 - 1), st.integers(0, 2))
@settings(max_examples=80, deadline=None)
def test_variant_inclusions(N, ratio, seed, pads):
    rng = np.random.default_rng(seed)
    masked, padding = random_case(rng, N, ratio, pad_beats=min(pads, N - 1))
    mats = {v: decoder_allow(spec_from(N, masked, padding, v)) for v in VARIANTS}
    clear = mats["clear"]
    for v in ("no_ic", "no_iv", "no_ic_iv"):
        assert not (mats[v] & ~clear).any()
    assert not (clear & ~mats["full"]).any()
    spec = spec_from(N, masked, padding, "clear")
    valid = spec.valid
    for v, A in mats.items():
        assert np.all(np.diag(A)[valid])


@given(st.integers(1, 6), st.floats(0, 1), st.integers(0, 2 ** 32 - 1), st.sampled_from(VARIANTS),
       st.sampled_from(["paper_literal", "consistent"]))
@settings(max_examples=80, deadline=None)
def test_encoder_matches_oracle(N, ratio, seed, variant, policy):
    rng = np.random.default_rng(seed)
    masked, padding = random_case(rng, N, ratio, pad_beats=1 if N > 2 else 0)
    spec = spec_from(N, masked, padding, variant)
    m = build_mask_matrix(spec, Stage.ENCODER, Policy(policy))
    expected, keep = brute_encoder_allow(N, masked, padding, variant, policy)
    assert list(m.positions) == keep
    assert np.array_equal(m.allow, expected)
    assert m.allow.any(axis=1).all()


def test_encoder_paper_literal_restricts_only_cls():
    lay = TokenLayout(3)
    K = (lay.pos(0, 0), lay.pos(5, 2))
    m = build_mask_matrix(MaskSpec(lay, K), Stage.ENCODER, Policy.PAPER_LITERAL)
    n_vis = len(m.positions)
    assert n_vis == 12 + 36 - 2
    assert np.all(m.row_sizes[:12] == 1 + np.array([3 - (i in (0, 5)) for i in range(12)]))
    assert np.all(m.row_sizes[12:] == n_vis)


class TestSampler:
    @given(st.integers(1, 15), st.floats(0, 1), st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_count_and_validity(self, N, ratio, seed):
        lay = TokenLayout(N)
        valid = np.ones(N, bool)
        valid[N // 2:] = seed % 2 == 0 or N == 1
        K = sample_masked(lay, valid, ratio, np.random.default_rng(seed))
        n_valid = 12 * int(valid.sum())
        assert len(K) == round(ratio * n_valid)
        assert list(K) == sorted(set(K))
        assert not set(K) & lay.invalid_positions(valid)
        assert all(k >= 12 for k in K)

    def test_half_to_even(self):
        # 12 beats * 0.125 = 1.5 rounds to 2, 12 * 0.375 = 4.5 rounds to 4
        lay = TokenLayout(1)
        rng = np.random.default_rng(0)
        assert len(sample_masked(lay, [True], 0.125, rng)) == 2
        assert len(sample_masked(lay, [True], 0.375, rng)) == 4

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            sample_masked(TokenLayout(2), [True, True], 1.5, np.random.default_rng(0))


def test_additive_form():
    m = build_mask_matrix(MaskSpec(TokenLayout(1), (12,)))
    add = m.additive()
    assert np.all(add[m.allow] == 0) and np.all(np.isneginf(add[~m.allow]))
