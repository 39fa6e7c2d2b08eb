import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cases import VARIANT_CASES
from oracles import all_triples, cosine_loop, cross_entropy_loop
from stplab import losses as L
from stplab.data import Marks
from stplab.tensor import Tensor, finite_difference_check

coords = st.floats(-10, 10, allow_nan=False)


def _stp(points, triple=(0, 1, 2)):
    return L.stp_loss(np.asarray(points, float), L.IndexTriple(*triple)).item()


# --- NTP --------------------------------------------------------------------


def test_ntp_uniform_logits():
    loss = L.ntp_loss(Tensor(np.zeros((3, 4))), [0, 1, 3], [1, 1, 1]).item()
    assert loss == pytest.approx(math.log(4), abs=1e-15)


def test_ntp_confident_correct():
    logits = np.zeros((1, 5))
    logits[0, 2] = 100.0
    assert L.ntp_loss(Tensor(logits), [2], [1]).item() < 1e-40


def test_ntp_matches_loop_oracle():
    logits = np.array([[0.3, -1.2, 2.0, 0.1], [1.5, 0.2, -0.7, 0.9]])
    got = L.ntp_loss(Tensor(logits), [2, 0], [1, 1]).item()
    assert abs(got - cross_entropy_loop(logits, [2, 0], [1, 1])) < 1e-12


def test_ntp_mask_drops_positions():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 5, 7))
    targets = rng.integers(0, 7, size=(2, 5))
    mask = rng.random((2, 5)) < 0.6
    mask[0, 0] = True
    got = L.ntp_loss(Tensor(logits), targets, mask).item()
    want = cross_entropy_loop(logits.reshape(-1, 7), targets.ravel(), mask.ravel())
    assert abs(got - want) < 1e-12


def test_ntp_all_masked_is_error():
    with pytest.raises(L.LossInputError):
        L.ntp_loss(Tensor(np.zeros((2, 3))), [0, 1], [0, 0])


# --- STP --------------------------------------------------------------------


def test_stp_collinear_orthogonal_antiparallel():
    assert abs(_stp([(0, 0), (1, 1), (2, 2)])) < 1e-9
    assert abs(_stp([(0, 0), (1, 0), (1, 1)]) - 1.0) < 1e-9
    assert abs(_stp([(0, 0), (1, 0), (0, 0)]) - 2.0) < 1e-9


def test_stp_45_degrees():
    assert abs(_stp([(0, 0), (1, 0), (2, 1)]) - (1 - 1 / math.sqrt(2))) < 1e-12


def test_stp_matches_loop_cosine():
    rng = np.random.default_rng(4)
    h = rng.normal(size=(6, 5))
    got = _stp(h, (1, 3, 5))
    assert abs(got - (1 - cosine_loop(h[5] - h[3], h[3] - h[1]))) < 1e-12


def test_stp_skip_form():
    rng = np.random.default_rng(5)
    h = rng.normal(size=(7, 3))
    got = L.stp_loss(h, L.IndexTriple(0, 2, 6, r_skip=4)).item()
    assert abs(got - (1 - cosine_loop(h[6] - h[4], h[2] - h[0]))) < 1e-12


def test_stp_zero_vector_is_guarded():
    assert math.isfinite(_stp([(1, 1), (1, 1), (2, 2)]))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (5, 4), elements=coords))
def test_stp_range(h):
    v = _stp(h, (0, 2, 4))
    assert -1e-12 <= v <= 2 + 1e-6


def test_stp_translation_and_scale_invariance():
    rng = np.random.default_rng(12)
    for _ in range(100):
        h = rng.normal(size=(8, 6))
        tr = L.sample_triple(rng, 8)
        base = L.stp_loss(h, tr).item()
        shift = L.stp_loss(h + rng.normal(size=6), tr).item()
        scale = L.stp_loss(h * rng.uniform(0.1, 10.0), tr).item()
        assert abs(base - shift) < 1e-10 and abs(base - scale) < 1e-10


def test_stp_batch_is_mean_of_rows():
    rng = np.random.default_rng(3)
    h = rng.normal(size=(3, 6, 4))
    trs = [L.sample_triple(rng, 6) for _ in range(3)]
    batch = L.stp_loss(h, trs).item()
    rows = [L.stp_loss(h[i], trs[i]).item() for i in range(3)]
    assert abs(batch - np.mean(rows)) < 1e-14


def test_triple_validation():
    with pytest.raises(L.LossInputError):
        L.IndexTriple(2, 1, 3).validate(5)
    with pytest.raises(L.LossInputError):
        L.IndexTriple(0, 1, 5).validate(5)
    with pytest.raises(L.LossInputError):
        L.IndexTriple(0, 1, 4, r_skip=4).validate(5)


# --- sampling ---------------------------------------------------------------


@pytest.mark.parametrize("strategy", ["random", "zero"])
def test_sample_forced_length_three(strategy):
    assert L.sample_triple(np.random.default_rng(0), 3, strategy) == L.IndexTriple(0, 1, 2)


def test_sample_two_view_from_marks():
    tr = L.sample_triple(np.random.default_rng(0), 10, "two_view", Marks(0, 4, 9))
    assert (tr.s, tr.r, tr.t) == (0, 4, 9)


def test_sample_two_view_needs_marks():
    with pytest.raises(L.LossInputError):
        L.sample_triple(np.random.default_rng(0), 10, "two_view")


def test_sample_too_short():
    with pytest.raises(L.LossInputError):
        L.sample_triple(np.random.default_rng(0), 2)


def test_sample_random_is_uniform():
    n, draws = 10, 100_000
    rng = np.random.default_rng(82)
    counts = Counter((tr.s, tr.r, tr.t) for tr in (L.sample_triple(rng, n) for _ in range(draws)))
    valid = all_triples(n)
    assert set(counts) == set(valid)
    p = 1 / len(valid)
    sigma = math.sqrt(draws * p * (1 - p))
    assert max(abs(counts[v] - draws * p) for v in valid) < 3 * sigma


def test_sample_zero_starts_at_zero():
    rng = np.random.default_rng(1)
    for _ in range(200):
        tr = L.sample_triple(rng, 9, "zero")
        assert tr.s == 0 and 0 < tr.r < tr.t < 9


def test_sample_respects_start():
    rng = np.random.default_rng(2)
    for _ in range(200):
        assert L.sample_triple(rng, 12, "random", start=4).s >= 4


# --- variants ---------------------------------------------------------------


def test_curvature_collinear_is_zero():
    h = np.outer(np.arange(6.0), [1.0, 2.0, -1.0])
    assert abs(L.curvature_loss(h).item()) < 1e-6


def test_curvature_right_angle_zigzag():
    h = np.array([(0, 0), (1, 0), (1, 1), (2, 1), (2, 2), (3, 2)], float)
    assert abs(L.curvature_loss(h).item() - math.pi / 2) < 1e-12


def test_curvature_signed_equals_curvature():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(2, 7, 4))
    a = L.aux_loss(L.AuxLossSpec(L.Variant.CURVATURE), h, []).item()
    b = L.aux_loss(L.AuxLossSpec(L.Variant.CURVATURE_SIGNED), h, []).item()
    assert a == b


def test_curvature_respects_lengths():
    rng = np.random.default_rng(1)
    h = rng.normal(size=(1, 8, 3))
    short = L.curvature_loss(h, [5]).item()
    assert abs(short - L.curvature_loss(h[:, :5]).item()) < 1e-14


def test_pred_identity_projector_operand_order():
    rng = np.random.default_rng(6)
    h = rng.normal(size=(5, 4))
    tr = L.IndexTriple(0, 2, 4)
    spec = L.AuxLossSpec(L.Variant.STP_PRED, projector=Tensor(np.eye(4)))
    got = L.aux_loss(spec, h, tr).item()
    assert abs(got - (1 - cosine_loop(h[2] - h[0], h[4] - h[2]))) < 1e-12
    spec_ts = L.AuxLossSpec(L.Variant.STP_PRED, projector=Tensor(np.eye(4)), pred_target="ts")
    got_ts = L.aux_loss(spec_ts, h, tr).item()
    assert abs(got_ts - (1 - cosine_loop(h[2] - h[0], h[4] - h[0]))) < 1e-12


def test_two_view_mean_uses_inclusive_spans():
    rng = np.random.default_rng(7)
    h = rng.normal(size=(8, 3))
    tr = L.IndexTriple(1, 3, 6)
    got = L.aux_loss(L.AuxLossSpec(L.Variant.TWO_VIEW_MEAN), h, tr).item()
    want = 1 - cosine_loop(h[1:4].mean(0), h[3:7].mean(0))
    assert abs(got - want) < 1e-12


def test_mask_variants_use_masked_trajectory():
    rng = np.random.default_rng(8)
    h, g = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    tr = L.IndexTriple(0, 2, 5)
    mask = L.aux_loss(L.AuxLossSpec(L.Variant.MASK), h, tr, masked_hidden=g).item()
    full = L.aux_loss(L.AuxLossSpec(L.Variant.MASK_FULL), h, tr, masked_hidden=g).item()
    assert abs(mask - (1 - cosine_loop(h[2] - h[0], g[5]))) < 1e-12
    assert abs(full - (1 - cosine_loop(h[5], g[5]))) < 1e-12
    with pytest.raises(L.LossInputError):
        L.aux_loss(L.AuxLossSpec(L.Variant.MASK), h, tr)


def test_masked_tokens_replaces_span():
    ids = np.arange(16).reshape(2, 8)
    out = L.masked_tokens(ids, [L.IndexTriple(1, 3, 5), L.IndexTriple(0, 1, 7)], 3)
    assert out[0].tolist() == [0, 3, 3, 3, 4, 5, 6, 7]
    assert out[1].tolist() == [3, 3, 10, 11, 12, 13, 14, 15]
    assert ids[0, 1] == 1


def test_stp_family_dispatch_matches_stp_loss():
    rng = np.random.default_rng(9)
    h = rng.normal(size=(2, 6, 3))
    trs = [L.IndexTriple(0, 2, 5), L.IndexTriple(1, 3, 4)]
    want = L.stp_loss(h, trs).item()
    for v in (L.Variant.STP, L.Variant.STP_ZERO, L.Variant.TWO_VIEW, L.Variant.TWO_VIEW_WARMUP):
        assert L.aux_loss(L.AuxLossSpec(v), h, trs).item() == want


def test_none_variant_returns_none():
    assert L.aux_loss(L.AuxLossSpec(L.Variant.NONE, 0.0), np.zeros((4, 2)), []) is None


def test_projector_iff_pred():
    with pytest.raises(L.LossInputError):
        L.AuxLossSpec(L.Variant.STP_PRED)
    with pytest.raises(L.LossInputError):
        L.AuxLossSpec(L.Variant.STP, projector=Tensor(np.eye(2)))
    spec = L.make_aux_spec("Mask_Pred", 0.1, 6, seed=3)
    assert spec.projector.shape == (6, 6) and spec.projector.requires_grad
    assert abs(spec.projector.values.std() - 0.02) < 0.01


def test_lambda_validation():
    with pytest.raises(L.LossInputError):
        L.AuxLossSpec(L.Variant.STP, lam=float("nan"))


def test_strategy_mapping():
    assert L.AuxLossSpec(L.Variant.STP).strategy == "random"
    assert L.AuxLossSpec(L.Variant.STP_ZERO).strategy == "zero"
    assert L.AuxLossSpec(L.Variant.TWO_VIEW_MEAN).strategy == "two_view"


@pytest.mark.parametrize("variant", sorted(VARIANT_CASES))
def test_variant_gradients(variant):
    worst = 0.0
    for seed in range(10):
        f, params = VARIANT_CASES[variant](np.random.default_rng(seed))
        for p in params:
            worst = max(worst, finite_difference_check(f, p, 1e-5))
    assert worst < 1e-4


# --- schedule and combination -----------------------------------------------


def test_lambda_schedule():
    flat = L.AuxLossSpec(L.Variant.STP, lam=0.3)
    warm = L.AuxLossSpec(L.Variant.TWO_VIEW_WARMUP, lam=0.3)
    assert L.lambda_at(flat, 0, 100) == 0.3 and L.lambda_at(flat, 77, 100) == 0.3
    assert L.lambda_at(warm, 0, 100) == 0.0
    assert L.lambda_at(warm, 100, 100) == 0.3
    assert L.lambda_at(warm, 25, 100) == pytest.approx(0.075, abs=1e-15)


def test_combined_loss():
    ntp, aux = Tensor(1.0), Tensor(0.5)
    assert L.combined_loss(ntp, aux, 0.02).item() == pytest.approx(1.01, abs=1e-15)
    assert L.combined_loss(ntp, aux, 0.0).item() == 1.0
    assert L.combined_loss(ntp, Tensor(0.0), 0.3).item() == 1.0
    assert L.combined_loss(ntp, None, 0.3) is ntp
