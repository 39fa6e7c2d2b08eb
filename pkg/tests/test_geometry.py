import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_linearity_epsilon, gram_singular_values
from stplab import geometry as G
from stplab.model import ModelConfig, forward, greedy_decode, init_params
from stplab.tensor import no_grad

coords = st.floats(-10, 10, allow_nan=False)


# --- decomposition ----------------------------------------------------------


def test_decompose_example():
    d = G.decompose((0, 0), (1, 1), (2, 0))
    assert np.allclose(d.parallel, (1, 0)) and np.allclose(d.perpendicular, (0, 1))


def test_decompose_collinear():
    d = G.decompose((0, 0, 0), (1, 2, 3), (2, 4, 6))
    assert np.linalg.norm(d.perpendicular) < 1e-15


def test_decompose_degenerate_axis():
    with pytest.raises(G.DegenerateAxisError):
        G.decompose((1, 1), (2, 2), (1, 1))


def test_decompose_invariants_random_16d():
    rng = np.random.default_rng(16)
    for _ in range(50):
        hs, hr, ht = rng.normal(size=(3, 16))
        d = G.decompose(hs, hr, ht)
        v = hr - hs
        axis = ht - hs
        assert np.max(np.abs(d.parallel + d.perpendicular - v)) < 1e-10
        assert abs(d.perpendicular @ axis) < 1e-10 * np.linalg.norm(d.perpendicular) * np.linalg.norm(axis) + 1e-14
        assert abs(d.parallel @ d.parallel + d.perpendicular @ d.perpendicular - v @ v) < 1e-9


# --- local linearity --------------------------------------------------------


def test_linearity_of_line_is_zero():
    traj = np.outer(np.arange(10.0), np.ones(4)) + 3.0
    assert G.linearity_epsilon(traj, 5).epsilon_hat < 1e-12


def test_linearity_square_wave():
    traj = np.array([(k, k % 2) for k in range(8)], dtype=float)
    rep = G.linearity_epsilon(traj, 2)
    assert rep.epsilon_hat == pytest.approx(1.0, abs=1e-12)
    assert rep.tau == 2


def test_linearity_matches_brute_force():
    rng = np.random.default_rng(3)
    for tau in (2, 3, 5, 9):
        traj = rng.normal(size=(9, 3))
        assert abs(G.linearity_epsilon(traj, tau).epsilon_hat - brute_linearity_epsilon(traj, tau)) < 1e-12


def test_linearity_worst_triple_is_reported():
    rng = np.random.default_rng(4)
    traj = rng.normal(size=(7, 2))
    rep = G.linearity_epsilon(traj, 4)
    s, r, t = rep.worst
    assert s < r < t and t - s <= 4
    assert abs(np.linalg.norm(G.decompose(traj[s], traj[r], traj[t]).perpendicular) - rep.epsilon_hat) < 1e-12
    assert max(rep.per_window.values()) == rep.epsilon_hat


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (8, 3), elements=coords))
def test_linearity_monotone_in_tau(traj):
    eps = [G.linearity_epsilon(traj, tau).epsilon_hat for tau in range(2, 9)]
    assert all(a <= b for a, b in zip(eps, eps[1:]))


def test_linearity_errors():
    with pytest.raises(ValueError):
        G.linearity_epsilon(np.zeros((2, 3)), 2)
    with pytest.raises(ValueError):
        G.linearity_epsilon(np.zeros((5, 3)), 1)


# --- straightening ------------------------------------------------------------


def test_straightening_collinear():
    holds, lhs, rhs = G.straightening_check((0, 0), (1, 1), (2, 2), (0, 0), (2, 2), 1e-3)
    assert holds and lhs == 0.0


def test_straightening_rhs_arithmetic():
    # a tiny bend keeps the deficit under eps; |h_r - h_s| = 1
    hs, hr = np.zeros(2), np.array([1.0, 0.0])
    ht = np.array([2.0, 0.01])
    _, _, rhs = G.straightening_check(hs, hr, ht, hs, ht, 0.02)
    assert rhs == pytest.approx(0.2 * 1.1, abs=1e-12)


def test_straightening_hypothesis_errors():
    with pytest.raises(G.HypothesisError):
        G.straightening_check((0, 0), (1, 0), (1, 1), (0, 0), (1, 1), 0.01)
    with pytest.raises(G.HypothesisError):
        G.straightening_check((0, 0), (1, 0), (2, 0), (0, 0.5), (2, 0), 0.01)


def test_stp_deficit_matches_loss():
    from stplab.losses import IndexTriple, stp_loss
    rng = np.random.default_rng(2)
    h = rng.normal(size=(3, 5))
    assert abs(G.stp_deficit(*h) - stp_loss(h, IndexTriple(0, 1, 2)).item()) < 1e-14


def test_tube_distance():
    ref = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    assert G.tube_distance([1.2, 0.5], ref) == pytest.approx(math.hypot(0.2, 0.5))


# --- SVD ----------------------------------------------------------------------


def test_svd_diag():
    assert np.allclose(G.svd_spectrum(np.diag([3.0, 2.0])), [3, 2], atol=1e-14)


def test_svd_rank_one():
    u = np.array([2.0, 0.0, 0.0])
    v = np.array([0.6, 0.8])
    sv = G.svd_spectrum(np.outer(u, v))
    assert sv[0] == pytest.approx(2.0, abs=1e-12) and np.all(np.abs(sv[1:]) < 1e-12)


def test_svd_matches_gram_oracle_6x4():
    m = np.random.default_rng(6).normal(size=(6, 4))
    assert np.max(np.abs(G.svd_spectrum(m) - gram_singular_values(m))) < 1e-8


def test_svd_wide_matrix():
    m = np.random.default_rng(7).normal(size=(3, 7))
    assert np.max(np.abs(G.jacobi_singular_values(m) - gram_singular_values(m))) < 1e-8


def test_svd_invariances():
    rng = np.random.default_rng(8)
    m = rng.normal(size=(10, 5))
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    base = G.svd_spectrum(m)
    assert np.max(np.abs(G.svd_spectrum(m[rng.permutation(10)]) - base)) < 1e-9
    assert np.max(np.abs(G.svd_spectrum(m @ q) - base)) < 1e-9


def test_svd_normalized_rows():
    m = np.array([[3.0, 0.0], [0.0, 0.0], [0.0, 5.0]])
    assert np.allclose(G.svd_spectrum(m, normalize=True), [1.0, 1.0])
    with pytest.raises(ValueError):
        G.svd_spectrum(np.zeros((2, 2)), normalize=True)


def test_svd_nonconvergence_is_reported():
    m = np.random.default_rng(9).normal(size=(8, 6))
    with pytest.raises(G.ConvergenceError):
        G.jacobi_singular_values(m, tol=1e-10, max_sweeps=1)


# --- power law ---------------------------------------------------------------


def test_fit_power_law_exact():
    t = np.arange(1, 50.0)
    assert abs(G.fit_power_law(zip(t, np.sqrt(t))) - 0.5) < 1e-10
    assert abs(G.fit_power_law(zip(t, 3 * t)) - 1.0) < 1e-10


def test_fit_power_law_errors():
    with pytest.raises(ValueError):
        G.fit_power_law([(1, 1), (2, 2)])
    with pytest.raises(ValueError):
        G.fit_power_law([(1, 1), (2, 0), (3, 1)])


# --- rollout divergence ------------------------------------------------------

CFG = ModelConfig(vocab_size=16, d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=80)


def test_rollout_zero_when_model_reproduces_truth():
    p = init_params(CFG, 3)
    prompt = [1, 5, 6]
    cont = greedy_decode(p, CFG, prompt, 6, stop_at_eos=False)[3:]
    assert np.all(G.rollout_divergence(p, CFG, prompt, cont) == 0.0)


def test_rollout_positive_after_first_mismatch():
    p = init_params(CFG, 3)
    prompt = [1, 5, 6]
    generated = greedy_decode(p, CFG, prompt, 6, stop_at_eos=False)[3:]
    cont = list(generated)
    cont[2] = (cont[2] + 1) % 16
    series = G.rollout_divergence(p, CFG, prompt, cont)
    assert np.all(series[:2] == 0.0) and series[2] > 0.0


def test_rollout_untrained_model_long_continuation():
    p = init_params(CFG, 5)
    rng = np.random.default_rng(0)
    cont = rng.integers(5, 16, size=64).tolist()
    series = G.rollout_divergence(p, CFG, [1, 7], cont)
    assert series.shape == (64,) and np.all(np.isfinite(series))
    assert series.mean() > 0


def test_rollout_capacity():
    from stplab.model import CapacityError
    with pytest.raises(CapacityError):
        G.rollout_divergence(init_params(CFG, 0), CFG, [1] * 40, [5] * 41)


def test_diagnostics_csv(tmp_path):
    path = tmp_path / "d.csv"
    G.write_diagnostics_csv([(0, "curvature", 1, 0.5), ("dataset", "svd_normalized", 0, 1.0)], path)
    assert path.read_text().splitlines() == [
        "sequence_id,metric,position,value", "0,curvature,1,0.5", "dataset,svd_normalized,0,1.0",
    ]
