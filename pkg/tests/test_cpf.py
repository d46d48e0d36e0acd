import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cpfrnn import tensor as tn
from cpfrnn.cpf import (
    Affine,
    FilterError,
    OutHead,
    ParticleEnsemble,
    WeightHead,
    continuous_resample,
    ecdf_coefficients,
    ecdf_sup_distance,
    filter_sequence,
    measurement_update,
    multinomial_resample,
    normalize_log_weights,
    predict_mean,
    sample_noise,
    smoothed_ecdf,
    step_ecdf,
    step_loglik,
    stratified_uniforms,
    transition_update,
)
from cpfrnn.lstm import init_lstm, lstm_step
from cpfrnn.pipeline.kalman import bootstrap_loglik, kalman_loglik
from cpfrnn.tensor import ShapeError, Tensor, gradcheck


def const_affine(n_in, n_out, bias):
    return Affine(Tensor(np.zeros((n_out, n_in))), Tensor(np.full(n_out, float(bias))))


def ensemble(hidden, weights, cell=None):
    hidden = np.asarray(hidden, dtype=float)
    w = np.asarray(weights, dtype=float)
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    return ParticleEnsemble(Tensor(hidden), None if cell is None else Tensor(np.asarray(cell, float)),
                            Tensor(logw), Tensor(w))


def first_coord(h):
    return h.data[..., 0]


# ---------------------------------------------------------------------------
# noise and transition


def test_noise_floor_bounds_magnitude():
    head = const_affine(3, 2, -50.0)
    rng = np.random.default_rng(0)
    eps = sample_noise(head, Tensor(np.zeros(2)), Tensor(np.zeros(1)), rng).data
    zeta = np.random.default_rng(0).standard_normal(2)
    assert np.all(np.abs(eps) <= math.exp(-6) * np.abs(zeta) + 1e-18)


def test_noise_is_deterministic_under_seed():
    head = Affine.init(3, 2, np.random.default_rng(1))
    args = Tensor(np.ones(2)), Tensor(np.ones(1))
    a = sample_noise(head, *args, np.random.default_rng(5)).data
    b = sample_noise(head, *args, np.random.default_rng(5)).data
    np.testing.assert_array_equal(a, b)


def test_noise_unit_log_std_has_unit_spread():
    head = const_affine(3, 2, 0.0)
    h = Tensor(np.zeros((100_000, 2)))
    x = Tensor(np.zeros((100_000, 1)))
    eps = sample_noise(head, h, x, np.random.default_rng(2)).data
    np.testing.assert_allclose(eps.std(axis=0), 1.0, atol=0.02)


def test_noise_gradient_flows_through_log_std():
    rng = np.random.default_rng(3)
    head = Affine(Tensor(rng.normal(size=(2, 3)) * 0.3), Tensor(rng.normal(size=2) * 0.3))
    h, x = Tensor(rng.normal(size=2)), Tensor(rng.normal(size=1))

    def loss(W, b):
        return tn.sum_(sample_noise(Affine(W, b), h, x, np.random.default_rng(9)))

    assert gradcheck(loss, [head.W, head.b]).max_rel_error < 1e-6


def test_transition_k1_without_noise_is_lstm_step():
    p = init_lstm(3, 2, 0)
    rng = np.random.default_rng(0)
    h0, c0, x = rng.normal(size=(1, 3)), rng.normal(size=(1, 3)), rng.normal(size=2)
    ens = ParticleEnsemble.uniform(Tensor(h0), Tensor(c0))
    h, c = lstm_step(p, Tensor(h0[0]), Tensor(c0[0]), Tensor(x))
    quiet = transition_update(ens, x, p, None, None)
    np.testing.assert_array_equal(quiet.hidden.data[0], h.data)
    np.testing.assert_array_equal(quiet.cell.data[0], c.data)
    # at the log-std floor the hidden state moves by at most e^-6 |zeta|
    floor = transition_update(ens, x, p, const_affine(5, 3, -1e3), np.random.default_rng(1))
    zeta = np.random.default_rng(1).standard_normal((1, 3))
    np.testing.assert_allclose(floor.hidden.data - h.data, math.exp(-6) * zeta, atol=1e-15)
    np.testing.assert_array_equal(floor.cell.data[0], c.data)


def test_transition_keeps_count_and_weights():
    p = init_lstm(4, 2, 1)
    ens = ParticleEnsemble.zeros(50, 4)
    ens = normalize_log_weights(ens, Tensor(np.random.default_rng(0).normal(size=50)))
    out = transition_update(ens, np.ones(2), p, const_affine(6, 4, -1.0), np.random.default_rng(0))
    assert out.hidden.shape == (50, 4) and out.K == 50
    np.testing.assert_array_equal(out.norm_weights.data, ens.norm_weights.data)


def test_transition_rejects_bad_input_size():
    with pytest.raises(ShapeError):
        transition_update(ParticleEnsemble.zeros(3, 4), np.ones(5), init_lstm(4, 2, 1), None, None)


def test_noise_increases_particle_spread():
    p = init_lstm(3, 2, 2)
    start = np.random.default_rng(0).normal(size=(20, 3))
    ens = ParticleEnsemble.uniform(Tensor(start), Tensor(start.copy()))
    x = np.array([0.3, -0.2])

    def spread(h):
        return np.trace(np.cov(h.T))

    base = spread(transition_update(ens, x, p, None, None).hidden.data)
    noisy = np.mean([spread(transition_update(ens, x, p, const_affine(5, 3, -2.0),
                                               np.random.default_rng(s)).hidden.data)
                     for s in range(100)])
    assert noisy > base


# ---------------------------------------------------------------------------
# measurement


def test_constant_weight_head_gives_uniform_weights():
    ens = ParticleEnsemble.zeros(4, 3)
    ens = replace_hidden(ens, np.random.default_rng(0).normal(size=(4, 3)))
    head = WeightHead(const_affine(4, 32, 0.0), const_affine(32, 1, 1.5))
    out = measurement_update(ens, 0.7, head)
    np.testing.assert_allclose(out.norm_weights.data, 0.25, atol=1e-15)


def replace_hidden(ens, h):
    return ParticleEnsemble.uniform(Tensor(h), ens.cell)


def test_log_weights_zero_ln3_normalize_to_quarter_three_quarters():
    out = normalize_log_weights(ParticleEnsemble.zeros(2, 1), Tensor([0.0, math.log(3.0)]))
    np.testing.assert_allclose(out.norm_weights.data, [0.25, 0.75], atol=1e-15)


def test_random_heads_normalize():
    rng = np.random.default_rng(1)
    for s in range(10):
        head = WeightHead(Affine.init(6, 32, rng), Affine.init(32, 1, rng, scale=20.0))
        ens = replace_hidden(ParticleEnsemble.zeros(7, 5, (3,)), rng.normal(size=(3, 7, 5)))
        out = measurement_update(ens, rng.normal(size=3), head)
        np.testing.assert_allclose(out.norm_weights.data.sum(-1), 1.0, atol=1e-10)
        assert np.all(np.abs(out.log_weights.data) <= 30.0)


def test_measurement_rejects_nonfinite_observation():
    head = WeightHead(const_affine(2, 32, 0.0), const_affine(32, 1, 0.0))
    with pytest.raises(ValueError):
        measurement_update(ParticleEnsemble.zeros(2, 1), np.nan, head)


@pytest.mark.parametrize("logw,expected", [([0.0, 0.0, 0.0], 0.0), ([2.5], 2.5),
                                           ([0.0, math.log(3.0)], math.log(2.0))])
def test_step_loglik_examples(logw, expected):
    assert step_loglik(np.array(logw)).item() == pytest.approx(expected, abs=1e-15)


# ---------------------------------------------------------------------------
# multinomial resampling


def test_multinomial_degenerate_weights_copy_one_particle():
    h = np.arange(12.0).reshape(4, 3)
    out = multinomial_resample(ensemble(h, [1.0, 0, 0, 0]), np.random.default_rng(0))
    np.testing.assert_array_equal(out.hidden.data, np.tile(h[0], (4, 1)))
    np.testing.assert_allclose(out.norm_weights.data, 0.25)


def test_multinomial_counts_match_multinomial_law():
    K, trials = 5, 10_000
    rng = np.random.default_rng(11)
    ens = ensemble(np.arange(K, dtype=float)[:, None], np.full(K, 1.0 / K))
    counts = np.zeros(K)
    for _ in range(trials):
        idx = multinomial_resample(ens, rng).hidden.data[:, 0].astype(int)
        counts += np.bincount(idx, minlength=K)
    # total draws are K * trials i.i.d. categorical(1/K) selections
    p = stats.chisquare(counts).pvalue
    assert p > 0.01


def test_multinomial_gradient_flows_to_selected_particles():
    h = Tensor(np.random.default_rng(0).normal(size=(3, 2)))
    w = np.array([0.2, 0.3, 0.5])
    u = np.array([0.1, 0.45, 0.9])
    f = lambda t: tn.sum_(multinomial_resample(ensemble_t(t, w), uniforms=u).hidden)  # noqa: E731
    with tn.Graph():
        h.requires_grad = True
        g = tn.backward(f(h))
    np.testing.assert_array_equal(g[h], [[1, 1], [1, 1], [1, 1]])


def ensemble_t(h, w):
    return ParticleEnsemble(h, None, Tensor(np.log(w)), Tensor(w))


# ---------------------------------------------------------------------------
# smoothed ECDF


def test_ecdf_coefficients_hand_example():
    np.testing.assert_allclose(ecdf_coefficients(np.array([0.2, 0.5, 0.3])).data,
                               [0.1, 0.35, 0.4, 0.15], atol=1e-15)


def test_ecdf_coefficients_uniform():
    K = 6
    lam = ecdf_coefficients(np.full(K, 1.0 / K)).data
    expected = np.r_[1 / (2 * K), np.full(K - 1, 1.0 / K), 1 / (2 * K)]
    np.testing.assert_allclose(lam, expected, atol=1e-15)


def test_ecdf_coefficients_reject_empty():
    with pytest.raises(ValueError):
        ecdf_coefficients(np.zeros(0))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=50))
def test_lambda_mass_is_conserved(raw):
    w = np.array(raw) / np.sum(raw)
    assert abs(ecdf_coefficients(w).data.sum() - 1.0) <= 1e-12


@pytest.mark.parametrize("w,bound", [([0.5, 0.5], 0.25), (np.full(100, 0.01), 0.005),
                                     ([1.0] + [0.0] * 9, 0.5)])
def test_sup_distance_examples(w, bound):
    assert ecdf_sup_distance(w) == pytest.approx(bound, abs=1e-15)


def test_sup_distance_bound_holds_empirically():
    rng = np.random.default_rng(0)
    for _ in range(20):
        K = int(rng.integers(2, 101))
        w = rng.dirichlet(np.full(K, 0.5))
        pts = rng.normal(size=K)
        grid = np.linspace(pts.min() - 0.1, pts.max() + 0.1, 20_000)
        gap = np.max(np.abs(step_ecdf(pts, w, grid) - smoothed_ecdf(pts, w, grid)))
        assert gap <= ecdf_sup_distance(w) + 1e-12


def test_smoothed_ecdf_is_monotone_from_zero_to_one():
    rng = np.random.default_rng(3)
    pts, w = rng.normal(size=30), rng.dirichlet(np.ones(30))
    grid = np.linspace(-5, 5, 5000)
    f = smoothed_ecdf(pts, w, grid)
    assert np.all(np.diff(f) >= -1e-15)
    assert f[0] == 0.0 and f[-1] == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# continuous resampling


A, B = np.array([[1.0, -1.0]]), np.array([[3.0, 5.0]])


def two_particles():
    return ensemble(np.vstack([A, B]), [0.5, 0.5], cell=np.vstack([A, B]) * 10)


def test_continuous_first_atom_returns_particle_exactly():
    out = continuous_resample(two_particles(), first_coord, np.array([0.1, 0.1]))
    np.testing.assert_array_equal(out.hidden.data[0], A[0])
    np.testing.assert_array_equal(out.cell.data[0], 10 * A[0])


def test_continuous_midpoint_interpolates_hidden_and_cell():
    out = continuous_resample(two_particles(), first_coord, np.array([0.5, 0.95]))
    np.testing.assert_allclose(out.hidden.data[0], 0.5 * (A[0] + B[0]), atol=1e-15)
    np.testing.assert_allclose(out.cell.data[0], 5.0 * (A[0] + B[0]), atol=1e-14)
    np.testing.assert_array_equal(out.hidden.data[1], B[0])
    np.testing.assert_allclose(out.norm_weights.data, 0.5)


def test_continuous_sorts_by_projection():
    # particles listed in descending projection order
    ens = ensemble(np.vstack([B, A]), [0.5, 0.5])
    out = continuous_resample(ens, first_coord, np.array([0.1, 0.3]))
    np.testing.assert_array_equal(out.hidden.data[0], A[0])
    # gamma = (0.3 - 0.25) / 0.5 from A towards B
    np.testing.assert_allclose(out.hidden.data[1], 0.9 * A[0] + 0.1 * B[0], atol=1e-15)


def test_continuous_degenerate_weight_returns_that_particle():
    h = np.array([[0.0], [1.0], [2.0], [3.0]])
    ens = ensemble(h, [0.0, 0.0, 1.0, 0.0])
    out = continuous_resample(ens, first_coord, stratified_uniforms((4,), np.random.default_rng(0)))
    # away from the two half-width intervals next to particle 2 the draw is that particle
    assert np.all(np.abs(out.hidden.data[:, 0] - 2.0) <= 1.0)
    ens = ensemble(h[2:3], [1.0])
    out = continuous_resample(ens, first_coord, np.array([0.3]))
    np.testing.assert_array_equal(out.hidden.data, h[2:3])


def test_continuous_zero_width_interval_returns_left_particle():
    ens = ensemble(np.array([[0.0], [1.0], [2.0], [3.0]]), [0.5, 0.0, 0.0, 0.5])
    lam = ecdf_coefficients(ens.norm_weights.data).data
    np.testing.assert_allclose(lam, [0.25, 0.25, 0.0, 0.25, 0.25])
    # 0.5 = C_1 = C_2 exactly: interval 1 ends at particle 1 and the empty interval 2 is skipped
    out = continuous_resample(ens, first_coord, np.full(4, 0.5))
    np.testing.assert_allclose(out.hidden.data[:, 0], 1.0, atol=1e-15)


def test_continuous_rejects_bad_inputs():
    with pytest.raises(ValueError):
        continuous_resample(two_particles(), first_coord, np.array([0.0, 0.5]))
    ens = ensemble(np.array([[np.nan], [1.0]]), [0.5, 0.5])
    with pytest.raises(ValueError):
        continuous_resample(ens, first_coord, np.array([0.2, 0.6]))


def test_continuous_resample_gradcheck():
    rng = np.random.default_rng(4)
    h = Tensor(rng.normal(size=(5, 3)))
    c = Tensor(rng.normal(size=(5, 3)))
    logits = Tensor(rng.normal(size=5))
    head = OutHead(Affine(Tensor(rng.normal(size=(1, 3))), Tensor(np.zeros(1))))
    u = stratified_uniforms((5,), rng)
    w = rng.normal(size=3)

    def loss(h, c, logits):
        ens = ParticleEnsemble(h, c, logits, tn.softmax(logits, axis=-1))
        out = continuous_resample(ens, head, u)
        return tn.sum_(out.hidden * w) + tn.sum_(tn.square(out.cell))

    assert gradcheck(loss, [h, c, logits]).max_rel_error < 1e-6


def test_continuity_in_weights_vs_multinomial_jump():
    h = np.array([[0.0], [1.0], [2.5], [4.0]])
    w0 = np.array([0.1, 0.4, 0.3, 0.2])
    u = np.array([0.12, 0.37, 0.55, 0.9])
    direction = np.array([1.0, -1.0, 0.5, -0.5])
    eps = np.geomspace(1e-2, 1e-9, 40)

    def moved(resample, d):
        w = w0 + d * direction
        w = w / w.sum()
        return resample(ensemble(h, w)).hidden.data

    cont = lambda e: continuous_resample(e, first_coord, u)  # noqa: E731
    multi = lambda e: multinomial_resample(e, uniforms=u)  # noqa: E731
    base_c, base_m = cont(ensemble(h, w0)).hidden.data, multi(ensemble(h, w0)).hidden.data
    ratios = [np.max(np.abs(moved(cont, d) - base_c)) / d for d in eps]
    assert max(ratios) < 100.0
    # the multinomial draw index flips for some perturbation and stays a full particle gap
    w_edge = np.cumsum(w0)
    u_edge = u.copy()
    u_edge[1] = w_edge[0] + 1e-12  # just above the first step
    jumps = []
    for d in eps:
        w = w0 + d * np.array([1.0, -1.0, 0, 0])
        w = w / w.sum()
        a = multinomial_resample(ensemble(h, w0), uniforms=u_edge).hidden.data
        b = multinomial_resample(ensemble(h, w), uniforms=u_edge).hidden.data
        jumps.append(np.max(np.abs(a - b)))
    assert max(jumps) >= 1.0
    cont_jumps = []
    for d in eps:
        w = w0 + d * np.array([1.0, -1.0, 0, 0])
        w = w / w.sum()
        a = continuous_resample(ensemble(h, w0), first_coord, u_edge).hidden.data
        b = continuous_resample(ensemble(h, w), first_coord, u_edge).hidden.data
        cont_jumps.append(np.max(np.abs(a - b)) / d)
    assert max(cont_jumps) < 100.0
    assert base_m.shape == base_c.shape


def test_continuous_resampling_consistency():
    # two-component Gaussian mixture: E[g] under resampled particles approaches sum_k pi_k g(h_k)
    def g(x):
        return np.sin(x) + 0.1 * x * x

    errors = []
    for K in (20, 80, 320):
        errs = []
        for s in range(40):
            rng = np.random.default_rng(1000 * K + s)
            pts = np.where(rng.random(K) < 0.3, rng.normal(-2, 0.5, K), rng.normal(1.5, 0.8, K))
            w = rng.dirichlet(np.full(K, 2.0))
            target = np.sum(w * g(pts))
            out = continuous_resample(ensemble(pts[:, None], w), first_coord,
                                      stratified_uniforms((K,), rng))
            errs.append(abs(np.mean(g(out.hidden.data[:, 0])) - target))
        errors.append(np.mean(errs))
    assert errors[2] < errors[1] < errors[0]
    assert errors[2] < 0.02


def test_stratified_uniforms_fixed_v():
    u = stratified_uniforms((4,), v=np.full(4, 0.5))
    np.testing.assert_allclose(u, [0.125, 0.375, 0.625, 0.875])


# ---------------------------------------------------------------------------
# prediction and generic filtering


def test_predict_mean_examples():
    head = OutHead(Affine(Tensor([[1.0]]), Tensor([0.0])))
    assert predict_mean(ensemble([[0.0], [2.0]], [0.5, 0.5]), head).item() == pytest.approx(1.0)
    zero = OutHead(Affine(Tensor([[0.0, 0.0]]), Tensor([0.0])))
    assert predict_mean(ensemble([[1.0, 2.0], [3.0, 4.0]], [0.5, 0.5]), zero).item() == 0.0
    h = np.array([[0.3, -0.7]] * 3)
    head2 = OutHead(Affine(Tensor([[2.0, 1.0]]), Tensor([0.5])))
    assert predict_mean(ensemble(h, [1 / 3] * 3), head2).item() == pytest.approx(0.5 + 0.6 - 0.7)


def test_filter_sequence_single_particle_is_the_density():
    def transition(ens, t, rng):
        return ParticleEnsemble.uniform(Tensor(np.array([[0.4]])))

    def log_density(hidden, y):
        return stats.norm.logpdf(y, loc=hidden.data[:, 0], scale=0.5)

    res = filter_sequence(transition, log_density, lambda e, r: e, ParticleEnsemble.zeros(1, 1),
                          [1.1], np.random.default_rng(0))
    assert res.loglik == pytest.approx(stats.norm.logpdf(1.1, 0.4, 0.5), abs=1e-12)
    assert len(res.ensembles) == 1


def test_filter_sequence_reports_step_index():
    def transition(ens, t, rng):
        if t == 2:
            raise RuntimeError("boom")
        return ens

    with pytest.raises(FilterError, match="step 2"):
        filter_sequence(transition, lambda h, y: np.zeros(1), lambda e, r: e,
                        ParticleEnsemble.zeros(1, 1), [0.0, 0.0, 0.0], np.random.default_rng(0))


def test_kalman_oracle_single_sequence():
    from cpfrnn.pipeline.synth import synth_generate

    ys = synth_generate("linear-gaussian", 30, {}, seed=3).target
    exact = kalman_loglik(0.9, 0.5, 0.5, ys)
    for resampler in ("multinomial", "continuous"):
        est = bootstrap_loglik(0.9, 0.5, 0.5, ys, 500, np.random.default_rng(1), resampler).loglik
        assert abs(est - exact) / len(ys) < 0.05


def test_resamplers_agree_within_monte_carlo_error():
    from cpfrnn.pipeline.synth import synth_generate

    ys = synth_generate("linear-gaussian", 20, {}, seed=5).target
    diffs = [bootstrap_loglik(0.9, 0.5, 0.5, ys, 100, np.random.default_rng(s), "multinomial").loglik
             - bootstrap_loglik(0.9, 0.5, 0.5, ys, 100, np.random.default_rng(s + 500), "continuous").loglik
             for s in range(50)]
    diffs = np.array(diffs)
    # paired z-test of zero mean difference at a generous level
    z = diffs.mean() / (diffs.std(ddof=1) / np.sqrt(len(diffs)))
    assert abs(z) < 3.5
