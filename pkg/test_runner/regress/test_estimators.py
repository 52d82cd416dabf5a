import logging

import numpy as np
import pytest

from kronsbl.channel_sim import (
    NOISELESS_SIGMA2,
    ChannelScenario,
    build_dictionary,
    dft_pilot,
    dictionary_transform,
)
from kronsbl.errors import ParameterError, ShapeError
from kronsbl.estimators import (
    ESTIMATORS,
    WEIGHT_FLOOR,
    ConvergencePolicy,
    ESblHyper,
    PosteriorStats,
    ScaleState,
    SblHyper,
    WeightState,
    esbl_posterior_stats,
    esbl_update_weights_scales,
    eval_esbl_marginal_objective,
    eval_mesbl_joint_objective,
    eval_sbl_marginal_objective,
    mesbl_update_tau,
    mesbl_update_u,
    mesbl_update_w,
    relative_change,
    run_esbl,
    run_estimator,
    run_least_squares,
    run_mesbl,
    run_sbl,
    sbl_posterior_stats,
    sbl_update_weights,
)
from kronsbl.numerics import DictionaryKron, GramStructure, apply_dictionary
from kronsbl.oracles import dense_logdet_quadform, dense_posterior, random_complex, random_problem
from kronsbl.selftest import nondecreasing

ALL_STRUCTURES = list(GramStructure)
TRACKED = ConvergencePolicy(tol=1e-10, max_iter=60, track_objective=True)


def test_hyper_validation():
    assert not SblHyper().prior_active
    assert SblHyper(alpha=0.5).prior_active
    with pytest.raises(ParameterError):
        SblHyper(alpha=-1.0)
    with pytest.raises(ParameterError, match="nu"):
        ESblHyper(nu=0.0)
    with pytest.raises(ParameterError):
        ESblHyper(theta=-0.1)
    with pytest.raises(ParameterError, match="tol"):
        ConvergencePolicy(tol=0.0)
    with pytest.raises(ParameterError, match="max_iter"):
        ConvergencePolicy(max_iter=0)


def test_states():
    w = WeightState(np.array([1.0, 2.0]))
    assert len(w) == 2
    assert np.array_equal(np.asarray(w), [1.0, 2.0])
    assert not w.w.flags.writeable

    floored = ScaleState.floored(np.array([0.0, -1.0, 3.0]))
    assert np.array_equal(floored.tau, [WEIGHT_FLOOR, WEIGHT_FLOOR, 3.0])

    with pytest.raises(ParameterError):
        WeightState(np.array([1.0, 0.0]))
    with pytest.raises(ParameterError):
        WeightState(np.array([1.0, np.inf]))
    with pytest.raises(ShapeError):
        WeightState(np.ones((2, 2)))


def test_sbl_posterior_matches_dense(make_dictionary, rng):
    for structure in ALL_STRUCTURES:
        d = make_dictionary(structure)
        weights, sigma2, z = random_problem(rng, d)
        stats = sbl_posterior_stats(d, WeightState(weights), sigma2, z)
        mean, cov_diag = dense_posterior(d, weights, sigma2, z)
        assert np.allclose(stats.mean, mean, rtol=1e-10, atol=0)
        assert np.allclose(stats.cov_diag, cov_diag, rtol=1e-10, atol=0)


def test_esbl_posterior_uses_effective_weights(make_dictionary, rng):
    d = make_dictionary(GramStructure.DENSE)
    weights, sigma2, z = random_problem(rng, d)
    scales = rng.uniform(0.5, 2.0, size=d.num_cols)
    stats = esbl_posterior_stats(d, WeightState(weights), ScaleState(scales), sigma2, z)
    mean, cov_diag = dense_posterior(d, weights * scales, sigma2, z)
    assert np.allclose(stats.mean, mean, rtol=1e-10, atol=0)
    assert np.allclose(stats.cov_diag, cov_diag, rtol=1e-10, atol=0)


def test_sbl_update_weights():
    stats = PosteriorStats(np.array([1.0 + 1.0j, 0.0]), np.array([0.5, 1e-20]))
    assert np.allclose(sbl_update_weights(stats).w, [2.5, WEIGHT_FLOOR])
    with_prior = sbl_update_weights(stats, SblHyper(alpha=1.0, beta=0.5))
    assert np.allclose(with_prior.w, [3.0 / 3.0, (1e-20 + 0.5) / 3.0])


def test_esbl_update_weights_scales():
    stats = PosteriorStats(np.array([1.0]), np.array([0.5]))
    hyper = ESblHyper(nu=1.0, theta=0.01, phi=0.01)
    w, tau = esbl_update_weights_scales(stats, WeightState.ones(1), ScaleState.ones(1), hyper)
    # r = 1.5; τ uses the new w
    assert w.w[0] == pytest.approx((0.5 + 1.5) / 2.5)
    assert tau.tau[0] == pytest.approx((0.01 + 1.5 / 0.8) / 2.01)


def test_mesbl_coordinate_updates():
    u = np.array([2.0, 0.0])
    hyper = ESblHyper(nu=2.0, theta=0.0, phi=0.5)
    w = mesbl_update_w(u, ScaleState(np.array([2.0, 1.0])), hyper)
    assert np.allclose(w.w, [(1.0 + 2.0) / 3.0, 1.0 / 3.0])
    tau = mesbl_update_tau(u, w, hyper)
    assert np.allclose(tau.tau, [(0.5 + 4.0 / 1.0) / 2.0, 0.25])


def test_mesbl_update_u_is_ridge_solution(make_dictionary, rng):
    d = make_dictionary(GramStructure.BLOCK_DIAGONAL)
    weights, sigma2, z = random_problem(rng, d)
    scales = rng.uniform(0.5, 2.0, size=d.num_cols)
    u = mesbl_update_u(d, WeightState(weights), ScaleState(scales), sigma2, z)
    A = d.to_dense()
    lhs = A.conj().T @ A / sigma2 + np.diag(1.0 / (weights * scales))
    assert np.allclose(u, np.linalg.solve(lhs, A.conj().T @ z / sigma2), rtol=1e-10, atol=1e-12)


def test_sbl_objective_matches_dense(make_dictionary, rng):
    d = make_dictionary(GramStructure.DIAGONAL_BLOCKS)
    weights, sigma2, z = random_problem(rng, d)
    logdet, quad = dense_logdet_quadform(d, weights, sigma2, z)
    value = eval_sbl_marginal_objective(d, WeightState(weights), sigma2, z)
    assert value == pytest.approx(-logdet - quad, rel=1e-9)

    hyper = SblHyper(alpha=2.0, beta=1.0)
    prior = np.sum(-3.0 * np.log(weights) - 1.0 / weights)
    with_prior = eval_sbl_marginal_objective(d, WeightState(weights), sigma2, z, hyper)
    assert with_prior == pytest.approx(-logdet - quad + prior, rel=1e-9)


def assert_objectives_nondecreasing(d, sigma2, z):
    for report in (
        run_sbl(d, z, sigma2, policy=TRACKED),
        run_sbl(d, z, sigma2, SblHyper(alpha=1.0, beta=0.2), TRACKED),
        run_esbl(d, z, sigma2, policy=TRACKED),
        run_mesbl(d, z, sigma2, policy=TRACKED),
    ):
        assert len(report.objective_trace) == report.iterations
        assert nondecreasing(report.objective_trace), (
            report.estimator,
            np.diff(report.objective_trace).min(),
        )


@pytest.mark.parametrize("structure", ALL_STRUCTURES, ids=lambda s: s.value)
def test_objectives_never_decrease(structure, make_dictionary, rng):
    for _ in range(3):
        d = make_dictionary(structure)
        _, sigma2, z = random_problem(rng, d)
        assert_objectives_nondecreasing(d, sigma2, z)


@pytest.mark.slow
def test_objectives_never_decrease_many_instances(make_dictionary, rng):
    # 25 per structure class, 100 per estimator
    for structure in ALL_STRUCTURES:
        for _ in range(25):
            d = make_dictionary(structure)
            _, sigma2, z = random_problem(rng, d)
            assert_objectives_nondecreasing(d, sigma2, z)


def test_mesbl_each_coordinate_step_ascends(make_dictionary, rng):
    d = make_dictionary(GramStructure.DENSE)
    _, sigma2, z = random_problem(rng, d)
    hyper = ESblHyper()
    w, tau = WeightState.ones(d.num_cols), ScaleState.ones(d.num_cols)
    u = np.zeros(d.num_cols, dtype=complex)
    previous = eval_mesbl_joint_objective(d, u, w, tau, sigma2, z, hyper)
    for _ in range(5):
        u = mesbl_update_u(d, w, tau, sigma2, z)
        after_u = eval_mesbl_joint_objective(d, u, w, tau, sigma2, z, hyper)
        w = mesbl_update_w(u, tau, hyper)
        after_w = eval_mesbl_joint_objective(d, u, w, tau, sigma2, z, hyper)
        tau = mesbl_update_tau(u, w, hyper)
        after_tau = eval_mesbl_joint_objective(d, u, w, tau, sigma2, z, hyper)
        assert previous <= after_u + 1e-9
        assert after_u <= after_w + 1e-9
        assert after_w <= after_tau + 1e-9
        previous = after_tau


def test_esbl_objective_includes_both_priors(make_dictionary, rng):
    d = make_dictionary(GramStructure.DIAGONAL)
    weights, sigma2, z = random_problem(rng, d)
    scales = rng.uniform(0.5, 2.0, size=d.num_cols)
    hyper = ESblHyper(nu=3.0, theta=0.1, phi=0.2)
    logdet, quad = dense_logdet_quadform(d, weights * scales, sigma2, z)
    expected = (
        -logdet
        - quad
        - np.sum(2.5 * np.log(weights) + 1.5 / weights)
        - np.sum(1.1 * np.log(scales) + 0.2 / scales)
    )
    value = eval_esbl_marginal_objective(
        d, WeightState(weights), ScaleState(scales), sigma2, z, hyper
    )
    assert value == pytest.approx(expected, rel=1e-9)


def test_joint_objective_at_the_origin(make_dictionary):
    d = make_dictionary(GramStructure.DIAGONAL)
    qk = d.num_cols
    value = eval_mesbl_joint_objective(
        d, np.zeros(qk), WeightState.ones(qk), ScaleState.ones(qk), 0.5, np.zeros(d.num_rows)
    )
    # only the ν/2 and φ terms of the priors survive at w = τ = 1
    assert value == pytest.approx(-0.51 * qk, rel=1e-12)


def test_objectives_are_affine_in_phi(make_dictionary, rng):
    d = make_dictionary(GramStructure.BLOCK_DIAGONAL)
    weights, sigma2, z = random_problem(rng, d)
    w = WeightState(weights)
    tau = ScaleState(rng.uniform(0.5, 2.0, size=d.num_cols))
    u = random_complex(rng, d.num_cols)
    delta = 0.3
    lo, hi = ESblHyper(phi=0.01), ESblHyper(phi=0.01 + delta)
    expected = delta * np.sum(1.0 / tau.tau)

    esbl_drop = eval_esbl_marginal_objective(d, w, tau, sigma2, z, lo) - (
        eval_esbl_marginal_objective(d, w, tau, sigma2, z, hi)
    )
    mesbl_drop = eval_mesbl_joint_objective(d, u, w, tau, sigma2, z, lo) - (
        eval_mesbl_joint_objective(d, u, w, tau, sigma2, z, hi)
    )
    assert esbl_drop == pytest.approx(expected, rel=1e-9)
    assert mesbl_drop == pytest.approx(expected, rel=1e-9)


def test_esbl_weight_update_adds_posterior_variance(make_dictionary, rng):
    d = make_dictionary(GramStructure.DENSE)
    weights, sigma2, z = random_problem(rng, d)
    w = WeightState(weights)
    tau = ScaleState(rng.uniform(0.5, 2.0, size=d.num_cols))
    hyper = ESblHyper(nu=3.0)
    stats = esbl_posterior_stats(d, w, tau, sigma2, z)
    esbl_w, _ = esbl_update_weights_scales(stats, w, tau, hyper)
    mesbl_w = mesbl_update_w(stats.mean, tau, hyper)
    expected = stats.cov_diag / tau.tau / (hyper.nu / 2 + 2)
    assert np.allclose(esbl_w.w - mesbl_w.w, expected, rtol=1e-10, atol=1e-14)


def test_pinned_esbl_is_sbl_with_inverse_gamma_prior(make_dictionary, rng):
    nu = 4.0
    policy = ConvergencePolicy(tol=1e-8, max_iter=200)
    for structure in ALL_STRUCTURES:
        d = make_dictionary(structure)
        _, sigma2, z = random_problem(rng, d)
        pinned = run_esbl(d, z, sigma2, ESblHyper(nu=nu), policy, pin_scales=True)
        sbl = run_sbl(d, z, sigma2, SblHyper(alpha=nu / 2, beta=nu / 2), policy)
        assert pinned.iterations == sbl.iterations
        assert np.array_equal(pinned.u_hat, sbl.u_hat)
        assert pinned.scales is not None and np.all(pinned.scales.tau == 1.0)


def test_large_nu_tends_to_least_squares(make_dictionary, rng):
    d = make_dictionary(GramStructure.DENSE)
    _, sigma2, z = random_problem(rng, d)
    pinned = run_esbl(d, z, sigma2, ESblHyper(nu=1e6), pin_scales=True)
    ls = run_least_squares(d, z, sigma2)
    assert np.allclose(pinned.u_hat, ls.u_hat, rtol=1e-4, atol=1e-6)


def test_pinned_esbl_approaches_ridge_as_nu_grows(make_dictionary, rng):
    policy = ConvergencePolicy(tol=1e-9, max_iter=500)
    for _ in range(3):
        d = make_dictionary(GramStructure.DENSE)
        _, sigma2, z = random_problem(rng, d)
        ridge = run_least_squares(d, z, sigma2).u_hat
        distances = [
            np.linalg.norm(
                run_esbl(d, z, sigma2, ESblHyper(nu=nu), policy, pin_scales=True).u_hat - ridge
            )
            for nu in (1.0, 10.0, 100.0)
        ]
        assert distances[0] > distances[1] > distances[2], distances


def test_least_squares_is_ridge(make_dictionary, rng):
    d = make_dictionary(GramStructure.DENSE)
    _, sigma2, z = random_problem(rng, d)
    A = d.to_dense()
    expected = np.linalg.solve(A.conj().T @ A + sigma2 * np.eye(d.num_cols), A.conj().T @ z)
    report = run_least_squares(d, z, sigma2)
    assert report.iterations == 1 and report.converged
    assert np.allclose(report.u_hat, expected, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("sparsity", [1, 2, 3])
def test_exact_recovery_noiseless(sparsity, rng):
    d = DictionaryKron(dft_pilot(2, 8), dictionary_transform(32))
    assert d.structure is GramStructure.DIAGONAL
    u = np.zeros(d.num_cols, dtype=complex)
    support = rng.choice(d.num_cols, size=sparsity, replace=False)
    u[support] = random_complex(rng, sparsity)
    z = apply_dictionary(d, u)

    for name in ("sbl", "esbl", "mesbl"):
        report = run_estimator(name, d, z, NOISELESS_SIGMA2)
        error = np.sum(np.abs(report.u_hat - u) ** 2) / np.sum(np.abs(u) ** 2)
        assert error < 1e-4, f"{name}: nmse {error:.2e}"


def test_iteration_budget_and_flags(make_dictionary, rng):
    d = make_dictionary(GramStructure.DENSE)
    _, sigma2, z = random_problem(rng, d)
    one = ConvergencePolicy(max_iter=1)
    for run in (run_sbl, run_esbl, run_mesbl):
        report = run(d, z, sigma2, policy=one)
        assert report.iterations == 1
        assert not report.converged
        assert report.objective_trace == []
        assert report.weights is not None


def test_runs_log_their_setup(make_dictionary, rng, caplog):
    d = make_dictionary(GramStructure.BLOCK_DIAGONAL)
    _, sigma2, z = random_problem(rng, d)
    one = ConvergencePolicy(max_iter=1)
    with caplog.at_level(logging.DEBUG, logger="kronsbl.estimators"):
        for run in (run_sbl, run_esbl, run_mesbl):
            run(d, z, sigma2, policy=one)

    starts = [r.getMessage() for r in caplog.records if "starting" in r.getMessage()]
    assert [s.split()[0] for s in starts] == ["sbl", "esbl", "mesbl"]
    assert all(f"{d.num_cols} coefficients" in s and "block_diagonal" in s for s in starts)
    assert "nu=" in starts[1] and "pin_scales=False" in starts[1]


def test_init_states_are_used(make_dictionary, rng):
    d = make_dictionary(GramStructure.DIAGONAL)
    _, sigma2, z = random_problem(rng, d)
    policy = ConvergencePolicy(max_iter=1)
    default = run_sbl(d, z, sigma2, policy=policy)
    custom = run_sbl(d, z, sigma2, policy=policy, init_weights=WeightState.ones(d.num_cols))
    assert np.array_equal(default.u_hat, custom.u_hat)
    small = WeightState(np.full(d.num_cols, 0.01))
    shifted = run_sbl(d, z, sigma2, policy=policy, init_weights=small)
    assert not np.allclose(default.u_hat, shifted.u_hat)

    with pytest.raises(ShapeError):
        run_esbl(d, z, sigma2, init_scales=ScaleState.ones(d.num_cols + 1))


def test_registry():
    assert sorted(ESTIMATORS) == ["esbl", "ls", "mesbl", "sbl"]
    with pytest.raises(ParameterError, match="unknown estimator 'vmp'"):
        run_estimator("vmp", DictionaryKron(np.eye(1), np.eye(1)), np.ones(1), 1.0)


def test_rejects_bad_inputs(make_dictionary):
    d = make_dictionary(GramStructure.DIAGONAL)
    with pytest.raises(ShapeError):
        run_sbl(d, np.ones(d.num_rows + 1), 1.0)
    with pytest.raises(ParameterError):
        run_esbl(d, np.ones(d.num_rows), -1.0)


def test_esbl_stops_on_effective_weights(make_dictionary, rng):
    d = make_dictionary(GramStructure.BLOCK_DIAGONAL)
    _, sigma2, z = random_problem(rng, d)
    policy = ConvergencePolicy(tol=1e-4, max_iter=500)
    report = run_esbl(d, z, sigma2, policy=policy)
    assert report.converged

    w, tau = WeightState.ones(d.num_cols), ScaleState.ones(d.num_cols)
    changes = []
    for _ in range(report.iterations):
        stats = esbl_posterior_stats(d, w, tau, sigma2, z)
        new_w, new_tau = esbl_update_weights_scales(stats, w, tau)
        changes.append(relative_change(new_tau.tau * new_w.w, tau.tau * w.w))
        w, tau = new_w, new_tau
    assert all(c >= policy.tol for c in changes[:-1])
    assert changes[-1] < policy.tol
    assert report.weights is not None and report.scales is not None
    assert np.array_equal(report.weights.w, w.w)
    assert np.array_equal(report.scales.tau, tau.tau)
    assert np.array_equal(report.u_hat, stats.mean)


def test_mesbl_stops_on_estimate_and_returns_matching_u(make_dictionary, rng):
    d = make_dictionary(GramStructure.DIAGONAL_BLOCKS)
    _, sigma2, z = random_problem(rng, d)
    policy = ConvergencePolicy(tol=1e-4, max_iter=500)
    report = run_mesbl(d, z, sigma2, policy=policy)
    assert report.converged

    w, tau = WeightState.ones(d.num_cols), ScaleState.ones(d.num_cols)
    u = None
    changes = []
    for _ in range(report.iterations):
        new_u = mesbl_update_u(d, w, tau, sigma2, z)
        w = mesbl_update_w(new_u, tau)
        tau = mesbl_update_tau(new_u, w)
        if u is not None:
            changes.append(relative_change(new_u, u))
        u = new_u
    assert all(c >= policy.tol for c in changes[:-1])
    assert changes[-1] < policy.tol

    # u_hat is solved against the final (w, τ), not the ones before the last sweep
    assert report.weights is not None and report.scales is not None
    assert np.array_equal(report.weights.w, w.w)
    final_u = mesbl_update_u(d, report.weights, report.scales, sigma2, z)
    assert np.array_equal(report.u_hat, final_u)
    assert not np.array_equal(report.u_hat, u)


def permute_dictionary(d: DictionaryKron, rng: np.random.Generator):
    """Reorder transform columns and users; returns the new dictionary and the column map."""
    q_order = rng.permutation(d.transform_size)
    k_order = rng.permutation(d.num_users)
    permuted = DictionaryKron(d.pilot[k_order, :], d.transform[:, q_order])
    columns = (q_order[:, None] + d.transform_size * k_order[None, :]).reshape(-1, order="F")
    return permuted, columns


@pytest.mark.parametrize("structure", ALL_STRUCTURES, ids=lambda s: s.value)
def test_estimates_follow_a_column_permutation(structure, make_dictionary, rng):
    d = make_dictionary(structure, num_users=3)
    _, sigma2, z = random_problem(rng, d)
    permuted, columns = permute_dictionary(d, rng)
    assert permuted.structure is structure
    assert np.allclose(permuted.to_dense(), d.to_dense()[:, columns])

    w0 = WeightState(rng.uniform(0.5, 2.0, size=d.num_cols))
    tau0 = ScaleState(rng.uniform(0.5, 2.0, size=d.num_cols))
    w0_p, tau0_p = WeightState(w0.w[columns]), ScaleState(tau0.tau[columns])
    policy = ConvergencePolicy(tol=1e-300, max_iter=15)
    pairs = [
        (
            run_sbl(d, z, sigma2, policy=policy, init_weights=w0),
            run_sbl(permuted, z, sigma2, policy=policy, init_weights=w0_p),
        ),
        (
            run_esbl(d, z, sigma2, policy=policy, init_weights=w0, init_scales=tau0),
            run_esbl(permuted, z, sigma2, policy=policy, init_weights=w0_p, init_scales=tau0_p),
        ),
        (
            run_mesbl(d, z, sigma2, policy=policy, init_weights=w0, init_scales=tau0),
            run_mesbl(permuted, z, sigma2, policy=policy, init_weights=w0_p, init_scales=tau0_p),
        ),
        (run_least_squares(d, z, sigma2), run_least_squares(permuted, z, sigma2)),
    ]
    for original, moved in pairs:
        assert original.iterations == moved.iterations, original.estimator
        scale = np.max(np.abs(original.u_hat))
        assert np.allclose(moved.u_hat, original.u_hat[columns], rtol=1e-7, atol=1e-9 * scale)
        if original.weights is not None:
            assert moved.weights is not None
            assert np.allclose(
                moved.weights.w,
                original.weights.w[columns],
                rtol=1e-7,
                atol=1e-9 * np.max(original.weights.w),
            )
        if original.scales is not None:
            assert moved.scales is not None
            assert np.allclose(
                moved.scales.tau,
                original.scales.tau[columns],
                rtol=1e-7,
                atol=1e-9 * np.max(original.scales.tau),
            )


def test_mesbl_shrinks_pure_noise_harder_than_sbl(rng):
    scenario = ChannelScenario(num_antennas=32, num_users=2, pilot_length=12, snr_db=0.0)
    d = build_dictionary(scenario)
    energy = {"sbl": 0.0, "mesbl": 0.0}
    for _ in range(4):
        z = np.sqrt(scenario.sigma2) * random_complex(rng, d.num_rows)
        for name in energy:
            u_hat = run_estimator(name, d, z, scenario.sigma2).u_hat
            energy[name] += float(np.sum(np.abs(u_hat) ** 2))
    # noise-only coefficients sit well above the τ-prior floor and are pruned
    assert energy["mesbl"] < 0.5 * energy["sbl"], energy
