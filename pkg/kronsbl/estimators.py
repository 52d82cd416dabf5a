"""
Iterative sparse Bayesian estimators over a DictionaryKron.

Three estimators share the model u_j | w_j, τ_j ~ CN(0, τ_j w_j):

* SBL (`run_sbl`): τ ≡ 1, weights estimated by EM on the marginal likelihood
  (optionally with an inverse-gamma prior on w).
* E-SBL (`run_esbl`): w ~ IG(ν/2, ν/2), τ ~ IG(θ, φ), (w, τ) estimated by EM
  on their marginal posterior.
* M-E-SBL (`run_mesbl`): same model as E-SBL, but (u, w, τ) estimated by
  alternating exact maximization of the joint posterior. No diagonal of
  S⁻¹ is ever needed, which is where its cost advantage comes from.

The two families optimize different objectives: EM ascends the posterior of
(w, τ) with u integrated out, the alternating scheme ascends the joint
posterior of (u, w, τ). Each has its own evaluator below and the recorded
traces are nondecreasing with respect to the matching objective.

`run_least_squares` is the unit-weight ridge estimate, kept as a baseline.
"""

import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from kronsbl.errors import ParameterError, ShapeError
from kronsbl.log_helper import getLogger
from kronsbl.numerics import (
    DictionaryKron,
    apply_dictionary,
    apply_dictionary_adjoint,
    build_gram,
    check_sigma2,
    factorize_gram,
    gauss_logdet_quadform,
)

log = getLogger("kronsbl.estimators")

WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True)
class SblHyper:
    """Inverse-gamma IG(alpha, beta) prior on the baseline SBL weights."""

    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if not (self.alpha >= 0 and self.beta >= 0):
            raise ParameterError(f"SBL prior needs alpha, beta >= 0, got {self.alpha}, {self.beta}")

    @property
    def prior_active(self) -> bool:
        # alpha = beta = 0 is the flat prior on log w, i.e. plain marginal likelihood
        return self.alpha != 0 or self.beta != 0


@dataclass(frozen=True)
class ESblHyper:
    nu: float = 1.0
    theta: float = 1e-2
    phi: float = 1e-2

    def __post_init__(self):
        if not self.nu > 0:
            raise ParameterError(f"degrees of freedom nu must be positive, got {self.nu}")
        if not (self.theta >= 0 and self.phi >= 0):
            raise ParameterError(f"theta and phi must be >= 0, got {self.theta}, {self.phi}")


@dataclass(frozen=True)
class ConvergencePolicy:
    """
    Stop when the relative ℓ∞ change of the tracked quantity drops below
    `tol`, or after `max_iter` iterations. SBL tracks w, E-SBL the effective
    weights τ⊙w and M-E-SBL its estimate u.

    `track_objective` makes the runners evaluate their objective after every
    iteration. It costs an extra log-determinant per iteration.
    """

    tol: float = 1e-6
    max_iter: int = 500
    track_objective: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ParameterError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ParameterError(f"max_iter must be at least 1, got {self.max_iter}")


@dataclass(frozen=True, eq=False)
class PositiveState:
    """A real vector with every entry finite and at least WEIGHT_FLOOR."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 1:
            raise ShapeError(f"{type(self).__name__} must be a vector, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or np.any(values < WEIGHT_FLOOR):
            raise ParameterError(
                f"{type(self).__name__} entries must be finite and >= {WEIGHT_FLOOR}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def ones(cls, size: int):
        return cls(np.ones(size))

    @classmethod
    def floored(cls, values: Any):
        return cls(np.maximum(np.asarray(values, dtype=float), WEIGHT_FLOOR))

    def __array__(self, dtype=None) -> np.ndarray:
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self) -> int:
        return len(self.values)


class WeightState(PositiveState):
    @property
    def w(self) -> np.ndarray:
        return self.values


class ScaleState(PositiveState):
    @property
    def tau(self) -> np.ndarray:
        return self.values


@dataclass(frozen=True)
class PosteriorStats:
    """Posterior mean and the diagonal of the posterior covariance."""

    mean: np.ndarray
    cov_diag: np.ndarray

    @property
    def second_moment(self) -> np.ndarray:
        """r_j = |μ_j|² + Σ_jj, the quantity every EM update is built from."""
        return np.abs(self.mean) ** 2 + self.cov_diag


@dataclass
class EstimateReport:
    estimator: str
    u_hat: np.ndarray
    iterations: int
    objective_trace: List[float] = field(default_factory=list)
    converged: bool = True
    wall_time: float = 0.0
    weights: Optional[WeightState] = None
    scales: Optional[ScaleState] = None


def relative_change(new: np.ndarray, old: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(old))), WEIGHT_FLOOR)
    return float(np.max(np.abs(new - old))) / scale


def _check_observation(dictionary: DictionaryKron, z: Any) -> np.ndarray:
    z = np.asarray(z, dtype=complex)
    if z.ndim != 1 or z.shape[0] != dictionary.num_rows:
        raise ShapeError(f"z must be a vector of length {dictionary.num_rows}, got {z.shape}")
    return z


def _check_state(state: PositiveState, dictionary_or_size: Any) -> None:
    size = (
        dictionary_or_size.num_cols
        if isinstance(dictionary_or_size, DictionaryKron)
        else int(dictionary_or_size)
    )
    if len(state) != size:
        raise ShapeError(f"{type(state).__name__} has length {len(state)}, expected {size}")


def _posterior(
    dictionary: DictionaryKron, eff_weights: np.ndarray, sigma2: float, z: Any, with_cov: bool
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    z = _check_observation(dictionary, z)
    factor = factorize_gram(build_gram(dictionary, eff_weights, sigma2))
    mean = factor.solve(apply_dictionary_adjoint(dictionary, z)) / factor.gram.sigma2
    return mean, (factor.inverse_diag() if with_cov else None)


def _ig_log_prior(values: np.ndarray, shape: float, scale: float) -> float:
    """Unnormalized log IG(shape, scale) density summed over entries."""
    return float(np.sum(-(shape + 1.0) * np.log(values) - scale / values))


#
# Baseline SBL
#


def sbl_posterior_stats(
    dictionary: DictionaryKron, weights: WeightState, sigma2: float, z: Any
) -> PosteriorStats:
    _check_state(weights, dictionary)
    mean, cov_diag = _posterior(dictionary, weights.w, sigma2, z, with_cov=True)
    assert cov_diag is not None
    return PosteriorStats(mean, cov_diag)


def sbl_update_weights(stats: PosteriorStats, hyper: SblHyper = SblHyper()) -> WeightState:
    r = stats.second_moment
    if hyper.prior_active:
        return WeightState.floored((r + hyper.beta) / (hyper.alpha + 2.0))
    return WeightState.floored(r)


def eval_sbl_marginal_objective(
    dictionary: DictionaryKron,
    weights: WeightState,
    sigma2: float,
    z: Any,
    hyper: SblHyper = SblHyper(),
) -> float:
    """log f_SBL(w) = −log det V − zᴴV⁻¹z, plus the IG log-prior when active."""
    logdet, quadform = gauss_logdet_quadform(dictionary, weights, sigma2, z)
    objective = -logdet - quadform
    if hyper.prior_active:
        objective += _ig_log_prior(weights.w, hyper.alpha, hyper.beta)
    return objective


def run_sbl(
    dictionary: DictionaryKron,
    z: Any,
    sigma2: float,
    hyper: SblHyper = SblHyper(),
    policy: ConvergencePolicy = ConvergencePolicy(),
    init_weights: Optional[WeightState] = None,
) -> EstimateReport:
    start = time.perf_counter()
    sigma2 = check_sigma2(sigma2)
    weights = init_weights if init_weights is not None else WeightState.ones(dictionary.num_cols)
    _check_state(weights, dictionary)
    log.debug(
        f"sbl starting: {dictionary.num_cols} coefficients, {dictionary.structure.value} Gram, "
        f"sigma2={sigma2:.3e}"
    )

    trace: List[float] = []
    converged = False
    iterations = 0
    mean = np.zeros(dictionary.num_cols, dtype=complex)
    for iterations in range(1, policy.max_iter + 1):
        stats = sbl_posterior_stats(dictionary, weights, sigma2, z)
        mean = stats.mean
        updated = sbl_update_weights(stats, hyper)
        change = relative_change(updated.w, weights.w)
        weights = updated
        if policy.track_objective:
            trace.append(eval_sbl_marginal_objective(dictionary, weights, sigma2, z, hyper))
        if change < policy.tol:
            converged = True
            break

    report = EstimateReport(
        estimator="sbl",
        u_hat=mean,
        iterations=iterations,
        objective_trace=trace,
        converged=converged,
        wall_time=time.perf_counter() - start,
        weights=weights,
    )
    log.debug(f"sbl finished after {iterations} iterations, converged={converged}")
    return report


#
# E-SBL
#


def esbl_posterior_stats(
    dictionary: DictionaryKron,
    weights: WeightState,
    scales: ScaleState,
    sigma2: float,
    z: Any,
) -> PosteriorStats:
    _check_state(weights, dictionary)
    _check_state(scales, dictionary)
    mean, cov_diag = _posterior(dictionary, scales.tau * weights.w, sigma2, z, with_cov=True)
    assert cov_diag is not None
    return PosteriorStats(mean, cov_diag)


def esbl_update_weights_scales(
    stats: PosteriorStats,
    weights: WeightState,
    scales: ScaleState,
    hyper: ESblHyper = ESblHyper(),
) -> Tuple[WeightState, ScaleState]:
    """One EM M-step. τ is updated with the already updated weights."""
    _check_state(weights, len(stats.mean))
    _check_state(scales, len(stats.mean))
    r = stats.second_moment
    half_nu = hyper.nu / 2.0
    new_weights = WeightState.floored((half_nu + r / scales.tau) / (half_nu + 2.0))
    new_scales = ScaleState.floored((hyper.phi + r / new_weights.w) / (hyper.theta + 2.0))
    return new_weights, new_scales


def eval_esbl_marginal_objective(
    dictionary: DictionaryKron,
    weights: WeightState,
    scales: ScaleState,
    sigma2: float,
    z: Any,
    hyper: ESblHyper = ESblHyper(),
) -> float:
    logdet, quadform = gauss_logdet_quadform(dictionary, scales.tau * weights.w, sigma2, z)
    return (
        -logdet
        - quadform
        + _ig_log_prior(weights.w, hyper.nu / 2.0, hyper.nu / 2.0)
        + _ig_log_prior(scales.tau, hyper.theta, hyper.phi)
    )


def run_esbl(
    dictionary: DictionaryKron,
    z: Any,
    sigma2: float,
    hyper: ESblHyper = ESblHyper(),
    policy: ConvergencePolicy = ConvergencePolicy(),
    init_weights: Optional[WeightState] = None,
    init_scales: Optional[ScaleState] = None,
    pin_scales: bool = False,
) -> EstimateReport:
    """
    EM for E-SBL. With `pin_scales` the scales stay at their initial value,
    which with τ = 1 makes the iteration identical to run_sbl under
    SblHyper(alpha=nu/2, beta=nu/2).
    """
    start = time.perf_counter()
    sigma2 = check_sigma2(sigma2)
    weights = init_weights if init_weights is not None else WeightState.ones(dictionary.num_cols)
    scales = init_scales if init_scales is not None else ScaleState.ones(dictionary.num_cols)
    _check_state(weights, dictionary)
    _check_state(scales, dictionary)
    log.debug(
        f"esbl starting: {dictionary.num_cols} coefficients, {dictionary.structure.value} Gram, "
        f"sigma2={sigma2:.3e}, nu={hyper.nu}, pin_scales={pin_scales}"
    )

    trace: List[float] = []
    converged = False
    iterations = 0
    mean = np.zeros(dictionary.num_cols, dtype=complex)
    for iterations in range(1, policy.max_iter + 1):
        stats = esbl_posterior_stats(dictionary, weights, scales, sigma2, z)
        mean = stats.mean
        new_weights, new_scales = esbl_update_weights_scales(stats, weights, scales, hyper)
        if pin_scales:
            new_scales = scales
        # the Gram only sees τ⊙w
        change = relative_change(new_scales.tau * new_weights.w, scales.tau * weights.w)
        weights, scales = new_weights, new_scales
        if policy.track_objective:
            trace.append(
                eval_esbl_marginal_objective(dictionary, weights, scales, sigma2, z, hyper)
            )
        if change < policy.tol:
            converged = True
            break

    report = EstimateReport(
        estimator="esbl",
        u_hat=mean,
        iterations=iterations,
        objective_trace=trace,
        converged=converged,
        wall_time=time.perf_counter() - start,
        weights=weights,
        scales=scales,
    )
    log.debug(f"esbl finished after {iterations} iterations, converged={converged}")
    return report


#
# M-E-SBL
#


def mesbl_update_u(
    dictionary: DictionaryKron,
    weights: WeightState,
    scales: ScaleState,
    sigma2: float,
    z: Any,
) -> np.ndarray:
    """Maximizer of the joint posterior in u: the ridge solution (1/σ²) S⁻¹ Aᴴz."""
    _check_state(weights, dictionary)
    _check_state(scales, dictionary)
    mean, _ = _posterior(dictionary, scales.tau * weights.w, sigma2, z, with_cov=False)
    return mean


def mesbl_update_w(u: Any, scales: ScaleState, hyper: ESblHyper = ESblHyper()) -> WeightState:
    u = np.asarray(u, dtype=complex)
    _check_state(scales, len(u))
    half_nu = hyper.nu / 2.0
    return WeightState.floored((half_nu + np.abs(u) ** 2 / scales.tau) / (half_nu + 2.0))


def mesbl_update_tau(u: Any, weights: WeightState, hyper: ESblHyper = ESblHyper()) -> ScaleState:
    u = np.asarray(u, dtype=complex)
    _check_state(weights, len(u))
    return ScaleState.floored((hyper.phi + np.abs(u) ** 2 / weights.w) / (hyper.theta + 2.0))


def eval_mesbl_joint_objective(
    dictionary: DictionaryKron,
    u: Any,
    weights: WeightState,
    scales: ScaleState,
    sigma2: float,
    z: Any,
    hyper: ESblHyper = ESblHyper(),
) -> float:
    sigma2 = check_sigma2(sigma2)
    z = _check_observation(dictionary, z)
    u = np.asarray(u, dtype=complex)
    eff = scales.tau * weights.w
    residual = z - apply_dictionary(dictionary, u)
    return float(
        -np.real(np.vdot(residual, residual)) / sigma2
        - np.sum(np.log(eff))
        - np.sum(np.abs(u) ** 2 / eff)
        + _ig_log_prior(weights.w, hyper.nu / 2.0, hyper.nu / 2.0)
        + _ig_log_prior(scales.tau, hyper.theta, hyper.phi)
    )


def run_mesbl(
    dictionary: DictionaryKron,
    z: Any,
    sigma2: float,
    hyper: ESblHyper = ESblHyper(),
    policy: ConvergencePolicy = ConvergencePolicy(),
    init_weights: Optional[WeightState] = None,
    init_scales: Optional[ScaleState] = None,
) -> EstimateReport:
    start = time.perf_counter()
    sigma2 = check_sigma2(sigma2)
    weights = init_weights if init_weights is not None else WeightState.ones(dictionary.num_cols)
    scales = init_scales if init_scales is not None else ScaleState.ones(dictionary.num_cols)
    _check_state(weights, dictionary)
    _check_state(scales, dictionary)
    log.debug(
        f"mesbl starting: {dictionary.num_cols} coefficients, {dictionary.structure.value} Gram, "
        f"sigma2={sigma2:.3e}, nu={hyper.nu}"
    )

    trace: List[float] = []
    converged = False
    iterations = 0
    u: Optional[np.ndarray] = None
    for iterations in range(1, policy.max_iter + 1):
        new_u = mesbl_update_u(dictionary, weights, scales, sigma2, z)
        new_weights = mesbl_update_w(new_u, scales, hyper)
        new_scales = mesbl_update_tau(new_u, new_weights, hyper)
        change = relative_change(new_u, u) if u is not None else np.inf
        u, weights, scales = new_u, new_weights, new_scales
        if policy.track_objective:
            trace.append(
                eval_mesbl_joint_objective(dictionary, u, weights, scales, sigma2, z, hyper)
            )
        if change < policy.tol:
            converged = True
            break

    # the last sweep moved (w, τ) after u was solved; return the u that matches them
    u = mesbl_update_u(dictionary, weights, scales, sigma2, z)
    report = EstimateReport(
        estimator="mesbl",
        u_hat=u,
        iterations=iterations,
        objective_trace=trace,
        converged=converged,
        wall_time=time.perf_counter() - start,
        weights=weights,
        scales=scales,
    )
    log.debug(f"mesbl finished after {iterations} sweeps, converged={converged}")
    return report


def run_least_squares(dictionary: DictionaryKron, z: Any, sigma2: float) -> EstimateReport:
    """Regularized least squares (AᴴA + σ²I)⁻¹Aᴴz, i.e. the SBL posterior mean at w = 1."""
    start = time.perf_counter()
    mean, _ = _posterior(dictionary, np.ones(dictionary.num_cols), sigma2, z, with_cov=False)
    return EstimateReport(
        estimator="ls",
        u_hat=mean,
        iterations=1,
        wall_time=time.perf_counter() - start,
    )


@dataclass(frozen=True)
class EstimatorSettings:
    """Everything an estimator needs besides the data, shared by sweeps and the CLI."""

    sbl: SblHyper = SblHyper()
    esbl: ESblHyper = ESblHyper()
    policy: ConvergencePolicy = ConvergencePolicy()


Runner = Callable[[DictionaryKron, np.ndarray, float, EstimatorSettings], EstimateReport]

ESTIMATORS: Dict[str, Runner] = {
    "esbl": lambda d, z, s2, cfg: run_esbl(d, z, s2, cfg.esbl, cfg.policy),
    "ls": lambda d, z, s2, cfg: run_least_squares(d, z, s2),
    "mesbl": lambda d, z, s2, cfg: run_mesbl(d, z, s2, cfg.esbl, cfg.policy),
    "sbl": lambda d, z, s2, cfg: run_sbl(d, z, s2, cfg.sbl, cfg.policy),
}


def run_estimator(
    name: str,
    dictionary: DictionaryKron,
    z: np.ndarray,
    sigma2: float,
    settings: EstimatorSettings = EstimatorSettings(),
) -> EstimateReport:
    try:
        runner = ESTIMATORS[name]
    except KeyError:
        raise ParameterError(
            f"unknown estimator '{name}', expected one of {sorted(ESTIMATORS)}"
        ) from None
    return runner(dictionary, z, sigma2, settings)
