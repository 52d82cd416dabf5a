"""
Invariant checks shipped with the command line tool.

Each check draws a few small random instances and compares the structured
computations with the dense oracles, or asserts a property the estimators
must satisfy. A check passes or fails with a one-line detail.
"""

from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from kronsbl.channel_sim import ChannelScenario, dft_pilot, generate_channel, trial_rng
from kronsbl.estimators import (
    ConvergencePolicy,
    ESblHyper,
    SblHyper,
    WeightState,
    run_esbl,
    run_mesbl,
    run_sbl,
    sbl_posterior_stats,
)
from kronsbl.errors import KronsblError
from kronsbl.log_helper import getLogger
from kronsbl.numerics import (
    DictionaryKron,
    GramStructure,
    apply_dictionary,
    apply_dictionary_adjoint,
    build_gram,
    diag_of_gram_inverse,
    gauss_logdet_quadform,
    solve_gram,
)
from kronsbl.oracles import (
    dense_gram,
    dense_inverse_diag,
    dense_logdet_quadform,
    dense_posterior,
    random_complex,
    random_dictionary,
    random_problem,
)

log = getLogger("kronsbl.selftest")

INSTANCES_PER_CHECK = 5


class CheckFailed(Exception):
    pass


def expect(condition: bool, message: str):
    if not condition:
        raise CheckFailed(message)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def relative_error(actual, expected) -> float:
    actual = np.asarray(actual)
    expected = np.asarray(expected)
    return float(np.max(np.abs(actual - expected)) / max(np.max(np.abs(expected)), 1e-300))


def nondecreasing(trace: List[float], slack: float = 1e-9) -> bool:
    return all(b >= a - slack for a, b in zip(trace, trace[1:]))


def check_kronecker_identity(rng: np.random.Generator) -> str:
    for _ in range(INSTANCES_PER_CHECK):
        d = DictionaryKron(random_complex(rng, 2, 3), random_complex(rng, 4, 3))
        A = d.to_dense()
        err = relative_error(A.conj().T @ A, np.kron(d.pilot_gram, d.transform_gram))
        expect(err < 1e-12, f"AᴴA differs from conj(PPᴴ) ⊗ FᴴF by {err:.2e}")
        x = random_complex(rng, d.num_cols)
        expect(relative_error(apply_dictionary(d, x), A @ x) < 1e-12, "A x mismatch")
        y = random_complex(rng, d.num_rows)
        expect(relative_error(apply_dictionary_adjoint(d, y), A.conj().T @ y) < 1e-12, "Aᴴy")
    return f"{INSTANCES_PER_CHECK} instances"


def check_oracle_equivalence(rng: np.random.Generator) -> str:
    for structure in GramStructure:
        for _ in range(INSTANCES_PER_CHECK):
            d = random_dictionary(rng, structure)
            weights, sigma2, z = random_problem(rng, d)
            gram = build_gram(d, weights, sigma2)
            dense = dense_gram(d, weights, sigma2)
            expect(relative_error(gram.to_dense(), dense) < 1e-12, f"{structure.value}: Gram")

            rhs = random_complex(rng, d.num_cols)
            solved = solve_gram(gram, rhs)
            expect(relative_error(solved, np.linalg.solve(dense, rhs)) < 1e-10, "solve")
            inv_diag = diag_of_gram_inverse(gram)
            expect(relative_error(inv_diag, dense_inverse_diag(dense)) < 1e-10, "diag of S⁻¹")

            logdet, quad = gauss_logdet_quadform(d, weights, sigma2, z)
            ref_logdet, ref_quad = dense_logdet_quadform(d, weights, sigma2, z)
            expect(relative_error(logdet, ref_logdet) < 1e-8, f"{structure.value}: logdet")
            expect(relative_error(quad, ref_quad) < 1e-10, f"{structure.value}: quadform")

            stats = sbl_posterior_stats(d, WeightState(weights), sigma2, z)
            mean, cov_diag = dense_posterior(d, weights, sigma2, z)
            expect(relative_error(stats.mean, mean) < 1e-10, "posterior mean")
            expect(relative_error(stats.cov_diag, cov_diag) < 1e-10, "posterior covariance")
    return f"{INSTANCES_PER_CHECK} instances per structure"


def check_monotonicity(rng: np.random.Generator) -> str:
    policy = ConvergencePolicy(tol=1e-9, max_iter=50, track_objective=True)
    for structure in GramStructure:
        for _ in range(INSTANCES_PER_CHECK):
            d = random_dictionary(rng, structure)
            _, sigma2, z = random_problem(rng, d)
            for run in (run_sbl, run_esbl, run_mesbl):
                report = run(d, z, sigma2, policy=policy)
                expect(
                    nondecreasing(report.objective_trace),
                    f"{report.estimator} objective decreased on a {structure.value} instance",
                )
    return f"{INSTANCES_PER_CHECK} instances per structure and estimator"


def check_reduction(rng: np.random.Generator) -> str:
    nu = 3.0
    policy = ConvergencePolicy(tol=1e-8, max_iter=100)
    for _ in range(INSTANCES_PER_CHECK):
        d = random_dictionary(rng, GramStructure.DENSE)
        _, sigma2, z = random_problem(rng, d)
        pinned = run_esbl(d, z, sigma2, ESblHyper(nu=nu), policy, pin_scales=True)
        sbl = run_sbl(d, z, sigma2, SblHyper(alpha=nu / 2, beta=nu / 2), policy)
        expect(pinned.iterations == sbl.iterations, "iteration counts differ")
        expect(relative_error(pinned.u_hat, sbl.u_hat) < 1e-12, "estimates differ")
    return f"{INSTANCES_PER_CHECK} instances"


def check_channel_generation(rng: np.random.Generator) -> str:
    scenario = ChannelScenario(num_antennas=16, num_users=3, pilot_length=4, snr_db=0.0)
    first, _ = generate_channel(scenario, trial_rng(7, 0, 0))
    again, _ = generate_channel(scenario, trial_rng(7, 0, 0))
    expect(np.array_equal(first.H, again.H), "seeded channel draws differ")
    expect(abs(first.energy() / (16 * 3) - 1.0) < 1e-10, "channel is not normalized")
    P = dft_pilot(3, 4)
    expect(relative_error(P @ P.conj().T, 4 * np.eye(3)) < 1e-12, "DFT pilots not orthogonal")
    return "seeded draws, normalization and pilot orthogonality"


CHECKS: List[Callable[[np.random.Generator], str]] = [
    check_kronecker_identity,
    check_oracle_equivalence,
    check_monotonicity,
    check_reduction,
    check_channel_generation,
]


def run_selftest(seed: int = 0) -> List[CheckResult]:
    results = []
    for i, check in enumerate(CHECKS):
        name = check.__name__[len("check_") :]
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        try:
            detail = check(rng)
        except (CheckFailed, KronsblError) as e:
            log.error(f"selftest {name} failed: {e}")
            results.append(CheckResult(name, False, str(e)))
            continue
        log.info(f"selftest {name} passed ({detail})")
        results.append(CheckResult(name, True, detail))
    return results
