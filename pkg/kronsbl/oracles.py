"""
Dense reference computations for small instances.

Everything here materializes A = Pᵀ ⊗ F and the MN x MN marginal covariance
explicitly, so it is only usable for a few dozen rows and columns. The
structured paths in kronsbl.numerics are checked against these functions by
the test suite and by `kronsbl selftest`.
"""

from typing import Any, Optional, Tuple

import numpy as np

from kronsbl.channel_sim import dft_pilot, dft_transform
from kronsbl.numerics import DictionaryKron, GramStructure


def dense_gram(dictionary: DictionaryKron, weights: Any, sigma2: float) -> np.ndarray:
    A = dictionary.to_dense()
    w = np.asarray(weights, dtype=float)
    return A.conj().T @ A / sigma2 + np.diag(1.0 / w)


def dense_inverse_diag(gram: np.ndarray) -> np.ndarray:
    return np.real(np.diag(np.linalg.inv(gram)))


def dense_logdet_quadform(
    dictionary: DictionaryKron, weights: Any, sigma2: float, z: Any
) -> Tuple[float, float]:
    A = dictionary.to_dense()
    w = np.asarray(weights, dtype=float)
    V = A @ np.diag(w) @ A.conj().T + sigma2 * np.eye(A.shape[0])
    sign, logdet = np.linalg.slogdet(V)
    assert np.isclose(sign, 1.0), f"V is not positive definite, sign {sign}"
    z = np.asarray(z, dtype=complex)
    return float(logdet), float(np.real(np.vdot(z, np.linalg.solve(V, z))))


def dense_posterior(
    dictionary: DictionaryKron, weights: Any, sigma2: float, z: Any
) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance diagonal through an explicit inverse of S."""
    A = dictionary.to_dense()
    cov = np.linalg.inv(dense_gram(dictionary, weights, sigma2))
    mean = cov @ A.conj().T @ np.asarray(z, dtype=complex) / sigma2
    return mean, np.real(np.diag(cov))


def random_complex(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def random_dictionary(
    rng: np.random.Generator,
    structure: GramStructure,
    num_antennas: int = 4,
    pilot_length: int = 3,
    num_users: int = 2,
    transform_size: Optional[int] = None,
) -> DictionaryKron:
    """
    A dictionary whose Gram falls in the requested structure class.

    Orthogonal factors are DFT matrices; the others are complex Gaussian.
    DIAGONAL and DIAGONAL_BLOCKS need a square transform, so transform_size
    is ignored for them.
    """
    q = transform_size if transform_size is not None else num_antennas
    if structure in (GramStructure.DIAGONAL, GramStructure.BLOCK_DIAGONAL):
        pilot = dft_pilot(num_users, pilot_length)
    else:
        pilot = random_complex(rng, num_users, pilot_length)
    if structure in (GramStructure.DIAGONAL, GramStructure.DIAGONAL_BLOCKS):
        transform = dft_transform(num_antennas)
    else:
        transform = random_complex(rng, num_antennas, q)
    dictionary = DictionaryKron(pilot, transform)
    assert dictionary.structure is structure, f"drew {dictionary.structure}, wanted {structure}"
    return dictionary


def random_problem(
    rng: np.random.Generator, dictionary: DictionaryKron
) -> Tuple[np.ndarray, float, np.ndarray]:
    """Positive weights, a noise variance and an observation vector for `dictionary`."""
    weights = rng.uniform(0.1, 2.0, size=dictionary.num_cols)
    sigma2 = float(rng.uniform(0.05, 1.0))
    z = random_complex(rng, dictionary.num_rows)
    return weights, sigma2, z
