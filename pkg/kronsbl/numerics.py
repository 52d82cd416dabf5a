"""
Complex linear algebra over the Kronecker-structured dictionary A = Pᵀ ⊗ F.

Conventions used throughout kronsbl:

* vectorization is column-major: u = vec(U) with U of shape Q x K, so entry
  (q, k) of U sits at index j = q + Q*k of u. Observations follow the same
  rule, z = vec(Z) with Z of shape M x N.
* A is never materialized. Products use the reshape identities
      A vec(U)  = vec(F U P)
      Aᴴ vec(Z) = vec(Fᴴ Z Pᴴ)
* The system matrix shared by all estimators is
      S = (1/σ²) AᴴA + Diag(w)⁻¹,   AᴴA = conj(PPᴴ) ⊗ FᴴF
  where w are the effective weights (w for SBL, τ ⊙ w for E-SBL/M-E-SBL).
  The pilot factor is conjugated; for real or orthogonal pilots conj(PPᴴ)
  equals PPᴴ.

Depending on which factor Gram is diagonal, S is diagonal, block diagonal
(K blocks of size Q), or a K x K grid of diagonal blocks which after
reordering becomes Q independent K x K blocks. Every structured case is
stored as a stack of blocks plus the index groups they act on, so solve,
inverse diagonal and log-determinant are computed block by block.
"""

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Any, List, Optional, Tuple

import numpy as np
import scipy.linalg

from kronsbl.errors import ConditioningError, ParameterError, ShapeError
from kronsbl.log_helper import getLogger

log = getLogger("kronsbl.numerics")

# A factor Gram counts as diagonal when its off-diagonal mass is at most
# this fraction of its diagonal mass. DFT factors land around 1e-15.
ORTHOGONALITY_TOL = 1e-10


def as_complex_matrix(value: Any, name: str) -> np.ndarray:
    """Validate and freeze a dense complex matrix."""
    arr = np.array(value, dtype=complex)
    if arr.ndim != 2 or 0 in arr.shape:
        raise ShapeError(f"{name} must be a non-empty 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


def is_diagonal(gram: np.ndarray, tol: float = ORTHOGONALITY_TOL) -> bool:
    diag_mass = np.sum(np.abs(np.diag(gram)))
    off_mass = np.sum(np.abs(gram)) - diag_mass
    return bool(off_mass <= tol * diag_mass)


def _check_length(vec: Any, expected: int, name: str) -> np.ndarray:
    arr = np.asarray(vec, dtype=complex)
    if arr.ndim != 1 or arr.shape[0] != expected:
        raise ShapeError(f"{name} must be a vector of length {expected}, got shape {arr.shape}")
    return arr


@enum.unique
class GramStructure(str, enum.Enum):
    # both PPᴴ and FᴴF diagonal
    DIAGONAL = "diagonal"
    # only PPᴴ diagonal: K blocks of size Q
    BLOCK_DIAGONAL = "block_diagonal"
    # only FᴴF diagonal: K x K grid of diagonal blocks
    DIAGONAL_BLOCKS = "diagonal_blocks"
    DENSE = "dense"


@dataclass(frozen=True)
class DictionaryKron:
    """
    The implicit measurement operator A = Pᵀ ⊗ F of shape MN x QK.

    `pilot` is P (K x N), `transform` is F (M x Q). The factor Grams and the
    resulting structure class are computed once and cached on the instance.
    """

    pilot: np.ndarray
    transform: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pilot", as_complex_matrix(self.pilot, "pilot"))
        object.__setattr__(self, "transform", as_complex_matrix(self.transform, "transform"))

    @property
    def num_users(self) -> int:
        return int(self.pilot.shape[0])

    @property
    def pilot_length(self) -> int:
        return int(self.pilot.shape[1])

    @property
    def num_antennas(self) -> int:
        return int(self.transform.shape[0])

    @property
    def transform_size(self) -> int:
        return int(self.transform.shape[1])

    @property
    def num_rows(self) -> int:
        return self.num_antennas * self.pilot_length

    @property
    def num_cols(self) -> int:
        return self.transform_size * self.num_users

    @cached_property
    def pilot_gram(self) -> np.ndarray:
        """conj(PPᴴ), the K x K left factor of AᴴA."""
        return np.conj(self.pilot @ self.pilot.conj().T)

    @cached_property
    def transform_gram(self) -> np.ndarray:
        """FᴴF, the Q x Q right factor of AᴴA."""
        return self.transform.conj().T @ self.transform

    @cached_property
    def structure(self) -> GramStructure:
        pilot_diag = is_diagonal(self.pilot_gram)
        transform_diag = is_diagonal(self.transform_gram)
        if pilot_diag and transform_diag:
            return GramStructure.DIAGONAL
        if pilot_diag:
            return GramStructure.BLOCK_DIAGONAL
        if transform_diag:
            return GramStructure.DIAGONAL_BLOCKS
        return GramStructure.DENSE

    def to_dense(self) -> np.ndarray:
        """Materialize A. Only meant for small instances and oracles."""
        return np.kron(self.pilot.T, self.transform)


def gram_structure(dictionary: DictionaryKron) -> GramStructure:
    return dictionary.structure


def apply_dictionary(dictionary: DictionaryKron, x: Any) -> np.ndarray:
    """A x computed as vec(F U P) with U = devec(x)."""
    x = _check_length(x, dictionary.num_cols, "x")
    u = x.reshape((dictionary.transform_size, dictionary.num_users), order="F")
    return (dictionary.transform @ u @ dictionary.pilot).reshape(-1, order="F")


def apply_dictionary_adjoint(dictionary: DictionaryKron, y: Any) -> np.ndarray:
    """Aᴴ y computed as vec(Fᴴ Z Pᴴ) with Z = devec(y)."""
    y = _check_length(y, dictionary.num_rows, "y")
    z = y.reshape((dictionary.num_antennas, dictionary.pilot_length), order="F")
    out = dictionary.transform.conj().T @ z @ dictionary.pilot.conj().T
    return out.reshape(-1, order="F")


def effective_weights(weights: Any, size: int) -> np.ndarray:
    """Validate a strictly positive real weight vector of the given size."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.shape[0] != size:
        raise ShapeError(f"weights must be a vector of length {size}, got shape {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ParameterError(f"weights must be finite and strictly positive, min is {w.min()}")
    return w


def check_sigma2(sigma2: float) -> float:
    sigma2 = float(sigma2)
    if not np.isfinite(sigma2) or sigma2 <= 0:
        raise ParameterError(f"noise variance must be finite and positive, got {sigma2}")
    return sigma2


@dataclass(frozen=True)
class GramMatrix:
    """
    S = (1/σ²) AᴴA + Diag(w)⁻¹ in structure-dependent storage.

    DIAGONAL keeps the diagonal in `diagonal`. Every other class keeps a
    stack of Hermitian blocks in `blocks` (nb x b x b) and, in `groups`
    (nb x b), the indices of u each block acts on. Indices not shared by two
    blocks never interact.
    """

    structure: GramStructure
    sigma2: float
    size: int
    diagonal: Optional[np.ndarray] = None
    blocks: Optional[np.ndarray] = None
    groups: Optional[np.ndarray] = None

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.size, self.size), dtype=complex)
        if self.structure is GramStructure.DIAGONAL:
            assert self.diagonal is not None
            dense[np.diag_indices(self.size)] = self.diagonal
            return dense
        assert self.blocks is not None and self.groups is not None
        for block, idx in zip(self.blocks, self.groups):
            dense[np.ix_(idx, idx)] = block
        return dense


def build_gram(dictionary: DictionaryKron, weights: Any, sigma2: float) -> GramMatrix:
    sigma2 = check_sigma2(sigma2)
    w = effective_weights(weights, dictionary.num_cols)
    q, k = dictionary.transform_size, dictionary.num_users
    gp, gf = dictionary.pilot_gram, dictionary.transform_gram
    # inv_w[k, q] is the prior precision of u at index q + Q*k
    inv_w = (1.0 / w).reshape((k, q))
    structure = dictionary.structure

    if structure is GramStructure.DIAGONAL:
        diagonal = np.kron(np.real(np.diag(gp)), np.real(np.diag(gf))) / sigma2 + 1.0 / w
        return GramMatrix(structure, sigma2, q * k, diagonal=diagonal)

    if structure is GramStructure.BLOCK_DIAGONAL:
        blocks = np.diag(gp)[:, None, None] * gf[None, :, :] / sigma2
        blocks[:, np.arange(q), np.arange(q)] += inv_w
        groups = np.arange(q * k).reshape((k, q))
    elif structure is GramStructure.DIAGONAL_BLOCKS:
        blocks = np.diag(gf)[:, None, None] * gp[None, :, :] / sigma2
        blocks[:, np.arange(k), np.arange(k)] += inv_w.T
        groups = np.arange(q * k).reshape((k, q)).T
    else:
        blocks = (np.kron(gp, gf) / sigma2)[None, :, :]
        blocks[0, np.arange(q * k), np.arange(q * k)] += 1.0 / w
        groups = np.arange(q * k)[None, :]

    return GramMatrix(structure, sigma2, q * k, blocks=blocks, groups=groups)


@dataclass(frozen=True)
class GramFactor:
    """Cholesky factors of a GramMatrix, one lower-triangular factor per block."""

    gram: GramMatrix
    factors: Optional[List[np.ndarray]] = None

    def solve(self, rhs: Any) -> np.ndarray:
        rhs = _check_length(rhs, self.gram.size, "rhs")
        if self.factors is None:
            assert self.gram.diagonal is not None
            return rhs / self.gram.diagonal
        assert self.gram.groups is not None
        out = np.empty_like(rhs)
        for lower, idx in zip(self.factors, self.gram.groups):
            out[idx] = scipy.linalg.cho_solve((lower, True), rhs[idx], check_finite=False)
        return out

    def inverse_diag(self) -> np.ndarray:
        if self.factors is None:
            assert self.gram.diagonal is not None
            return 1.0 / self.gram.diagonal
        assert self.gram.groups is not None
        out = np.empty(self.gram.size)
        for lower, idx in zip(self.factors, self.gram.groups):
            # S⁻¹ = L⁻ᴴ L⁻¹, so diag(S⁻¹)_j is the squared norm of column j of L⁻¹
            inv_lower = scipy.linalg.solve_triangular(
                lower, np.eye(lower.shape[0]), lower=True, check_finite=False
            )
            out[idx] = np.sum(np.abs(inv_lower) ** 2, axis=0)
        return out

    def logdet(self) -> float:
        if self.factors is None:
            assert self.gram.diagonal is not None
            return float(np.sum(np.log(self.gram.diagonal)))
        return float(sum(2.0 * np.sum(np.log(np.real(np.diag(f)))) for f in self.factors))


def _smallest_pivot(block: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(block)[0])


def factorize_gram(gram: GramMatrix) -> GramFactor:
    if gram.structure is GramStructure.DIAGONAL:
        assert gram.diagonal is not None
        if not np.all(np.isfinite(gram.diagonal)) or np.any(gram.diagonal <= 0):
            pivot = float(np.min(gram.diagonal))
            raise ConditioningError(
                f"diagonal Gram is not positive definite: smallest pivot {pivot:.3e}",
                block=int(np.argmin(gram.diagonal)),
                smallest_pivot=pivot,
            )
        return GramFactor(gram)

    assert gram.blocks is not None
    factors = []
    for i, block in enumerate(gram.blocks):
        try:
            factors.append(scipy.linalg.cholesky(block, lower=True, check_finite=True))
        except (np.linalg.LinAlgError, ValueError) as e:
            pivot = _smallest_pivot(block) if np.all(np.isfinite(block)) else float("nan")
            raise ConditioningError(
                f"Gram block {i} ({gram.structure.value}) is not numerically positive definite:"
                f" smallest pivot {pivot:.3e}",
                block=i,
                smallest_pivot=pivot,
            ) from e
    return GramFactor(gram, factors)


def solve_gram(gram: GramMatrix, rhs: Any) -> np.ndarray:
    return factorize_gram(gram).solve(rhs)


def diag_of_gram_inverse(gram: GramMatrix) -> np.ndarray:
    return factorize_gram(gram).inverse_diag()


def gauss_logdet_quadform(
    dictionary: DictionaryKron, weights: Any, sigma2: float, z: Any
) -> Tuple[float, float]:
    """
    log det V and zᴴV⁻¹z for V = A Diag(w) Aᴴ + σ²I, without forming V.

    With S = (1/σ²)AᴴA + Diag(w)⁻¹ and b = Aᴴz:
        det V     = σ^(2MN) · det Diag(w) · det S          (Sylvester)
        V⁻¹       = I/σ² − A S⁻¹ Aᴴ / σ⁴                    (Woodbury)
        zᴴV⁻¹z    = (‖z‖² − bᴴ S⁻¹ b / σ²) / σ²
    """
    z = _check_length(z, dictionary.num_rows, "z")
    gram = build_gram(dictionary, weights, sigma2)
    factor = factorize_gram(gram)
    w = np.asarray(weights, dtype=float)

    logdet = dictionary.num_rows * np.log(gram.sigma2) + np.sum(np.log(w)) + factor.logdet()

    b = apply_dictionary_adjoint(dictionary, z)
    projected = np.real(np.vdot(b, factor.solve(b)))
    quadform = (np.real(np.vdot(z, z)) - projected / gram.sigma2) / gram.sigma2
    return float(logdet), float(quadform)
