"""
Far-field sparse channel simulation for an M-antenna uniform linear array
serving K single-antenna users.

Each user sees a handful of scatterers clustered inside an angular sector;
every scatterer contributes one plane wave whose amplitude follows free-space
path loss. The channel is normalized so that ‖H‖²_F = M·K, which makes the
average per-entry channel energy 1 and lets the SNR fix the noise variance
directly: σ² = 10^(−SNR/10).

The estimators see the angular DFT with every column scaled to norm
`transform_gain`. The hyperpriors on w and τ are not scale invariant, so this
choice fixes how small a coefficient has to be before it is treated as
noise. With the default gain of 4 and 12 pilots, the per-coefficient noise
σ²/(N·gain²) at 0 dB is 0.0052, level with the τ-prior scale φ/(θ+2) of the
default hyperparameters.
"""

import dataclasses
import math
from dataclasses import dataclass
from typing import Any, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from kronsbl.errors import ParameterError, ShapeError
from kronsbl.numerics import DictionaryKron

SPEED_OF_LIGHT = 299_792_458.0

# Noise variance handed to the estimators when the observation is noiseless.
# The estimators need σ² > 0; this is far below any DFT Gram eigenvalue.
NOISELESS_SIGMA2 = 1e-8

# Column norm of the DFT dictionary handed to the estimators.
TRANSFORM_GAIN = 4.0

SWEEP_FIELDS = {
    "snr_db": "snr_db",
    "pilot_length": "pilot_length",
    "num_antennas": "num_antennas",
    "num_scatterers": "num_scatterers",
}


def noise_variance(snr_db: float) -> float:
    if snr_db == math.inf:
        return 0.0
    return float(10.0 ** (-snr_db / 10.0))


@dataclass(frozen=True)
class ChannelScenario:
    num_antennas: int
    num_users: int
    pilot_length: int
    snr_db: float
    num_scatterers: int = 3
    # None means Q = M
    transform_size: Optional[int] = None
    carrier_freq: float = 30e9
    range_min: float = 100.0
    range_max: float = 500.0
    angular_spread: float = math.pi / 6
    seed: int = 0
    transform_gain: float = TRANSFORM_GAIN

    def __post_init__(self):
        for name in ("num_antennas", "num_users", "pilot_length", "num_scatterers"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.transform_size is not None and self.transform_size < 1:
            raise ParameterError(f"transform_size must be at least 1, got {self.transform_size}")
        if self.num_users > self.pilot_length:
            raise ParameterError(
                f"pilot rows exceed pilot length: K={self.num_users} > N={self.pilot_length}"
            )
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ParameterError(f"snr_db must be a number or +inf, got {self.snr_db}")
        if not self.carrier_freq > 0:
            raise ParameterError(f"carrier_freq must be positive, got {self.carrier_freq}")
        if not 0 < self.range_min < self.range_max:
            raise ParameterError(
                f"need 0 < range_min < range_max, got {self.range_min}, {self.range_max}"
            )
        if not 0 <= self.angular_spread < math.pi:
            raise ParameterError(f"angular_spread must be in [0, π), got {self.angular_spread}")
        if self.seed < 0:
            raise ParameterError(f"seed must be non-negative, got {self.seed}")
        if not (math.isfinite(self.transform_gain) and self.transform_gain > 0):
            raise ParameterError(f"transform_gain must be positive, got {self.transform_gain}")

    @property
    def q(self) -> int:
        return self.transform_size if self.transform_size is not None else self.num_antennas

    @property
    def sigma2(self) -> float:
        return noise_variance(self.snr_db)

    @property
    def estimation_sigma2(self) -> float:
        """The noise variance the estimators are run with."""
        return self.sigma2 if self.sigma2 > 0 else NOISELESS_SIGMA2

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_freq

    def with_value(self, variable: str, value: Any) -> "ChannelScenario":
        """Copy of the scenario with one sweep variable replaced."""
        try:
            field = SWEEP_FIELDS[variable]
        except KeyError:
            raise ParameterError(
                f"unknown sweep variable '{variable}', expected one of {sorted(SWEEP_FIELDS)}"
            ) from None
        if field != "snr_db":
            value = int(value)
        return dataclasses.replace(self, **{field: value})


class ScatterPath(NamedTuple):
    range_m: float
    angle: float
    gain: complex


@dataclass(frozen=True)
class ScattererSet:
    """Per-user scattering geometry. `centers[k]` is the sector centre of user k."""

    paths: Tuple[Tuple[ScatterPath, ...], ...]
    centers: Tuple[float, ...] = ()

    @property
    def num_users(self) -> int:
        return len(self.paths)


@dataclass(frozen=True)
class ChannelMatrix:
    H: np.ndarray

    @property
    def num_antennas(self) -> int:
        return int(self.H.shape[0])

    @property
    def num_users(self) -> int:
        return int(self.H.shape[1])

    def energy(self) -> float:
        return float(np.sum(np.abs(self.H) ** 2))


@dataclass(frozen=True)
class Observation:
    Z: np.ndarray
    z: np.ndarray
    sigma2: float


def dft_pilot(num_users: int, pilot_length: int) -> np.ndarray:
    """First K rows of the N-point DFT matrix: P[k, n] = exp(−2πi·k·n/N)."""
    if num_users < 1 or pilot_length < 1:
        raise ParameterError(f"need K, N >= 1, got K={num_users}, N={pilot_length}")
    if num_users > pilot_length:
        raise ParameterError(
            f"pilot rows exceed pilot length: K={num_users} > N={pilot_length}"
        )
    kn = np.outer(np.arange(num_users), np.arange(pilot_length))
    return np.exp(-2j * np.pi * kn / pilot_length)


def dft_transform(num_antennas: int, transform_size: Optional[int] = None) -> np.ndarray:
    """
    M x Q unnormalized DFT dictionary, F[m, q] = exp(−2πi·m·q/Q).

    With Q = M this is the square DFT matrix and FᴴF = M·I. Q > M gives an
    oversampled angular grid whose Gram is no longer diagonal.
    """
    q = transform_size if transform_size is not None else num_antennas
    if num_antennas < 1 or q < 1:
        raise ParameterError(f"need M, Q >= 1, got M={num_antennas}, Q={q}")
    mq = np.outer(np.arange(num_antennas), np.arange(q))
    return np.exp(-2j * np.pi * mq / q)


def dictionary_transform(
    num_antennas: int, transform_size: Optional[int] = None, gain: float = TRANSFORM_GAIN
) -> np.ndarray:
    """dft_transform with every column rescaled to norm `gain`; FᴴF = gain²·I when Q = M."""
    return dft_transform(num_antennas, transform_size) * (gain / np.sqrt(num_antennas))


def array_response(num_antennas: int, angle: float) -> np.ndarray:
    """Half-wavelength ULA steering vector a_m = exp(iπ·m·sin(angle))."""
    return np.exp(1j * np.pi * np.arange(num_antennas) * np.sin(angle))


def build_dictionary(scenario: ChannelScenario) -> DictionaryKron:
    return DictionaryKron(
        dft_pilot(scenario.num_users, scenario.pilot_length),
        dictionary_transform(scenario.num_antennas, scenario.q, scenario.transform_gain),
    )


def channel_from_scatterers(
    num_antennas: int,
    scatterers: ScattererSet,
    carrier_freq: float = 30e9,
    normalize: bool = True,
) -> ChannelMatrix:
    """Sum the plane waves of every user's paths and scale to ‖H‖²_F = M·K."""
    wavelength = SPEED_OF_LIGHT / carrier_freq
    H = np.zeros((num_antennas, scatterers.num_users), dtype=complex)
    for k, paths in enumerate(scatterers.paths):
        for path in paths:
            amplitude = wavelength / (4.0 * np.pi * path.range_m)
            H[:, k] += path.gain * amplitude * array_response(num_antennas, path.angle)

    if normalize:
        norm = np.linalg.norm(H)
        if norm == 0:
            raise ParameterError("cannot normalize an all-zero channel")
        H *= np.sqrt(num_antennas * scatterers.num_users) / norm
    H.setflags(write=False)
    return ChannelMatrix(H)


def draw_scatterers(scenario: ChannelScenario, rng: np.random.Generator) -> ScattererSet:
    half = scenario.angular_spread / 2.0
    paths = []
    centers = []
    for _ in range(scenario.num_users):
        center = float(rng.uniform(-np.pi / 2 + half, np.pi / 2 - half))
        angles = center + rng.uniform(-half, half, size=scenario.num_scatterers)
        ranges = rng.uniform(scenario.range_min, scenario.range_max, size=scenario.num_scatterers)
        gains = (
            rng.standard_normal(scenario.num_scatterers)
            + 1j * rng.standard_normal(scenario.num_scatterers)
        ) / np.sqrt(2.0)
        centers.append(center)
        paths.append(
            tuple(
                ScatterPath(float(r), float(a), complex(g))
                for r, a, g in zip(ranges, angles, gains)
            )
        )
    return ScattererSet(tuple(paths), tuple(centers))


def generate_channel(
    scenario: ChannelScenario, rng: np.random.Generator
) -> Tuple[ChannelMatrix, ScattererSet]:
    scatterers = draw_scatterers(scenario, rng)
    channel = channel_from_scatterers(scenario.num_antennas, scatterers, scenario.carrier_freq)
    return channel, scatterers


def observe(
    channel: Any, pilot: Any, snr_db: float, rng: np.random.Generator
) -> Observation:
    """Z = HP + E with E i.i.d. CN(0, σ²). snr_db = inf gives a noiseless observation."""
    H = channel.H if isinstance(channel, ChannelMatrix) else np.asarray(channel, dtype=complex)
    P = np.asarray(pilot, dtype=complex)
    if H.ndim != 2 or P.ndim != 2 or H.shape[1] != P.shape[0]:
        raise ShapeError(f"channel {H.shape} and pilot {P.shape} are not conformable")
    sigma2 = noise_variance(snr_db)
    Z = H @ P
    if sigma2 > 0:
        noise = rng.standard_normal(Z.shape) + 1j * rng.standard_normal(Z.shape)
        Z = Z + np.sqrt(sigma2 / 2.0) * noise
    return Observation(Z, Z.reshape(-1, order="F"), sigma2)


def reconstruct_channel(
    u_hat: Any, transform: Any, num_antennas: int, num_users: int
) -> ChannelMatrix:
    """H = F·U with U the Q x K column-major devectorization of u_hat."""
    F = np.asarray(transform, dtype=complex)
    u_hat = np.asarray(u_hat, dtype=complex)
    if F.ndim != 2 or F.shape[0] != num_antennas:
        raise ShapeError(f"transform must have {num_antennas} rows, got shape {F.shape}")
    q = F.shape[1]
    if u_hat.shape != (q * num_users,):
        raise ShapeError(f"u_hat must have length {q * num_users}, got shape {u_hat.shape}")
    return ChannelMatrix(F @ u_hat.reshape((q, num_users), order="F"))


def trial_rng(seed: int, value_index: int, trial: int) -> np.random.Generator:
    """Independent stream per (sweep value, trial); identical across runs and workers."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(value_index, trial)))


def sector_bounds(scenario: ChannelScenario, center: float) -> Sequence[float]:
    half = scenario.angular_spread / 2.0
    return (center - half, center + half)
