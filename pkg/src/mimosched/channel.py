"""Channel processes and channel state information (CSI) models.

Two channel generators are provided: spatially white Rayleigh block fading
(independent across slots) and a sum-of-sinusoids spatial channel model
(SCM) whose coefficients evolve continuously at the symbol rate.  CSI is
derived from the true channel by one of three corruption models (perfect,
additive Gaussian error of a given variance, or a completely uninformative
estimate) or, for SCM runs, from pilot observations fed to a predictor.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InsufficientDataError

__all__ = [
    "SPEED_OF_LIGHT",
    "ChannelMatrix",
    "CsiModel",
    "CsiMatrix",
    "ScmUserParams",
    "PilotConfig",
    "gen_rayleigh_slot",
    "scm_doppler",
    "scm_sample",
    "ScmTrajectory",
    "apply_csi_model",
    "pilot_observations",
    "complex_normal",
]

SPEED_OF_LIGHT = 3.0e8  # m/s

#: users whose Gaussian CSI error variance stays at or below this are
#: treated as predictable unless the model says otherwise
DEFAULT_PREDICTABLE_SIGMA2 = 0.1


def complex_normal(rng, shape, variance=1.0):
    """Circularly-symmetric complex Gaussian draws, ``variance`` per entry."""
    scale = np.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


@dataclass
class ChannelMatrix:
    """True channel: M antennas by K users, one slot."""

    entries: np.ndarray  # (M, K) complex
    slot: int = 0

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=complex)
        if self.entries.ndim != 2:
            raise ConfigError("channel entries must be a 2-D (M, K) array")
        if not np.all(np.isfinite(self.entries)):
            raise ConfigError("channel entries must be finite")

    @property
    def n_antennas(self):
        return self.entries.shape[0]

    @property
    def n_users(self):
        return self.entries.shape[1]

    def user(self, k):
        return self.entries[:, k]

    def gains(self):
        """Per-user squared channel norms |h_k|^2, shape (K,)."""
        return np.einsum("mk,mk->k", self.entries.conj(), self.entries).real


@dataclass(frozen=True)
class CsiModel:
    """Per-user CSI corruption model.

    kind is one of ``perfect``, ``gaussian`` or ``unknown``.  For
    ``gaussian`` the error variance per complex component must lie in
    [0, 1]: estimates and errors are generated jointly so that the true
    channel keeps unit variance (estimate ~ CN(0, (1-s2) I), error
    ~ CN(0, s2 I), independent).  ``unknown`` reports an isotropic
    estimate carrying no information, with variance pinned to 1.
    """

    kind: str
    sigma2: float = 0.0
    predictable: bool | None = None  # None -> default threshold rule

    def __post_init__(self):
        if self.kind not in ("perfect", "gaussian", "unknown"):
            raise ConfigError(f"unknown CSI model kind {self.kind!r}")
        if self.kind == "gaussian" and not 0.0 <= self.sigma2 <= 1.0:
            raise ConfigError(
                "gaussian CSI error variance must be in [0, 1] under the "
                f"joint-generation convention, got {self.sigma2}"
            )

    @classmethod
    def perfect(cls):
        return cls("perfect", 0.0)

    @classmethod
    def gaussian(cls, sigma2):
        return cls("gaussian", float(sigma2))

    @classmethod
    def unknown(cls):
        return cls("unknown", 1.0)

    @property
    def effective_sigma2(self):
        if self.kind == "perfect":
            return 0.0
        if self.kind == "unknown":
            return 1.0
        return self.sigma2

    @property
    def is_predictable(self):
        if self.predictable is not None:
            return self.predictable
        if self.kind == "unknown":
            return False
        return self.effective_sigma2 <= DEFAULT_PREDICTABLE_SIGMA2


@dataclass
class CsiMatrix:
    """Transmitter-side channel estimate plus per-user quality metadata."""

    entries: np.ndarray  # (M, K) complex
    sigma2: np.ndarray  # (K,) error variance per complex component
    predictable: np.ndarray  # (K,) bool
    kinds: np.ndarray | None = None  # (K,) model kind tags, when known

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=complex)
        self.sigma2 = np.asarray(self.sigma2, dtype=float)
        self.predictable = np.asarray(self.predictable, dtype=bool)
        if np.any(self.sigma2 < 0):
            raise ConfigError("CSI error variances must be non-negative")
        K = self.entries.shape[1]
        if self.sigma2.shape[0] != K or self.predictable.shape[0] != K:
            raise ConfigError("per-user metadata length must match user count")
        if self.kinds is not None:
            self.kinds = np.asarray(self.kinds, dtype=object)
            if self.kinds.shape[0] != K:
                raise ConfigError("per-user metadata length must match user count")

    @property
    def n_users(self):
        return self.entries.shape[1]

    def user(self, k):
        return self.entries[:, k]


def gen_rayleigh_slot(rng, M, K, slot=0) -> ChannelMatrix:
    """One slot of spatially white Rayleigh fading, CN(0, 1) per entry."""
    if M < 1 or K < 1:
        raise ConfigError(f"channel dimensions must be positive, got M={M}, K={K}")
    return ChannelMatrix(complex_normal(rng, (M, K)), slot=slot)


# ---------------------------------------------------------------------------
# Sum-of-sinusoids SCM
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScmUserParams:
    """Ray parameters for one user of the sum-of-sinusoids channel.

    Each of the ``eta`` impinging wavefronts has a complex amplitude, an
    angle of arrival (radians) and, through the user's speed and travel
    azimuth, a Doppler shift.  ``antenna_spacing_wavelengths`` sets the
    uniform-linear-array phase progression across antennas.
    ``min_scatter_distance`` is carried for config fidelity only; it does
    not enter the sum-of-sinusoids evaluation.
    """

    amplitudes: tuple  # complex, length eta
    aoas: tuple  # radians, length eta
    travel_azimuth: float  # radians
    speed: float  # m/s
    carrier: float  # Hz
    symbol_interval: float  # s
    antenna_spacing_wavelengths: float = 0.5
    min_scatter_distance: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "amplitudes", tuple(complex(a) for a in self.amplitudes))
        object.__setattr__(self, "aoas", tuple(float(a) for a in self.aoas))
        if len(self.amplitudes) < 1:
            raise ConfigError("need at least one ray")
        if len(self.amplitudes) != len(self.aoas):
            raise ConfigError("amplitudes and AoAs must have equal length")
        if self.speed < 0:
            raise ConfigError("speed must be non-negative")
        if self.carrier <= 0 or self.symbol_interval <= 0:
            raise ConfigError("carrier and symbol interval must be positive")

    @property
    def eta(self):
        return len(self.amplitudes)

    @classmethod
    def random_amplitudes(cls, rng, aoas, travel_azimuth, speed, carrier,
                          symbol_interval, **kw):
        """Equal-power rays with i.i.d. uniform phases, unit total power."""
        aoas = tuple(aoas)
        eta = len(aoas)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=eta)
        amps = np.exp(1j * phases) / np.sqrt(eta)
        return cls(tuple(amps), aoas, travel_azimuth, speed, carrier,
                   symbol_interval, **kw)


def scm_doppler(params: ScmUserParams) -> np.ndarray:
    """Per-ray Doppler shifts in cycles per symbol."""
    aoas = np.asarray(params.aoas)
    scale = params.carrier * params.speed / SPEED_OF_LIGHT * params.symbol_interval
    return scale * np.cos(aoas - params.travel_azimuth)


def scm_sample(params: ScmUserParams, m, i):
    """Channel coefficient of antenna ``m`` at symbol index ``i``.

    Deterministic given the parameters; ``i`` may be an array.  Antenna
    ``m`` multiplies each ray by the uniform-linear-array phase
    ``exp(j 2 pi m d sin(theta_r))`` with ``d`` in wavelengths.
    """
    i = np.asarray(i)
    zeta = scm_doppler(params)
    amps = np.asarray(params.amplitudes)
    aoas = np.asarray(params.aoas)
    array_phase = np.exp(2j * np.pi * m * params.antenna_spacing_wavelengths * np.sin(aoas))
    # (eta,) x (..., eta) summed over rays
    rotation = np.exp(2j * np.pi * np.multiply.outer(i, zeta))
    return rotation @ (amps * array_phase)


class ScmTrajectory:
    """Vectorised SCM evaluator for a set of users on an M-antenna array.

    ``at_symbol(i)`` returns the full (M, K) channel matrix at symbol
    index ``i`` and agrees with :func:`scm_sample` entry by entry.
    """

    def __init__(self, users: list[ScmUserParams], n_antennas: int):
        self.users = list(users)
        self.n_antennas = int(n_antennas)
        K = len(self.users)
        eta = max(u.eta for u in self.users)
        # zero-padded per-user ray tables so a single einsum covers all users
        self._zeta = np.zeros((K, eta))
        self._steer = np.zeros((K, self.n_antennas, eta), dtype=complex)
        for k, u in enumerate(self.users):
            zeta = scm_doppler(u)
            self._zeta[k, : u.eta] = zeta
            phases = np.exp(
                2j
                * np.pi
                * u.antenna_spacing_wavelengths
                * np.outer(np.arange(self.n_antennas), np.sin(np.asarray(u.aoas)))
            )
            self._steer[k, :, : u.eta] = phases * np.asarray(u.amplitudes)

    def at_symbol(self, i) -> np.ndarray:
        rot = np.exp(2j * np.pi * i * self._zeta)  # (K, eta)
        return np.einsum("kmr,kr->mk", self._steer, rot)

    def at_symbols(self, idx) -> np.ndarray:
        """Stacked evaluation over an index array, shape (len(idx), M, K)."""
        idx = np.asarray(idx, dtype=float)
        rot = np.exp(2j * np.pi * np.multiply.outer(idx, self._zeta))  # (B, K, eta)
        return np.einsum("kmr,bkr->bmk", self._steer, rot)


# ---------------------------------------------------------------------------
# CSI generation
# ---------------------------------------------------------------------------

def apply_csi_model(H: ChannelMatrix, models, rng) -> CsiMatrix:
    """Produce the transmitter's CSI for one slot.

    ``models`` holds one :class:`CsiModel` per user.  For the Gaussian
    model the error is drawn conditionally on the given true channel,
    ``e | h ~ CN(s2 h, s2 (1 - s2) I)``, which reproduces the joint law
    estimate ~ CN(0, (1-s2) I), error ~ CN(0, s2 I) with the two
    independent.  Unknown users get a fresh isotropic estimate that is
    independent of the true channel.
    """
    M, K = H.entries.shape
    if len(models) != K:
        raise ConfigError(f"need one CSI model per user ({K}), got {len(models)}")
    est = H.entries.copy()
    sigma2 = np.zeros(K)
    predictable = np.ones(K, dtype=bool)
    kinds = np.empty(K, dtype=object)
    # one matrix of unit-variance noise, consumed column-wise, keeps the
    # draw order independent of the model mix
    noise = complex_normal(rng, (M, K))
    for k, model in enumerate(models):
        sigma2[k] = model.effective_sigma2
        predictable[k] = model.is_predictable
        kinds[k] = model.kind
        if model.kind == "perfect":
            continue
        if model.kind == "unknown":
            est[:, k] = noise[:, k]
            continue
        s2 = model.sigma2
        err = s2 * H.entries[:, k] + np.sqrt(s2 * (1.0 - s2)) * noise[:, k]
        est[:, k] = H.entries[:, k] - err
    return CsiMatrix(est, sigma2, predictable, kinds)


# ---------------------------------------------------------------------------
# Pilots
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PilotConfig:
    """Downlink pilot pattern: ``count`` pilots, one every ``spacing`` symbols."""

    count: int
    spacing: int
    noise_variance: float = 0.0

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("pilot count must be >= 1")
        if self.spacing < 1:
            raise ConfigError("pilot spacing must be >= 1")
        if self.noise_variance < 0:
            raise ConfigError("pilot noise variance must be non-negative")


def pilot_observations(trajectory, cfg: PilotConfig, rng) -> np.ndarray:
    """Noisy samples of a gain trajectory at the pilot instants.

    ``trajectory`` has time on its last axis; pilots sit at symbol indices
    0, T, 2T, ..., (N-1) T.  Observation noise is i.i.d. CN(0, variance).
    """
    trajectory = np.asarray(trajectory)
    needed = (cfg.count - 1) * cfg.spacing + 1
    if trajectory.shape[-1] < needed:
        raise InsufficientDataError(
            f"trajectory of length {trajectory.shape[-1]} cannot cover "
            f"{cfg.count} pilots spaced {cfg.spacing} symbols apart"
        )
    samples = trajectory[..., :: cfg.spacing][..., : cfg.count]
    if cfg.noise_variance > 0:
        samples = samples + complex_normal(rng, samples.shape, cfg.noise_variance)
    return samples
