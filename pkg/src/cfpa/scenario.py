"""Network deployments and spatial channel statistics.

A scenario is a random drop of L multi-antenna APs and K single-antenna
users on a square, with per-link large-scale gains (log-distance path loss)
and one-ring spatial covariance matrices for a half-wavelength ULA.
"""

import json
import math
from dataclasses import dataclass, field, asdict, replace

import numpy as np

# Thermal noise for 20 MHz bandwidth and 7 dB noise figure: -94 dBm in watts.
DEFAULT_NOISE_W = 10.0 ** (-94.0 / 10.0) * 1e-3
# Class-B amplifier efficiency ceiling.
ETA_CLASS_B = math.pi / 4.0

_MIN_HORIZONTAL_DIST_M = 5.0
_ONE_RING_QUAD_POINTS = 200
# Relative floor for acceptable negative eigenvalues in covariance factors.
PSD_TOL = 1e-10

SCENARIO_FORMAT_VERSION = 1


class CovarianceError(ValueError):
    """A spatial covariance is not PSD within tolerance."""


@dataclass
class ScenarioConfig:
    """Deployment geometry, physical constants, and simulation depth.

    Power quantities are in watts, distances in meters, angles in radians.
    """

    L: int = 25
    K: int = 8
    N: int = 4
    area_side: float = 1000.0
    ap_height: float = 10.0
    tau_p: int | None = None            # pilot length, defaults to K
    pilot_power: float = 0.1
    noise_ul: float = DEFAULT_NOISE_W
    noise_dl: float = DEFAULT_NOISE_W
    p_max: float = 1.0
    eta_max: float = ETA_CLASS_B
    eta: float | None = None            # defaults to eta_max
    angular_spread: float = math.radians(15.0)
    service_set_size: int | None = None  # defaults to min(K, tau_p)
    mc_realizations: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.tau_p is None:
            self.tau_p = self.K
        if self.eta is None:
            self.eta = self.eta_max
        if self.service_set_size is None:
            self.service_set_size = min(self.K, self.tau_p)
        checks = [
            (self.L >= 1, "L"),
            (self.N >= 1, "N"),
            (self.K >= 1, "K"),
            (self.tau_p >= self.K, "tau_p (orthogonal pilots need tau_p >= K)"),
            (0.0 < self.eta <= 1.0, "eta"),
            (0.0 < self.eta_max <= 1.0, "eta_max"),
            (self.p_max > 0.0, "p_max"),
            (self.noise_ul > 0.0, "noise_ul"),
            (self.noise_dl > 0.0, "noise_dl"),
            (self.pilot_power > 0.0, "pilot_power"),
            (1 <= self.service_set_size <= self.K, "service_set_size"),
            (self.area_side >= 0.0, "area_side"),
            (self.ap_height >= 0.0, "ap_height"),
            (self.angular_spread >= 0.0, "angular_spread"),
            (self.mc_realizations >= 1, "mc_realizations"),
        ]
        for ok, name in checks:
            if not ok:
                raise ValueError(f"invalid ScenarioConfig field: {name}")


@dataclass
class Scenario:
    config: ScenarioConfig
    ap_positions: np.ndarray      # (L, 2) meters
    user_positions: np.ndarray    # (K, 2) meters
    beta: np.ndarray              # (L, K) linear gains
    nominal_angles: np.ndarray    # (L, K) radians, AP -> user azimuth
    covariances: np.ndarray | None = field(default=None, repr=False)  # (L, K, N, N)


def path_loss_beta(distance_3d_m):
    """Log-distance path loss, linear gain: -30.5 - 36.7 log10(d) in dB."""
    return 10.0 ** ((-30.5 - 36.7 * np.log10(distance_3d_m)) / 10.0)


def generate_geometry(config):
    """Draw AP/user positions and per-link large-scale statistics.

    Pure function of (config.seed, config): both node sets are uniform on
    [0, area_side]^2, the horizontal distance is floored at 5 m, and the
    3-D distance includes the AP height. Covariances are left unset.
    """
    rng = np.random.default_rng(config.seed)
    ap = rng.uniform(0.0, config.area_side, size=(config.L, 2))
    ue = rng.uniform(0.0, config.area_side, size=(config.K, 2))
    delta = ue[None, :, :] - ap[:, None, :]           # (L, K, 2)
    horiz = np.hypot(delta[..., 0], delta[..., 1])
    horiz = np.maximum(horiz, _MIN_HORIZONTAL_DIST_M)
    dist = np.hypot(horiz, config.ap_height)
    beta = path_loss_beta(dist)
    angles = np.arctan2(delta[..., 1], delta[..., 0])
    return Scenario(config=config, ap_positions=ap, user_positions=ue,
                    beta=beta, nominal_angles=angles)


def one_ring_covariance(beta, angle, spread, N, n_quad=_ONE_RING_QUAD_POINTS):
    """One-ring covariance for a half-wavelength ULA.

    Entry (m, n) is beta / (2 spread) * integral of exp(j pi (m-n) sin(phi))
    over phi in [angle - spread, angle + spread], evaluated with an n_quad
    point midpoint rule. spread = 0 degenerates to the rank-one
    point-scatterer limit beta * a a^H with [a]_m = exp(j pi m sin(angle)).
    """
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    if N < 1:
        raise ValueError("N must be >= 1")
    if spread < 0.0:
        raise ValueError("spread must be >= 0")
    if spread == 0.0:
        a = np.exp(1j * np.pi * np.arange(N) * math.sin(angle))
        return beta * np.outer(a, a.conj())
    # midpoint nodes; the uniform weights make the diagonal exactly beta
    offsets = (np.arange(n_quad) + 0.5) / n_quad
    phi = angle - spread + 2.0 * spread * offsets
    sin_phi = np.sin(phi)
    r = np.empty(N, dtype=complex)
    for d in range(N):
        r[d] = beta * np.mean(np.exp(1j * np.pi * d * sin_phi))
    R = np.empty((N, N), dtype=complex)
    for m in range(N):
        for n in range(N):
            R[m, n] = r[m - n] if m >= n else r[n - m].conjugate()
    return R


def build_covariances(scenario):
    """Return a copy of the scenario with all L*K one-ring covariances filled."""
    cfg = scenario.config
    R = np.empty((cfg.L, cfg.K, cfg.N, cfg.N), dtype=complex)
    for l in range(cfg.L):
        for k in range(cfg.K):
            R[l, k] = one_ring_covariance(scenario.beta[l, k],
                                          scenario.nominal_angles[l, k],
                                          cfg.angular_spread, cfg.N)
    return replace(scenario, covariances=R)


def _covariance_sqrt(R, l, k):
    """Hermitian PSD square root with small negative eigenvalues clamped."""
    H = 0.5 * (R + R.conj().T)
    w, V = np.linalg.eigh(H)
    tr = float(np.trace(H).real)
    floor = -PSD_TOL * max(tr, 0.0) / H.shape[0]
    if w.min() < floor:
        raise CovarianceError(
            f"covariance for link (l={l}, k={k}) is not PSD within tolerance: "
            f"min eigenvalue {w.min():.3e}")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.conj().T


def _link_rng(seed, stream, l, k):
    # Per-link substreams keep each link's draw independent of L, K ordering.
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, l, k)))


def sample_channels(scenario, M, seed):
    """Draw M correlated Rayleigh realizations h = R^(1/2) g per link.

    Returns a complex (M, L, K, N) array. Substream seeding per (l, k) makes
    the batch for one link reproducible regardless of the other links, and
    identical across runs for a fixed seed.
    """
    if scenario.covariances is None:
        raise ValueError("scenario has no covariances; call build_covariances first")
    cfg = scenario.config
    H = np.empty((M, cfg.L, cfg.K, cfg.N), dtype=complex)
    for l in range(cfg.L):
        for k in range(cfg.K):
            A = _covariance_sqrt(scenario.covariances[l, k], l, k)
            rng = _link_rng(seed, 0, l, k)
            g = (rng.standard_normal((M, cfg.N))
                 + 1j * rng.standard_normal((M, cfg.N))) / math.sqrt(2.0)
            H[:, l, k, :] = g @ A.T
    return H


def sample_pilot_noise(scenario, M, seed):
    """CN(0, noise_ul I) pilot noise, (M, L, K, N), on its own substreams."""
    cfg = scenario.config
    sigma = math.sqrt(cfg.noise_ul)
    Np = np.empty((M, cfg.L, cfg.K, cfg.N), dtype=complex)
    for l in range(cfg.L):
        for k in range(cfg.K):
            rng = _link_rng(seed, 1, l, k)
            Np[:, l, k, :] = sigma * (rng.standard_normal((M, cfg.N))
                                      + 1j * rng.standard_normal((M, cfg.N))) / math.sqrt(2.0)
    return Np


# ---------------------------------------------------------------------------
# Serialization. Covariances are rebuilt from config + geometry on load.
# ---------------------------------------------------------------------------

def scenario_to_dict(scenario):
    return {
        "format_version": SCENARIO_FORMAT_VERSION,
        "config": asdict(scenario.config),
        "ap_positions": scenario.ap_positions.tolist(),
        "user_positions": scenario.user_positions.tolist(),
        "beta": scenario.beta.tolist(),
        "nominal_angles": scenario.nominal_angles.tolist(),
    }


def save_scenario(scenario, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_dict(scenario), fh, sort_keys=True)


def load_scenario(path, with_covariances=True):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != SCENARIO_FORMAT_VERSION:
        raise ValueError(f"unsupported scenario format_version: {doc.get('format_version')}")
    cfg = ScenarioConfig(**doc["config"])
    sc = Scenario(config=cfg,
                  ap_positions=np.asarray(doc["ap_positions"], dtype=float),
                  user_positions=np.asarray(doc["user_positions"], dtype=float),
                  beta=np.asarray(doc["beta"], dtype=float),
                  nominal_angles=np.asarray(doc["nominal_angles"], dtype=float))
    if with_covariances:
        sc = build_covariances(sc)
    return sc
