"""The stacked power allocation problem.

Variable layout: the flat vector x has x[k * L + l] = rho_lk (amplitude in
sqrt-watts assigned by AP l to user k), so x.reshape(K, L) has one row per
user. AP l's coefficients are the strided column rho[:, l].

Per user k the SINR is (b_k . rho_k)^2 / (x^T C_k x - (b_k . rho_k)^2 +
sigma_dl2) with C_k the block-diagonal matrix of the L x L blocks C[k, i];
the cone form of the SINR constraint is

    g_k(x) = sqrt(x^T C_k x + sigma_dl2) - sqrt((1+t_k)/t_k) b_k . rho_k <= 0

for target t_k. Consumed power at AP l is P_tx/eta for an ideal amplifier
and sqrt(P_tx * p_max)/eta_max for the variable-efficiency model.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .scenario import ETA_CLASS_B

SQRT_BLOCK_TOL = 1e-8


@dataclass
class PowerAllocation:
    """Stacked nonnegative amplitude coefficients."""

    x: np.ndarray
    K: int
    L: int

    @classmethod
    def from_rho(cls, rho):
        rho = np.asarray(rho, dtype=float)
        K, L = rho.shape
        return cls(x=rho.reshape(-1).copy(), K=K, L=L)

    @property
    def rho(self):
        return self.x.reshape(self.K, self.L)


@dataclass
class ProblemData:
    K: int
    L: int
    b: np.ndarray                    # (K, L)
    C: np.ndarray                    # (K, K, L, L)
    sigma_dl2: float
    gamma_bar: np.ndarray            # (K,) linear SINR targets
    p_max: float
    eta_max: float
    eta: float
    _sqrt_blocks: np.ndarray | None = field(default=None, repr=False)

    _s_factor: np.ndarray | None = field(default=None, repr=False)

    @property
    def sigma_dl(self):
        return float(np.sqrt(self.sigma_dl2))

    @property
    def s_factor(self):
        """sqrt((1 + target)/target) per user."""
        if self._s_factor is None:
            self._s_factor = np.sqrt((1.0 + self.gamma_bar) / self.gamma_bar)
        return self._s_factor

    @property
    def cap(self):
        return float(np.sqrt(self.p_max))

    @property
    def sqrt_blocks(self):
        """Symmetric PSD square roots of every block; computed on demand."""
        if self._sqrt_blocks is None:
            S = np.empty_like(self.C)
            for k in range(self.K):
                for i in range(self.K):
                    S[k, i] = _sym_sqrt(self.C[k, i])
            self._sqrt_blocks = S
        return self._sqrt_blocks

    def with_targets(self, se_targets=None, sinr_targets=None):
        """Copy sharing the statistics arrays but with new SINR targets."""
        gamma = _targets_to_gamma(self.K, se_targets, sinr_targets)
        return ProblemData(K=self.K, L=self.L, b=self.b, C=self.C,
                           sigma_dl2=self.sigma_dl2, gamma_bar=gamma,
                           p_max=self.p_max, eta_max=self.eta_max, eta=self.eta,
                           _sqrt_blocks=self._sqrt_blocks)


def _sym_sqrt(block):
    w, V = np.linalg.eigh(0.5 * (block + block.T))
    S = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
    S = 0.5 * (S + S.T)
    resid = np.linalg.norm(S @ S - block) / max(np.linalg.norm(block), np.finfo(float).tiny)
    if resid > SQRT_BLOCK_TOL:
        raise ValueError(f"square root residual {resid:.3e} exceeds tolerance")
    return S


def _targets_to_gamma(K, se_targets, sinr_targets):
    if (se_targets is None) == (sinr_targets is None):
        raise ValueError("exactly one of se_targets / sinr_targets is required")
    if se_targets is not None:
        se = np.broadcast_to(np.asarray(se_targets, dtype=float), (K,))
        gamma = 2.0 ** se - 1.0
    else:
        gamma = np.broadcast_to(np.asarray(sinr_targets, dtype=float), (K,)).copy()
    gamma = np.asarray(gamma, dtype=float).copy()
    if np.any(gamma <= 0.0):
        raise ValueError("SINR targets must be positive")
    return gamma


def assemble(stats, se_targets=None, sinr_targets=None, p_max=1.0,
             eta_max=ETA_CLASS_B, eta=None):
    """Build ProblemData from effective statistics and per-user targets.

    Targets given as spectral efficiencies convert via 2^SE - 1. Blocks are
    validated to be PSD within tolerance (tiny negative eigenvalues are
    clamped); a violating block is rejected with its (k, i) id.
    """
    if p_max <= 0.0:
        raise ValueError("p_max must be positive")
    eta = eta_max if eta is None else eta
    gamma = _targets_to_gamma(stats.K, se_targets, sinr_targets)
    C = np.ascontiguousarray(np.asarray(stats.C, dtype=float))
    b = np.ascontiguousarray(np.asarray(stats.b, dtype=float))
    for k in range(stats.K):
        for i in range(stats.K):
            block = C[k, i]
            w = np.linalg.eigvalsh(0.5 * (block + block.T))
            tr = max(float(np.trace(block)), 0.0)
            floor = -1e-10 * (tr / stats.L if tr > 0.0 else 1.0)
            if w.min() < floor:
                raise ValueError(f"statistics block ({k}, {i}) is not PSD: "
                                 f"min eigenvalue {w.min():.3e}")
            if w.min() < 0.0:
                ev, V = np.linalg.eigh(0.5 * (block + block.T))
                fixed = (V * np.clip(ev, 0.0, None)) @ V.T
                C[k, i] = 0.5 * (fixed + fixed.T)
    return ProblemData(K=stats.K, L=stats.L, b=b, C=C,
                       sigma_dl2=float(stats.sigma_dl2), gamma_bar=gamma,
                       p_max=float(p_max), eta_max=float(eta_max), eta=float(eta))


def _as_rho(x, data):
    if isinstance(x, PowerAllocation):
        return x.rho
    rho = np.asarray(x, dtype=float)
    if rho.ndim == 1:
        rho = rho.reshape(data.K, data.L)
    return rho


def gather_ap(x, l, data=None, K=None, L=None):
    """AP l's coefficients (rho_l1 .. rho_lK) as a strided gather."""
    if data is not None:
        K, L = data.K, data.L
    if isinstance(x, PowerAllocation):
        K, L = x.K, x.L
        rho = x.rho
    else:
        rho = np.asarray(x, dtype=float).reshape(K, L)
    if not 0 <= l < L:
        raise IndexError(f"AP index {l} out of range [0, {L})")
    return rho[:, l].copy()


def transmit_powers(x, data):
    rho = _as_rho(x, data)
    return np.einsum("kl,kl->l", rho, rho)


def transmit_power(x, l, data):
    return float(transmit_powers(x, data)[l])


def consumed_power(x, model, data):
    """Per-AP and total consumed power in watts under the requested model."""
    ptx = transmit_powers(x, data)
    if model == "ideal":
        per_ap = ptx / data.eta
    elif model == "non-linear":
        per_ap = np.sqrt(ptx * data.p_max) / data.eta_max
    else:
        raise ValueError(f"unknown power model: {model!r}")
    return per_ap, float(per_ap.sum())


def _signal_and_quad(rho, data):
    q = kernels.quad_forms(data.C, np.ascontiguousarray(rho))
    bx = np.einsum("kl,kl->k", data.b, rho)
    return q, bx


def sinr(x, data):
    """Achieved per-user SINR (linear)."""
    rho = _as_rho(x, data)
    q, bx = _signal_and_quad(rho, data)
    denom = q - bx * bx + data.sigma_dl2
    if np.any(denom <= 0.0):
        raise ValueError("nonpositive SINR denominator; statistics are inconsistent")
    return (bx * bx) / denom

def constraint_values(x, data):
    """g_k(x) for all users, in sqrt-watts; feasible iff <= 0."""
    rho = _as_rho(x, data)
    q, bx = _signal_and_quad(rho, data)
    return np.sqrt(q + data.sigma_dl2) - data.s_factor * bx


def constraint_g(x, k, data):
    return float(constraint_values(x, data)[k])


def penalty_terms(x, data):
    """Squared hinge of each constraint: [g_k]_+^2."""
    g = constraint_values(x, data)
    return np.maximum(g, 0.0) ** 2


def smoothed_power_total(rho, data, model, mu_s):
    norms = np.sqrt(np.einsum("kl,kl->l", rho, rho))
    if model == "ideal":
        return float((norms * norms).sum() / data.eta)
    psi, _ = kernels.smoothed_norm(norms, mu_s)
    return float((data.cap / data.eta_max) * psi.sum())


def penalized_cost(x, lam, model, data, mu_s=1e-7, objective_weight=1.0):
    """Smoothed consumed power plus lam times the sum of hinge penalties.

    The non-linear power term uses the same smoothing as the solver gradient
    so cost and gradient stay consistent.
    """
    rho = _as_rho(x, data)
    q, bx = _signal_and_quad(rho, data)
    g = np.sqrt(q + data.sigma_dl2) - data.s_factor * bx
    pen = float((np.maximum(g, 0.0) ** 2).sum())
    return objective_weight * smoothed_power_total(rho, data, model, mu_s) + lam * pen


def relative_saving(x_ideal_opt, x_nl_opt, data):
    """Relative consumed-power saving of the amplifier-aware allocation.

    Both allocations are costed under the (unsmoothed) non-linear model; the
    reference is the allocation optimized for the ideal model.
    """
    _, ref = consumed_power(x_ideal_opt, "non-linear", data)
    _, opt = consumed_power(x_nl_opt, "non-linear", data)
    if ref == 0.0:
        raise ValueError("relative saving undefined: reference consumed power is zero")
    return (ref - opt) / ref
