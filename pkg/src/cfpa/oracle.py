"""Independent small-scale references for the solver.

These are deliberately simple: an algebraic closed form for the single
AP / single user problem, an exhaustive lattice scan for instances with at
most six coefficients, a feasibility checker, and a max-min SINR bisection
whose feasibility probe reuses the penalty machinery with the power
objective switched off.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .problem import PowerAllocation, consumed_power, constraint_values, transmit_powers
from .solver import SolverOptions, penalty_minimize, project, feasibility_options

GRID_DIM_LIMIT = 6
# Practical cap on lattice sizes so a typo cannot start a multi-day scan.
GRID_POINT_LIMIT = 1 << 33


@dataclass
class OracleReport:
    x_best: PowerAllocation
    objective: float
    feasible: bool
    resolution: float
    evaluations: int


def single_link_closed_form(data, model="non-linear"):
    """Exact solution for K = L = 1.

    Setting the scalar SINR to its target gives rho^2 = t * sigma^2 /
    (b^2 - t (c - b^2)); the instance is feasible iff that denominator is
    positive and rho^2 fits under the cap.
    """
    if data.K != 1 or data.L != 1:
        raise ValueError("closed form requires K = L = 1")
    b = float(data.b[0, 0])
    c = float(data.C[0, 0, 0, 0])
    t = float(data.gamma_bar[0])
    if b <= 0.0:
        raise ValueError("closed form requires b > 0")
    denom = b * b - t * (c - b * b)
    if denom <= 0.0:
        return OracleReport(x_best=PowerAllocation.from_rho(np.zeros((1, 1))),
                            objective=math.inf, feasible=False,
                            resolution=0.0, evaluations=1)
    rho_sq = t * data.sigma_dl2 / denom
    if rho_sq > data.p_max:
        return OracleReport(x_best=PowerAllocation.from_rho(np.zeros((1, 1))),
                            objective=math.inf, feasible=False,
                            resolution=0.0, evaluations=1)
    alloc = PowerAllocation.from_rho(np.array([[math.sqrt(rho_sq)]]))
    _, total = consumed_power(alloc, model, data)
    return OracleReport(x_best=alloc, objective=total, feasible=True,
                        resolution=0.0, evaluations=1)


def _build_grid(cap, resolution):
    n = int(math.floor(cap / resolution))
    grid = np.minimum(np.arange(n + 1, dtype=float) * resolution, cap)
    if grid[-1] < cap:
        grid = np.append(grid, cap)
    return grid


def grid_search(data, resolution, model="non-linear"):
    """Exhaustive scan of the lattice {0, resolution, ..., cap}^(K*L).

    Every lattice point is clamped per AP onto the cap ball before the
    constraint test, so boundary optima stay reachable. Ties resolve to the
    lexicographically smallest lattice point. Only tiny instances are
    accepted; the scan really does visit every point.
    """
    if resolution <= 0.0:
        raise ValueError("resolution must be positive")
    D = data.K * data.L
    if D > GRID_DIM_LIMIT:
        raise ValueError(f"grid search limited to K*L <= {GRID_DIM_LIMIT}, got {D}")
    grid = _build_grid(data.cap, resolution)
    if len(grid) ** D > GRID_POINT_LIMIT:
        raise ValueError("lattice too large; coarsen the resolution")
    nl = model == "non-linear"
    kappa = data.cap / data.eta_max
    _, code, total = kernels.grid_scan(data.C, data.b, data.s_factor,
                                       data.sigma_dl2, grid, data.K, data.L,
                                       data.cap, nl, kappa, 1.0 / data.eta)
    if code < 0:
        return OracleReport(x_best=PowerAllocation.from_rho(np.zeros((data.K, data.L))),
                            objective=math.inf, feasible=False,
                            resolution=resolution, evaluations=total)
    G = len(grid)
    idx = np.zeros(D, dtype=np.int64)
    for d in range(D - 1, -1, -1):
        idx[d] = code % G
        code //= G
    rho = project(grid[idx].reshape(data.K, data.L), data)
    alloc = PowerAllocation.from_rho(rho)
    _, total_power = consumed_power(alloc, model, data)
    return OracleReport(x_best=alloc, objective=total_power, feasible=True,
                        resolution=resolution, evaluations=total)


@dataclass
class FeasibilityReport:
    user_ok: np.ndarray     # (K,) bool
    margins: np.ndarray     # (K,) g_k values
    ap_ok: np.ndarray       # (L,) bool
    ap_norms: np.ndarray    # (L,)

    @property
    def all_ok(self):
        return bool(np.all(self.user_ok) and np.all(self.ap_ok))


def check_feasibility(x, data, tol=0.0):
    """Scale-free constraint check for an allocation.

    Users pass when g_k <= tol * sqrt(x^T C_k x + sigma^2); APs pass when
    their coefficient norm is within (1 + tol) of the cap.
    """
    rho = x.rho if isinstance(x, PowerAllocation) else np.asarray(x, float).reshape(data.K, data.L)
    g = constraint_values(rho, data)
    q = kernels.quad_forms(data.C, np.ascontiguousarray(rho))
    scale = np.sqrt(q + data.sigma_dl2)
    norms = np.sqrt(transmit_powers(rho, data))
    return FeasibilityReport(user_ok=g <= tol * scale, margins=g,
                             ap_ok=norms <= data.cap * (1.0 + tol),
                             ap_norms=norms)


@dataclass
class MaxMinReport:
    gamma_mm: float
    se_mm: float
    bracket: tuple          # (se feasible lower end, se infeasible upper end)
    probes: int
    bisection_tol: float


def max_min_sinr(data, bisection_tol=0.01, options=None):
    """Largest common SINR target every user can meet, by bisection in SE.

    Each probe minimizes the sum of hinge penalties over the cap box (the
    power objective is forced off) and reports feasibility through the
    solver's own margin rule. The upper end starts at the interference-free
    all-AP full-power bound min_k p_max ||b_k||_1^2 / sigma^2, which no
    allocation can reach.
    """
    base = SolverOptions() if options is None else options
    probe_opts = feasibility_options(base)
    l1 = data.b.sum(axis=1)
    if np.any(l1 <= 0.0):
        return MaxMinReport(gamma_mm=0.0, se_mm=0.0, bracket=(0.0, 0.0),
                            probes=0, bisection_tol=bisection_tol)
    gamma_ub = float(np.min(data.p_max * l1 * l1 / data.sigma_dl2))
    se_hi = math.log2(1.0 + gamma_ub)
    se_lo = 0.0
    probes = 0

    def probe(se):
        nonlocal probes
        probes += 1
        trial = data.with_targets(sinr_targets=2.0 ** se - 1.0)
        return penalty_minimize(trial, probe_opts).feasible

    # the bound is strict, but guard the bracket anyway
    for _ in range(8):
        if not probe(se_hi):
            break
        se_lo = se_hi
        se_hi *= 2.0
    while se_hi - se_lo > bisection_tol:
        mid = 0.5 * (se_lo + se_hi)
        if probe(mid):
            se_lo = mid
        else:
            se_hi = mid
    gamma_mm = 2.0 ** se_lo - 1.0
    return MaxMinReport(gamma_mm=gamma_mm, se_mm=se_lo, bracket=(se_lo, se_hi),
                        probes=probes, bisection_tol=bisection_tol)
