"""Penalty method with a monotone accelerated projected-gradient inner solver.

The outer loop replaces the per-user SINR constraints by squared hinge
penalties weighted by lam and escalates lam geometrically until every
constraint is met within a scale-free tolerance. Each subproblem keeps only
the per-AP power-cap ball and the nonnegativity box, for which projection is
closed form, and is solved by an accelerated projected gradient with the
monotone acceptance rule (a candidate that does not decrease the cost is
rejected while the momentum sequence still advances). The non-smooth
norm objective is smoothed around zero with a quadratic knee of width mu_s,
which bounds the objective error by cap * mu_s / (2 eta_max) per AP.
"""

import json
import math
import time
from dataclasses import dataclass, replace, asdict

import numpy as np

from . import kernels
from .kernels import smoothed_norm  # noqa: F401  (re-exported; lives with the kernels)
from .problem import PowerAllocation, consumed_power


@dataclass
class SolverOptions:
    lambda0: float = 0.1
    zeta: float = 3.0
    mu_s: float = 1e-7
    tau: float = 1e-4
    epsilon: float = 1e-3
    eps_feas: float = 1e-5
    max_penalty_iters: int = 40
    max_apg_iters: int = 5000
    alpha_init: float = 1.0
    backtrack_factor: float = 0.5
    max_backtracks: int = 60
    model: str = "non-linear"
    init_seed: int = 0
    init_scale: float = 1e-10
    objective_weight: float = 1.0

    def __post_init__(self):
        checks = [
            (self.zeta > 1.0, "zeta"),
            (self.mu_s > 0.0, "mu_s"),
            (0.0 < self.tau < 1.0, "tau"),
            (self.epsilon > 0.0, "epsilon"),
            (0.0 < self.backtrack_factor < 1.0, "backtrack_factor"),
            (self.model in ("ideal", "non-linear"), "model"),
            (self.lambda0 >= 0.0, "lambda0"),
            (self.eps_feas >= 0.0, "eps_feas"),
            (self.alpha_init > 0.0, "alpha_init"),
            (self.init_scale >= 0.0, "init_scale"),
            (self.objective_weight >= 0.0, "objective_weight"),
        ]
        for ok, name in checks:
            if not ok:
                raise ValueError(f"invalid SolverOptions field: {name}")


@dataclass
class TraceRow:
    penalty_iter: int
    lam: float
    apg_iters: int
    f_value: float
    max_violation: float  # max_k [g_k]_+ / sqrt(x^T C_k x + sigma_dl2)


@dataclass
class SolverResult:
    x_star: PowerAllocation
    feasible: bool
    user_feasible: np.ndarray      # (K,) bool
    margins: np.ndarray            # (K,) g_k(x_star), sqrt-watts
    per_ap_tx: np.ndarray          # (L,) watts
    consumed_ideal: float
    consumed_nonlinear: float
    trace: list
    wall_time: float
    penalty_iterations: int
    apg_iterations_total: int
    monotone_violations: int
    hit_apg_cap: bool

    def to_dict(self):
        return {
            "x_star": self.x_star.x.tolist(),
            "K": self.x_star.K,
            "L": self.x_star.L,
            "feasible": bool(self.feasible),
            "user_feasible": [bool(v) for v in self.user_feasible],
            "margins": self.margins.tolist(),
            "per_ap_tx": self.per_ap_tx.tolist(),
            "consumed_ideal": self.consumed_ideal,
            "consumed_nonlinear": self.consumed_nonlinear,
            "trace": [asdict(row) for row in self.trace],
            "wall_time": self.wall_time,
            "penalty_iterations": self.penalty_iterations,
            "apg_iterations_total": self.apg_iterations_total,
            "monotone_violations": self.monotone_violations,
            "hit_apg_cap": bool(self.hit_apg_cap),
        }

    def save_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    def save_trace_csv(self, path, config_hash=None):
        lines = []
        if config_hash is not None:
            lines.append(f"# config-hash: {config_hash}")
        lines.append("penalty_iter,lambda,apg_iters,f_value,max_violation")
        for row in self.trace:
            lines.append(f"{row.penalty_iter},{row.lam!r},{row.apg_iters},"
                         f"{row.f_value!r},{row.max_violation!r}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Cost / gradient evaluations on the (K, L) coefficient matrix. The penalty
# gradient of [g_k]_+^2 carries the factor 2 [g_k]_+ grad g_k with
# grad g_k = C_k x / sqrt(x^T C_k x + sigma^2) - s_k b_tilde_k.
# ---------------------------------------------------------------------------

def _kernel_args(data, options):
    return (data.sigma_dl2, options.objective_weight,
            options.model == "non-linear", data.cap / data.eta_max,
            1.0 / data.eta, options.mu_s)


def _cost(rho, lam, data, options):
    sigma2, w_obj, nl, kappa, inv_eta, mu = _kernel_args(data, options)
    return float(kernels.penalized_cost_value(
        data.C, data.b, data.s_factor, sigma2, rho, lam, w_obj, nl, kappa,
        inv_eta, mu))


def _cost_and_grad(rho, lam, data, options):
    sigma2, w_obj, nl, kappa, inv_eta, mu = _kernel_args(data, options)
    value, grad = kernels.penalized_cost_grad(
        data.C, data.b, data.s_factor, sigma2, rho, lam, w_obj, nl, kappa,
        inv_eta, mu)
    return float(value), grad


def gradient(x, lam, data, options):
    """Gradient of the penalized cost, returned in the flat x layout."""
    rho = np.ascontiguousarray(np.asarray(x, dtype=float).reshape(data.K, data.L))
    _, grad = _cost_and_grad(rho, lam, data, options)
    return grad.reshape(-1)


def project(x, data):
    """Closed-form projection onto the nonnegative per-AP cap balls.

    Negative entries are clamped, then each AP column is radially scaled
    onto the ball of radius sqrt(p_max). Columns within a few ulp of the cap
    are left untouched, which makes the projection idempotent bitwise.
    """
    rho = np.maximum(np.asarray(x, dtype=float), 0.0)
    flat = rho.ndim == 1
    if flat:
        rho = rho.reshape(data.K, data.L)
    norms = np.sqrt(np.einsum("kl,kl->l", rho, rho))
    gate = data.cap * kernels.CAP_GATE_FACTOR
    scale = np.where(norms > gate, data.cap / np.where(norms > 0.0, norms, 1.0), 1.0)
    out = rho * scale[None, :]
    return out.reshape(-1) if flat else out


def armijo_step(x, search_point_value, grad, data, lam, options, start_alpha=None):
    """Backtracking step from a search point with known value and gradient.

    Halves alpha until the projected step decreases the cost by at least
    tau * alpha * ||grad||^2. Returns (alpha, candidate, candidate_value,
    stalled); when the backtrack budget runs out the smallest-alpha
    candidate comes back with stalled=True and the caller's monotone
    acceptance decides what to do with it.
    """
    alpha = options.alpha_init if start_alpha is None else start_alpha
    gnorm2 = float(np.sum(grad * grad))
    candidate = None
    cand_value = np.inf
    for _ in range(options.max_backtracks + 1):
        candidate = project(x - alpha * grad, data)
        cand_value = _cost(candidate, lam, data, options)
        if search_point_value - cand_value >= options.tau * alpha * gnorm2:
            return alpha, candidate, cand_value, False
        alpha *= options.backtrack_factor
    return alpha / options.backtrack_factor, candidate, cand_value, True


def _momentum_next(mu):
    return 0.5 * math.sqrt(4.0 * mu * mu + 1.0) + 0.5


def apg_minimize(data, lam, x0, options):
    """Monotone accelerated projected gradient for one penalty weight.

    Extrapolates from the accepted iterate and the latest projected step,
    takes an Armijo-backtracked projected gradient step there, and keeps the
    previous iterate whenever the candidate fails to decrease the cost. The
    loop exits when the accepted decrease falls under epsilon relative to
    the current value (or the cost hits exactly zero, which happens on pure
    feasibility runs); every iterate satisfies the projection constraints.

    Returns (x, iterations, info dict).
    """
    x = project(np.asarray(x0, dtype=float).reshape(data.K, data.L), data)
    z = x.copy()
    x_prev = x.copy()
    f_x = _cost(x, lam, data, options)
    mu_prev = 1.0
    mu_cur = 1.0
    alpha_prev = options.alpha_init
    violations = 0
    hit_cap = True
    iters = 0
    small_streak = 0
    reject_streak = 0
    for t in range(1, options.max_apg_iters + 1):
        iters = t
        y = x + (mu_prev / mu_cur) * (z - x) + ((mu_prev - 1.0) / mu_cur) * (x - x_prev)
        f_y, grad_y = _cost_and_grad(np.ascontiguousarray(y), lam, data, options)
        start = min(options.alpha_init, 2.0 * alpha_prev)
        alpha, z_next, f_z, _ = armijo_step(y, f_y, grad_y, data, lam, options, start)
        alpha_prev = alpha
        mu_next = _momentum_next(mu_cur)
        x_prev = x
        accepted = f_z <= f_x
        if accepted:
            x = z_next
            f_new = f_z
            reject_streak = 0
        else:
            f_new = f_x
            reject_streak += 1
        if f_new > f_x:
            violations += 1
        decrease = f_x - f_new
        f_x = f_new
        z = z_next
        mu_prev, mu_cur = mu_cur, mu_next
        if reject_streak >= 5:
            # The extrapolation sequence can deadlock far from the accepted
            # iterate (every candidate rejected while the cost freezes);
            # restarting momentum from the accepted iterate makes the next
            # step a plain projected-gradient step, which must progress.
            z = x.copy()
            mu_prev = 1.0
            mu_cur = 1.0
            reject_streak = 0
        if f_new == 0.0:
            hit_cap = False
            break
        # The relative-decrease exit is judged on accepted steps only (a
        # rejected extrapolation is a momentum restart, not convergence) and
        # must hold twice in a row so a single cautious step after a restart
        # does not end the loop early.
        if accepted:
            if decrease < options.epsilon * f_new:
                small_streak += 1
                if small_streak >= 2:
                    hit_cap = False
                    break
            else:
                small_streak = 0
    info = {"f_value": f_x, "monotone_violations": violations, "hit_cap": hit_cap}
    return x, iters, info


# Relative violation under which a penalty round is re-solved at tight
# precision rather than waiting for more penalty growth. Within this window
# the current weight is usually large enough for full feasibility, so one
# deep solve beats several more escalation rounds.
_RESUME_WINDOW_FACTOR = 30.0


def _feasibility_margins(rho, data):
    q = kernels.quad_forms(data.C, rho)
    bx = np.einsum("kl,kl->k", data.b, rho)
    scale = np.sqrt(q + data.sigma_dl2)
    g = scale - data.s_factor * bx
    return g, scale


def penalty_minimize(data, options=None):
    """Solve the capped power minimization by escalating penalties.

    The start point is uniform random in [0, init_scale] per coordinate.
    Penalty weights follow lambda0 * zeta^i exactly; each subproblem is
    warm-started from the previous solution, and the loop stops as soon as
    every user satisfies [g_k]_+ <= eps_feas * sqrt(x^T C_k x + sigma^2).
    A run that exhausts max_penalty_iters comes back flagged infeasible with
    its final margins, which signals targets unreachable under the caps.
    """
    options = SolverOptions() if options is None else options
    start = time.perf_counter()
    rng = np.random.default_rng(options.init_seed)
    x = rng.uniform(0.0, options.init_scale, size=(data.K, data.L))
    x = project(x, data)

    trace = []
    total_apg = 0
    total_violations = 0
    hit_cap_any = False
    feasible = False
    penalty_iters = 0
    stagnant = 0
    best_rel = np.inf
    tight = replace(options, epsilon=min(options.epsilon, 1e-9))
    for i in range(options.max_penalty_iters):
        lam = options.lambda0 * options.zeta ** i
        x, iters, info = apg_minimize(data, lam, x, options)
        g, scale = _feasibility_margins(x, data)
        rel = float(np.max(np.maximum(g, 0.0) / scale))
        if (options.eps_feas < rel <= _RESUME_WINDOW_FACTOR * options.eps_feas
                and options.epsilon > tight.epsilon):
            # Close to feasibility the loose relative-decrease exit leaves
            # the subproblem under-resolved; finish this round's minimization
            # at tight precision instead of burning more penalty growth.
            x, extra, info2 = apg_minimize(data, lam, x, tight)
            iters += extra
            info["f_value"] = info2["f_value"]
            info["monotone_violations"] += info2["monotone_violations"]
            info["hit_cap"] = info["hit_cap"] or info2["hit_cap"]
            g, scale = _feasibility_margins(x, data)
            rel = float(np.max(np.maximum(g, 0.0) / scale))
        total_apg += iters
        total_violations += info["monotone_violations"]
        hit_cap_any = hit_cap_any or info["hit_cap"]
        penalty_iters = i + 1
        trace.append(TraceRow(penalty_iter=i, lam=lam, apg_iters=iters,
                              f_value=info["f_value"], max_violation=rel))
        if np.all(np.maximum(g, 0.0) <= options.eps_feas * scale):
            feasible = True
            break
        # With the power objective off, the subproblem minimizer does not
        # depend on lam at all, so stalled margins cannot recover in later
        # rounds; two non-improving rounds end the run as infeasible.
        if options.objective_weight == 0.0:
            if rel >= 0.99 * best_rel:
                stagnant += 1
                if stagnant >= 2:
                    break
            else:
                stagnant = 0
            best_rel = min(best_rel, rel)

    g, scale = _feasibility_margins(x, data)
    user_ok = np.maximum(g, 0.0) <= options.eps_feas * scale
    alloc = PowerAllocation.from_rho(x)
    _, total_ideal = consumed_power(alloc, "ideal", data)
    ptx = np.einsum("kl,kl->l", x, x)
    _, total_nl = consumed_power(alloc, "non-linear", data)
    return SolverResult(
        x_star=alloc,
        feasible=feasible,
        user_feasible=user_ok,
        margins=g,
        per_ap_tx=ptx,
        consumed_ideal=total_ideal,
        consumed_nonlinear=total_nl,
        trace=trace,
        wall_time=time.perf_counter() - start,
        penalty_iterations=penalty_iters,
        apg_iterations_total=total_apg,
        monotone_violations=total_violations,
        hit_apg_cap=hit_cap_any,
    )


def feasibility_options(options=None, **overrides):
    """Options for a pure feasibility run: the power objective is off.

    With the objective off the subproblem minimizer is independent of lam,
    so the run lives or dies on inner-solver quality: the relative-decrease
    exit is tightened and the penalty loop relies on the margin/stagnation
    exits instead of escalation.
    """
    base = SolverOptions() if options is None else options
    # Hinge-penalty gradients live on the noise-power scale, so the useful
    # step sizes are huge; backtracking walks down from alpha_init quickly.
    # Clearly feasible targets exit within a few steps (the cost reaches
    # exactly zero); the iteration budget only matters for near-boundary
    # targets, where running out means a conservative "infeasible".
    settings = {"objective_weight": 0.0, "epsilon": 1e-9, "alpha_init": 1e16,
                "max_apg_iters": 2000}
    settings.update(overrides)
    return replace(base, **settings)
