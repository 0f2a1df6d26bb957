"""Monte-Carlo channel statistics feeding the power allocation problem.

Pipeline: sample channels -> MMSE channel estimates -> per-AP partial MMSE
precoders over each AP's strongest-user set -> effective average channel
b and interference second moments C. The b/C statistics are everything the
solver needs; they serialize to a standalone JSON file.
"""

import json
from dataclasses import dataclass, field

import numpy as np

STATISTICS_FORMAT_VERSION = 1

# Relative floor for negative eigenvalues of estimated second-moment blocks.
PSD_TOL = 1e-10


def invariant_mean(a, axis=0):
    """Mean whose value is bitwise invariant to permutations along `axis`.

    Sorting first canonicalizes the reduction order; real and imaginary
    parts of complex inputs are reduced independently (each is its own sum).
    """
    if np.iscomplexobj(a):
        return invariant_mean(a.real, axis) + 1j * invariant_mean(a.imag, axis)
    srt = np.sort(a, axis=axis)
    return srt.sum(axis=axis) / a.shape[axis]


@dataclass
class EstimationModel:
    """Per-link channel estimates and their error covariances."""

    h_hat: np.ndarray       # (M, L, K, N) complex
    error_cov: np.ndarray   # (L, K, N, N) complex, Hermitian PSD


@dataclass
class EffectiveStatistics:
    K: int
    L: int
    sigma_dl2: float
    b: np.ndarray   # (K, L) real, nonnegative
    C: np.ndarray   # (K, K, L, L) real; C[k, i] is the L x L block for pair (k, i)
    diagnostics: dict = field(default_factory=dict)


def estimate_channels(realizations, scenario, seed):
    """MMSE channel estimates from decorrelated pilot observations.

    y = sqrt(tau_p p) h + n with n ~ CN(0, noise_ul I) (distinct pilots per
    user, so no pilot contamination enters y), and
    h_hat = sqrt(tau_p p) R (tau_p p R + noise_ul I)^(-1) y. The error
    covariance is R - tau_p p R (tau_p p R + noise_ul I)^(-1) R. The
    regularized matrix is nonsingular because noise_ul > 0 is enforced by
    ScenarioConfig.
    """
    from .scenario import sample_pilot_noise

    cfg = scenario.config
    M = realizations.shape[0]
    tp = cfg.tau_p * cfg.pilot_power
    R = scenario.covariances
    if R is None:
        raise ValueError("scenario has no covariances")
    noise = sample_pilot_noise(scenario, M, seed)
    Y = np.sqrt(tp) * realizations + noise

    eye = np.eye(cfg.N)
    Q = tp * R + cfg.noise_ul * eye                     # (L, K, N, N)
    X = np.linalg.solve(Q, R)                           # Q^-1 R per link
    filt = np.sqrt(tp) * X.conj().transpose(0, 1, 3, 2)  # R Q^-1 (R, Q Hermitian)
    h_hat = np.einsum("lkab,mlkb->mlka", filt, Y)
    error_cov = R - tp * (X.conj().transpose(0, 1, 3, 2) @ R)
    return EstimationModel(h_hat=h_hat, error_cov=error_cov)


def select_service_set(scenario, l):
    """Indices of the service_set_size users with largest beta at AP l.

    Ties break toward the lower user index; the result is in ascending
    user-index order.
    """
    beta_l = scenario.beta[l]
    order = np.lexsort((np.arange(scenario.config.K), -beta_l))
    chosen = order[: scenario.config.service_set_size]
    return np.sort(chosen)


def pmmse_precoders(estimation, scenario):
    """Per-AP partial MMSE precoders, normalized to unit mean square norm.

    AP l serves only its strongest-user set; users outside it get a zero
    precoder. Each served (l, k) precoder is scaled by the Monte-Carlo
    average of its squared norm so that rho_lk^2 is exactly that link's
    transmit power. Links whose estimates are identically zero stay zero
    and are flagged inactive.
    """
    cfg = scenario.config
    h_hat = estimation.h_hat
    M = h_hat.shape[0]
    p = cfg.pilot_power
    W = np.zeros_like(h_hat)
    eye = np.eye(cfg.N)
    for l in range(cfg.L):
        served = select_service_set(scenario, l)
        hs = h_hat[:, l, served, :]                     # (M, S, N)
        base = p * estimation.error_cov[l, served].sum(axis=0) + cfg.noise_dl * eye
        G = base[None] + p * np.einsum("msa,msb->mab", hs, hs.conj())
        raw = np.linalg.solve(G, hs.transpose(0, 2, 1))  # (M, N, S)
        W[:, l, served, :] = raw.transpose(0, 2, 1)
    mean_sq = invariant_mean(np.einsum("mlkn,mlkn->mlk", W, W.conj()).real, axis=0)
    active = mean_sq > 0.0
    scale = np.where(active, 1.0 / np.sqrt(np.where(active, mean_sq, 1.0)), 0.0)
    W *= scale[None, :, :, None]
    return W, active


def estimate_expectations(realizations, precoders, sigma_dl2):
    """Effective statistics b and C from matched (channel, precoder) batches.

    [b_k]_l is the real part of the mean inner product h^H w for the own
    link, clamped at zero; [C_ki]_(l,m) is the real part of the mean of
    h_lk^H w_li w_mi^H h_mk, symmetrized and eigenvalue-clamped to PSD.
    Reductions over realizations use the order-canonical mean, so outputs
    are bitwise independent of realization ordering. Diagnostics record the
    largest imaginary residue ratio, the pre-clamp negative mass of each
    b_k, and the worst pre-repair eigenvalue ratio.
    """
    M, L, K, _ = realizations.shape
    if M < 2:
        raise ValueError("need at least 2 realizations")
    b = np.zeros((K, L))
    C = np.zeros((K, K, L, L))
    max_imag_ratio = 0.0
    neg_mass = np.zeros(K)
    min_eig_ratio = np.inf
    eps = np.finfo(float).eps
    for k in range(K):
        A = np.einsum("mln,mlin->mli", realizations[:, :, k, :].conj(), precoders)
        own = invariant_mean(A[:, :, k], axis=0)        # complex (L,)
        ratio = np.abs(own.imag) / (np.abs(own.real) + eps)
        max_imag_ratio = max(max_imag_ratio, float(ratio.max()))
        pre = own.real
        clipped = np.abs(pre[pre < 0.0]).sum()
        denom = np.abs(pre).sum()
        neg_mass[k] = clipped / denom if denom > 0.0 else 0.0
        b[k] = np.maximum(pre, 0.0)
        for i in range(K):
            Re, Im = A[:, :, i].real, A[:, :, i].imag
            contrib = (np.einsum("ml,mn->mln", Re, Re)
                       + np.einsum("ml,mn->mln", Im, Im))
            block = invariant_mean(contrib, axis=0)
            block = 0.5 * (block + block.T)
            imag_mean = (Im.T @ Re - Re.T @ Im) / M
            scale = np.abs(block) + eps
            max_imag_ratio = max(max_imag_ratio, float((np.abs(imag_mean) / scale).max()))
            block, eig_ratio = _psd_repair(block)
            min_eig_ratio = min(min_eig_ratio, eig_ratio)
            C[k, i] = block
    diagnostics = {
        "max_imag_ratio": max_imag_ratio,
        "neg_mass": neg_mass,
        "min_eig_ratio": float(min_eig_ratio),
    }
    return EffectiveStatistics(K=K, L=L, sigma_dl2=float(sigma_dl2),
                               b=b, C=C, diagnostics=diagnostics)


def _psd_repair(block):
    """Clamp negative eigenvalues to zero; returns (block, min eig ratio)."""
    w = np.linalg.eigvalsh(block)
    tr = max(float(np.trace(block)), 0.0)
    scale = tr / block.shape[0] if tr > 0.0 else 1.0
    ratio = float(w.min() / scale) if scale > 0.0 else 0.0
    if w.min() >= 0.0:
        return block, ratio
    if w.min() < -PSD_TOL * scale:
        raise ValueError(f"estimated block not PSD within tolerance: min eig {w.min():.3e}")
    w, V = np.linalg.eigh(block)
    rebuilt = (V * np.clip(w, 0.0, None)) @ V.T
    return 0.5 * (rebuilt + rebuilt.T), ratio


def build_statistics(scenario, M=None, seed=None):
    """Run the full channel pipeline for a scenario with covariances."""
    from .scenario import sample_channels

    cfg = scenario.config
    M = cfg.mc_realizations if M is None else M
    seed = cfg.seed if seed is None else seed
    H = sample_channels(scenario, M, seed)
    est = estimate_channels(H, scenario, seed)
    W, _ = pmmse_precoders(est, scenario)
    return estimate_expectations(H, W, cfg.noise_dl)


# ---------------------------------------------------------------------------
# Serialization: the statistics file alone is enough to run the solver.
# ---------------------------------------------------------------------------

def statistics_to_dict(stats):
    return {
        "format_version": STATISTICS_FORMAT_VERSION,
        "K": stats.K,
        "L": stats.L,
        "sigma_dl2": stats.sigma_dl2,
        "b": stats.b.tolist(),
        "C": stats.C.tolist(),
    }


def save_statistics(stats, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(statistics_to_dict(stats), fh, sort_keys=True)


def load_statistics(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != STATISTICS_FORMAT_VERSION:
        raise ValueError(f"unsupported statistics format_version: {doc.get('format_version')}")
    b = np.asarray(doc["b"], dtype=float)
    C = np.asarray(doc["C"], dtype=float)
    K, L = int(doc["K"]), int(doc["L"])
    if b.shape != (K, L) or C.shape != (K, K, L, L):
        raise ValueError("statistics file has inconsistent shapes")
    return EffectiveStatistics(K=K, L=L, sigma_dl2=float(doc["sigma_dl2"]), b=b, C=C)
