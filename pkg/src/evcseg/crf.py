"""Fully connected pairwise CRF over voxels, solved by mean-field iteration.

The model couples every voxel pair with a two-part Gaussian kernel: an
appearance term over (position, intensity) with bandwidths theta_alpha /
theta_beta and weight w_appearance, and a smoothness term over position
alone with bandwidth theta_gamma and weight w_smoothness. Label
disagreement costs the kernel value (Potts compatibility); unary costs
come from a probability map, typically the network's softmax output.

Two backends share the same update rule. "brute" materializes the full
N x N kernel matrix (capped at BRUTE_MAX_VOXELS, it is the reference
implementation and the test oracle); "filtered" approximates the kernel
sums with a separable spatial convolution plus a bilateral grid, which is
what makes full volumes tractable. Positions are voxel index times
spacing, and intensities are min-max normalized to [0, 1] before any
kernel evaluation, so the bandwidths keep their meaning across scanners.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d
from scipy.special import xlogy

from .bilateral import bilateral_filter
from .errors import CapacityError, ConfigError, DomainError, GeometryError
from .volume import LabelMask, ProbMap, Volume

BRUTE_MAX_VOXELS = 4096
PROB_CLAMP = 1e-6
SPATIAL_TRUNCATE = 3.0


@dataclass(frozen=True)
class CrfConfig:
    w_appearance: float = 5.0
    w_smoothness: float = 3.0
    theta_alpha: float = 4.0
    theta_beta: float = 0.1
    theta_gamma: float = 3.0
    iterations: int = 5
    backend: str = "filtered"
    update_order: str = "parallel"

    def __post_init__(self):
        if self.w_appearance < 0 or self.w_smoothness < 0:
            raise ConfigError("kernel weights must be >= 0")
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ConfigError("kernel bandwidths must be > 0")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.backend not in ("brute", "filtered"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.update_order not in ("parallel", "sequential"):
            raise ConfigError(f"unknown update_order {self.update_order!r}")
        if self.backend == "filtered" and self.update_order == "sequential":
            # voxel-at-a-time updates would need per-voxel kernel rows, which
            # only the brute backend has
            raise ConfigError("sequential updates require the brute backend")


@dataclass(frozen=True)
class UnaryField:
    """Per-voxel label costs: -log of clamped probabilities, (L, nx, ny, nz)."""

    neg_log_probs: np.ndarray


@dataclass(frozen=True)
class MeanFieldState:
    """Marginals plus the free-energy value recorded after each sweep.

    trace_exact is False once any entry came from the filtered backend's
    approximate kernel sums.
    """

    q: np.ndarray
    free_energy_trace: tuple
    trace_exact: bool = True


def unary_from_probmap(p: ProbMap) -> UnaryField:
    clamped = np.clip(p.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return UnaryField(neg_log_probs=-np.log(clamped))


def _features(vol: Volume):
    """Voxel positions in mm and intensities min-max scaled to [0, 1]."""
    shape = vol.data.shape
    idx = np.indices(shape).reshape(3, -1).T
    pos = idx * vol.spacing
    data = vol.data.reshape(-1)
    lo, hi = data.min(), data.max()
    inten = (data - lo) / (hi - lo) if hi > lo else np.zeros_like(data)
    return pos, inten


def pairwise_kernel(fi, fj, cfg: CrfConfig) -> float:
    """Kernel value for feature vectors (x_mm, y_mm, z_mm, intensity)."""
    fi = np.asarray(fi, dtype=np.float64)
    fj = np.asarray(fj, dtype=np.float64)
    dp2 = float(((fi[:3] - fj[:3]) ** 2).sum())
    di2 = float((fi[3] - fj[3]) ** 2)
    app = np.exp(-dp2 / (2 * cfg.theta_alpha**2) - di2 / (2 * cfg.theta_beta**2))
    smooth = np.exp(-dp2 / (2 * cfg.theta_gamma**2))
    return float(cfg.w_appearance * app + cfg.w_smoothness * smooth)


def kernel_matrix(vol: Volume, cfg: CrfConfig) -> np.ndarray:
    """Dense pairwise kernel with zero diagonal. Brute backend only."""
    n = vol.data.size
    if n > BRUTE_MAX_VOXELS:
        raise CapacityError(
            f"{n} voxels exceed the brute-force cap of {BRUTE_MAX_VOXELS}"
        )
    pos, inten = _features(vol)
    dp2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
    di2 = (inten[:, None] - inten[None, :]) ** 2
    k = cfg.w_appearance * np.exp(
        -dp2 / (2 * cfg.theta_alpha**2) - di2 / (2 * cfg.theta_beta**2)
    ) + cfg.w_smoothness * np.exp(-dp2 / (2 * cfg.theta_gamma**2))
    np.fill_diagonal(k, 0.0)
    return k


def gibbs_energy(x: LabelMask, u: UnaryField, vol: Volume, cfg: CrfConfig) -> float:
    """Exact energy of a hard labeling: unary sum plus Potts pairwise sum."""
    labels = x.data.reshape(-1).astype(np.int64)
    uf = u.neg_log_probs.reshape(u.neg_log_probs.shape[0], -1)
    if labels.size != uf.shape[1]:
        raise GeometryError("labeling and unary field sizes differ")
    e_unary = uf[labels, np.arange(labels.size)].sum()
    k = kernel_matrix(vol, cfg)
    differ = labels[:, None] != labels[None, :]
    return float(e_unary + 0.5 * (k * differ).sum())


def _softmax_labels(logits):
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _free_energy_exact(qf, uf, k):
    pair = 0.5 * (k.sum() - sum(qf[l] @ k @ qf[l] for l in range(qf.shape[0])))
    return float((qf * uf).sum() + pair + xlogy(qf, qf).sum())


def filtered_message_pass(q, vol: Volume, cfg: CrfConfig):
    """Approximate M_i(l) = sum_{j != i} k(f_i, f_j) q_j(l) for all voxels.

    q is (L, nx, ny, nz); the smoothness part is an exact truncated
    separable convolution, the appearance part runs through the bilateral
    grid, and the self term (w_appearance + w_smoothness) q_i is removed.
    """
    shape = vol.data.shape
    labels = q.shape[0]
    qf = q.reshape(labels, -1)
    out = np.zeros_like(qf)
    if cfg.w_appearance > 0:
        pos, inten = _features(vol)
        coords = np.concatenate(
            [pos / cfg.theta_alpha, (inten / cfg.theta_beta)[:, None]], axis=1
        )
        out += cfg.w_appearance * bilateral_filter(qf, coords)
    if cfg.w_smoothness > 0:
        sm = q.astype(np.float64, copy=True)
        for axis, sp in enumerate(vol.spacing):
            radius = int(np.ceil(SPATIAL_TRUNCATE * cfg.theta_gamma / sp))
            t = np.arange(-radius, radius + 1) * sp
            kern = np.exp(-(t**2) / (2 * cfg.theta_gamma**2))
            sm = convolve1d(sm, kern, axis=axis + 1, mode="constant")
        out += cfg.w_smoothness * sm.reshape(labels, -1)
    out -= (cfg.w_appearance + cfg.w_smoothness) * qf
    return out.reshape(q.shape)


def _approx_free_energy(q_new, uf, vol, cfg):
    m = filtered_message_pass(q_new, vol, cfg).reshape(q_new.shape[0], -1)
    ones = np.ones((1,) + vol.data.shape)
    s_hat = filtered_message_pass(ones, vol, cfg)
    qf = q_new.reshape(q_new.shape[0], -1)
    pair = 0.5 * (s_hat.sum() - (qf * m).sum())
    return float((qf * uf).sum() + pair + xlogy(qf, qf).sum())


def mean_field_step(
    state: MeanFieldState, u: UnaryField, vol: Volume, cfg: CrfConfig
) -> MeanFieldState:
    """One full sweep of marginal updates, renormalized per voxel.

    Appends the variational free energy of the new marginals to the trace:
    exact under the brute backend, a filtered approximation otherwise.
    """
    labels = u.neg_log_probs.shape[0]
    uf = u.neg_log_probs.reshape(labels, -1)
    if cfg.backend == "brute":
        k = kernel_matrix(vol, cfg)
        if cfg.update_order == "parallel":
            m = state.q.reshape(labels, -1) @ k  # k is symmetric
            q_new = _softmax_labels(-uf + m)
        else:
            q_new = state.q.reshape(labels, -1).copy()
            for i in range(q_new.shape[1]):
                logits = -uf[:, i] + q_new @ k[i]
                z = np.exp(logits - logits.max())
                q_new[:, i] = z / z.sum()
        fe = _free_energy_exact(q_new, uf, k)
        exact = state.trace_exact
    else:
        m = filtered_message_pass(state.q, vol, cfg).reshape(labels, -1)
        q_new = _softmax_labels(-uf + m)
        fe = _approx_free_energy(q_new.reshape(state.q.shape), uf, vol, cfg)
        exact = False
    return MeanFieldState(
        q=q_new.reshape(state.q.shape),
        free_energy_trace=state.free_energy_trace + (fe,),
        trace_exact=exact,
    )


def _initial_state(u: UnaryField, vol: Volume, cfg: CrfConfig) -> MeanFieldState:
    labels = u.neg_log_probs.shape[0]
    uf = u.neg_log_probs.reshape(labels, -1)
    q0 = _softmax_labels(-uf).reshape(u.neg_log_probs.shape)
    if cfg.backend == "brute":
        fe = _free_energy_exact(q0.reshape(labels, -1), uf, kernel_matrix(vol, cfg))
        return MeanFieldState(q=q0, free_energy_trace=(fe,), trace_exact=True)
    fe = _approx_free_energy(q0, uf, vol, cfg)
    return MeanFieldState(q=q0, free_energy_trace=(fe,), trace_exact=False)


def refine(p: ProbMap, vol: Volume, cfg: CrfConfig):
    """Mean-field refinement of a probability map against its volume.

    Returns (LabelMask, MeanFieldState). iterations = 0 degenerates to the
    argmax of the input map.
    """
    if p.data.shape[1:] != vol.data.shape:
        raise GeometryError(
            f"probability map grid {p.data.shape[1:]} does not match "
            f"volume {vol.data.shape}"
        )
    if p.data.shape[0] != 2:
        raise DomainError("refinement is defined for two-label maps")
    u = unary_from_probmap(p)
    state = _initial_state(u, vol, cfg)
    for _ in range(cfg.iterations):
        state = mean_field_step(state, u, vol, cfg)
    source = p.data if cfg.iterations == 0 else state.q
    mask = LabelMask(np.argmax(source, axis=0).astype(np.uint8), vol.affine)
    return mask, state
