"""Per-voxel optimization of descriptor and density lattices.

Each voxel trains independently: rays through the patch elements of its
track are the supervision set, and Adam descends an analytic gradient of
the rendering loss (MSE + cosine on the rendered descriptor, total
variation on both lattices, binary entropy on the per-sample opacities).
The backward pass is written by hand; its correctness against central
finite differences is the module's keystone test.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .descriptors import patch_pixel_grid
from .exceptions import Divergence, NoIntersection
from .geometry import CameraIntrinsics, Ray, ray_box_intersect_many, rays_through_pixels
from .renderer import composite, render_ray, sample_positions, sample_ray
from .textio import fnum
from .voxel import VoxelLandmark, density_activation, trilinear_weights

_ALPHA_CLIP = 1e-6
_ZERO_NORM = 1e-12


@dataclass
class TrainConfig:
    epochs: int = 2000
    rays_per_epoch: int = 1024
    lr_desc: float = 0.1
    lr_density: float = 0.1
    w_mse: float = 1.0
    w_cos: float = 1.0
    w_tv: float = 1e-2
    w_ent: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    seed: int = 0
    n_samples: int = 8
    density_shift: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if min(self.w_mse, self.w_cos, self.w_tv, self.w_ent) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    mse: float
    cosine: float
    tv: float
    entropy: float
    total: float


def total_variation(voxel: VoxelLandmark) -> float:
    """Mean squared adjacent-node difference, summed over both lattices."""
    return _tv_mean(voxel.desc_nodes) + _tv_mean(voxel.density_nodes[..., None])


def _tv_mean(lattice: np.ndarray) -> float:
    R = lattice.shape[0]
    C = lattice.shape[3]
    n_terms = 3 * (R - 1) * R * R * C
    total = 0.0
    for axis in range(3):
        d = np.diff(lattice, axis=axis)
        total += float((d * d).sum())
    return total / n_terms


def _tv_grad(lattice: np.ndarray) -> np.ndarray:
    R = lattice.shape[0]
    C = lattice.shape[3]
    n_terms = 3 * (R - 1) * R * R * C
    g = np.zeros_like(lattice)
    for axis in range(3):
        d = np.diff(lattice, axis=axis)
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[axis] = slice(1, None)
        lo[axis] = slice(0, -1)
        g[tuple(hi)] += 2.0 * d / n_terms
        g[tuple(lo)] -= 2.0 * d / n_terms
    return g


def _entropy(alpha: np.ndarray) -> np.ndarray:
    a = np.clip(alpha, _ALPHA_CLIP, 1.0 - _ALPHA_CLIP)
    return -(a * np.log(a) + (1.0 - a) * np.log1p(-a))


def compute_loss(rendered: np.ndarray, target: np.ndarray,
                 voxel: VoxelLandmark, ray_alphas,
                 weights: TrainConfig) -> LossBreakdown:
    """Loss terms for one rendered ray against its target descriptor.

    When the rendered vector has (near-)zero norm the cosine term is
    undefined and falls back to its maximum value 1.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if np.linalg.norm(target) < _ZERO_NORM:
        raise ValueError("target descriptor must be non-zero")
    diff = rendered - target
    mse = float(diff @ diff) / rendered.shape[0]
    nr = np.linalg.norm(rendered)
    if nr < _ZERO_NORM:
        cosine = 1.0
    else:
        cosine = 1.0 - float(rendered @ target) / (nr * np.linalg.norm(target))
    tv = total_variation(voxel)
    entropy = float(np.mean(_entropy(np.asarray(ray_alphas, dtype=np.float64))))
    total = (weights.w_mse * mse + weights.w_cos * cosine
             + weights.w_tv * tv + weights.w_ent * entropy)
    return LossBreakdown(mse=mse, cosine=cosine, tv=tv, entropy=entropy,
                         total=total)


def _forward_backward_batch(voxel: VoxelLandmark, w2: np.ndarray,
                            delta: np.ndarray, targets: np.ndarray,
                            cfg: TrainConfig, sum_gradients: bool = False):
    """Fused render + analytic gradient for a batch of rays on one voxel.

    Args:
        w2: (B, N, Q) trilinear weights of the N midpoint samples of each
            ray, scattered over the Q = R^3 flattened lattice nodes.
        delta: (B,) per-ray sample spacing.
        targets: (B, C) target descriptors.
        sum_gradients: when True, render-path gradients are summed over the
            batch instead of averaged (used with visit normalization).

    Returns:
        (loss breakdown, grad_desc (Q, C), grad_density (Q,)).
    """
    B, N, Q = w2.shape
    D = voxel.desc_nodes.reshape(Q, -1)
    x = voxel.density_nodes.reshape(Q)
    C = D.shape[1]
    w2_flat = w2.reshape(B * N, Q)

    sigma_hat = (w2_flat @ x).reshape(B, N)
    z = sigma_hat + cfg.density_shift
    sigma = np.logaddexp(0.0, z)
    descs = (w2_flat @ D).reshape(B, N, C)
    rendered, _, alpha, trans = composite(sigma, delta, descs)
    weights_c = trans * alpha  # compositing weights

    diff = rendered - targets
    mse_b = (diff * diff).sum(axis=1) / C
    nr = np.linalg.norm(rendered, axis=1)
    nt = np.linalg.norm(targets, axis=1)
    dot = (rendered * targets).sum(axis=1)
    ok = nr >= _ZERO_NORM
    cosv = np.where(ok, dot / np.where(ok, nr * nt, 1.0), 0.0)
    cos_b = 1.0 - np.where(ok, cosv, 0.0)
    ent_b = _entropy(alpha).mean(axis=1)
    tv = total_variation(voxel)

    mse = float(mse_b.mean())
    cosine = float(cos_b.mean())
    entropy = float(ent_b.mean())
    total = (cfg.w_mse * mse + cfg.w_cos * cosine + cfg.w_tv * tv
             + cfg.w_ent * entropy)
    breakdown = LossBreakdown(mse=mse, cosine=cosine, tv=tv, entropy=entropy,
                              total=total)

    scale = 1.0 if sum_gradients else 1.0 / B

    # d(loss)/d(rendered): MSE plus cosine direction term.
    dldr = cfg.w_mse * scale * 2.0 * diff / C
    safe_nr = np.where(ok, nr, 1.0)
    dcos = -(targets / (safe_nr * nt)[:, None]
             - (cosv / (safe_nr * safe_nr))[:, None] * rendered)
    dldr = dldr + cfg.w_cos * scale * np.where(ok[:, None], dcos, 0.0)

    # Descriptor lattice: rendered = sum_k weights_c[k] * descs[k].
    m1 = np.einsum("bk,bkq->bq", weights_c, w2)
    grad_desc = m1.T @ dldr

    # Density lattice: back through compositing, alpha, softplus.
    dldw = np.einsum("bc,bnc->bn", dldr, descs)
    suffix = np.cumsum((dldw * weights_c)[:, ::-1], axis=1)[:, ::-1]
    suffix = np.concatenate([suffix[:, 1:], np.zeros((B, 1))], axis=1)
    one_minus_alpha = 1.0 - alpha
    dlda = dldw * trans - np.where(one_minus_alpha > 0,
                                   suffix / np.where(one_minus_alpha > 0,
                                                     one_minus_alpha, 1.0),
                                   0.0)
    # Entropy path acts on alpha directly; the clip zeroes its gradient.
    a = alpha
    in_band = (a > _ALPHA_CLIP) & (a < 1.0 - _ALPHA_CLIP)
    dent = np.where(in_band, -(np.log(np.clip(a, _ALPHA_CLIP, None))
                               - np.log1p(-np.clip(a, None, 1.0 - _ALPHA_CLIP))),
                    0.0)
    dlda = dlda + cfg.w_ent * scale * dent / N

    e = np.exp(-sigma * delta[:, None])
    dldsigma = dlda * delta[:, None] * e
    dldz = dldsigma / (1.0 + np.exp(-z))
    grad_density = w2_flat.T @ dldz.reshape(B * N)

    return breakdown, grad_desc, grad_density


def _ray_w2(voxel: VoxelLandmark, origin: np.ndarray, direction: np.ndarray,
            t0: float, t1: float, n_samples: int) -> np.ndarray:
    pts, _ = sample_positions(origin[None, :], direction[None, :],
                              np.array([t0]), np.array([t1]), n_samples)
    idx, w = trilinear_weights(voxel.center, voxel.side, voxel.resolution,
                               pts.reshape(-1, 3))
    Q = voxel.resolution ** 3
    w2 = np.zeros((n_samples, Q))
    rows = np.repeat(np.arange(n_samples), 8)
    np.add.at(w2, (rows, idx.ravel()), w.ravel())
    return w2[None, :, :]


def backward(voxel: VoxelLandmark, ray: Ray, target: np.ndarray,
             weights: TrainConfig):
    """Analytic gradient of compute_loss for a single ray.

    Returns (grad_desc (R, R, R, C), grad_density (R, R, R)) of the total
    loss with respect to every lattice value. Raises NoIntersection via the
    renderer when the ray misses the cube.
    """
    t0, t1, hit = ray_box_intersect_many(ray.origin[None, :],
                                         ray.direction[None, :],
                                         voxel.center, voxel.side)
    if not hit[0]:
        raise NoIntersection("ray misses the voxel cube")
    w2 = _ray_w2(voxel, ray.origin, ray.direction, float(t0[0]), float(t1[0]),
                 weights.n_samples)
    delta = np.array([(float(t1[0]) - float(t0[0])) / weights.n_samples])
    target = np.asarray(target, dtype=np.float64).reshape(1, -1)
    _, grad_desc, grad_density = _forward_backward_batch(
        voxel, w2, delta, target, weights)
    grad_desc = grad_desc + weights.w_tv * _tv_grad(voxel.desc_nodes).reshape(
        grad_desc.shape)
    grad_density = grad_density + weights.w_tv * _tv_grad(
        voxel.density_nodes[..., None]).reshape(grad_density.shape)
    R = voxel.resolution
    return (grad_desc.reshape(R, R, R, -1), grad_density.reshape(R, R, R))


def loss_of_ray(voxel: VoxelLandmark, ray: Ray, target: np.ndarray,
                weights: TrainConfig) -> LossBreakdown:
    """Render one ray and assemble its full loss; the forward of backward()."""
    samples = sample_ray(voxel, ray, weights.n_samples)
    sigma = density_activation(samples.raw_density, weights.density_shift)
    alpha = 1.0 - np.exp(-sigma * samples.delta)
    rendered, _ = render_ray(voxel, ray, weights.n_samples,
                             weights.density_shift)
    return compute_loss(rendered, target, voxel, alpha, weights)


@dataclass
class RayPool:
    """Precomputed supervision rays of one track that hit the voxel cube."""

    w2: np.ndarray  # (P, N, Q) trilinear scatter weights per sample
    delta: np.ndarray  # (P,)
    targets: np.ndarray  # (P, C)
    origins: np.ndarray = field(repr=False, default=None)
    directions: np.ndarray = field(repr=False, default=None)

    @property
    def size(self) -> int:
        return len(self.delta)


def build_ray_pool(voxel: VoxelLandmark, track,
                   intrinsics: CameraIntrinsics, cfg: TrainConfig) -> RayPool:
    """All (observation, patch-element) rays of the track that hit the cube."""
    origins_all = []
    dirs_all = []
    targets_all = []
    for obs in track.observations:
        S = obs.patch.size
        grid = patch_pixel_grid(obs.keypoint, S).reshape(-1, 2)
        o, d = rays_through_pixels(obs.pose, intrinsics, grid)
        origins_all.append(o)
        dirs_all.append(d)
        targets_all.append(obs.patch.data.reshape(-1, obs.patch.channels))
    origins = np.concatenate(origins_all)
    dirs = np.concatenate(dirs_all)
    targets = np.concatenate(targets_all)

    t0, t1, hit = ray_box_intersect_many(origins, dirs, voxel.center, voxel.side)
    origins, dirs = origins[hit], dirs[hit]
    targets = targets[hit]
    t0, t1 = t0[hit], t1[hit]
    if len(origins) == 0:
        raise ValueError("no supervision ray hits the voxel cube")

    n = cfg.n_samples
    pts, delta = sample_positions(origins, dirs, t0, t1, n)
    idx, w = trilinear_weights(voxel.center, voxel.side, voxel.resolution,
                               pts.reshape(-1, 3))
    P = len(origins)
    Q = voxel.resolution ** 3
    rows = np.repeat(np.arange(P * n), 8)
    w2 = np.zeros((P * n, Q))
    np.add.at(w2, (rows, idx.ravel()), w.ravel())
    return RayPool(w2=w2.reshape(P, n, Q), delta=delta, targets=targets,
                   origins=origins, directions=dirs)


def train_voxel(voxel: VoxelLandmark, track, cfg: TrainConfig,
                intrinsics: CameraIntrinsics) -> tuple[VoxelLandmark, list[LossBreakdown]]:
    """Adam-train one voxel on its own track; returns (voxel, loss history).

    Rays are drawn uniformly with replacement from the pool of
    (observation, patch-element) rays that hit the cube. Gradients are
    normalized per node by the number of times the node's trilinear support
    was touched in the epoch, realizing a per-node learning rate.
    """
    pool = build_ray_pool(voxel, track, intrinsics, cfg)
    rng = np.random.default_rng([int(cfg.seed), 0x7124])

    Q = voxel.resolution ** 3
    C = voxel.channels
    m_d = np.zeros((Q, C))
    v_d = np.zeros((Q, C))
    m_x = np.zeros(Q)
    v_x = np.zeros(Q)

    # Touch counts per node: how many (ray, sample) supports include it.
    touch_pool = (pool.w2 > 0).sum(axis=1)  # (P, Q) touches per ray

    history: list[LossBreakdown] = []
    for epoch in range(1, cfg.epochs + 1):
        sel = rng.integers(0, pool.size, cfg.rays_per_epoch)
        w2 = pool.w2[sel]
        breakdown, g_d, g_x = _forward_backward_batch(
            voxel, w2, pool.delta[sel], pool.targets[sel], cfg,
            sum_gradients=True)
        if not np.isfinite(breakdown.total):
            raise Divergence(f"non-finite loss at epoch {epoch}")

        visits = np.maximum(touch_pool[sel].sum(axis=0), 1)
        g_d = g_d / visits[:, None]
        g_x = g_x / visits
        g_d += cfg.w_tv * _tv_grad(voxel.desc_nodes).reshape(Q, C)
        g_x += cfg.w_tv * _tv_grad(voxel.density_nodes[..., None]).reshape(Q)

        b1t = 1.0 - cfg.beta1 ** epoch
        b2t = 1.0 - cfg.beta2 ** epoch
        m_d = cfg.beta1 * m_d + (1.0 - cfg.beta1) * g_d
        v_d = cfg.beta2 * v_d + (1.0 - cfg.beta2) * g_d * g_d
        step_d = cfg.lr_desc * (m_d / b1t) / (np.sqrt(v_d / b2t) + cfg.eps)
        m_x = cfg.beta1 * m_x + (1.0 - cfg.beta1) * g_x
        v_x = cfg.beta2 * v_x + (1.0 - cfg.beta2) * g_x * g_x
        step_x = cfg.lr_density * (m_x / b1t) / (np.sqrt(v_x / b2t) + cfg.eps)

        voxel.desc_nodes -= step_d.reshape(voxel.desc_nodes.shape)
        voxel.density_nodes -= step_x.reshape(voxel.density_nodes.shape)
        history.append(breakdown)

    return voxel, history


def dump_history(history: list[LossBreakdown], path) -> None:
    """Write loss history as structured text, one row per epoch."""
    with open(path, "w") as f:
        f.write("epoch mse cosine tv entropy total\n")
        for i, h in enumerate(history, start=1):
            f.write(f"{i} {fnum(h.mse)} {fnum(h.cosine)} {fnum(h.tv)} "
                    f"{fnum(h.entropy)} {fnum(h.total)}\n")
