"""EWA projection of 3D Gaussians to screen-space splats, with the exact
adjoint used by the rasterizer backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError
from ..gaussians import quat_to_rotmat
from ..scene import Camera


@dataclass
class Splat2D:
    """Screen-space footprint of one projected Gaussian."""

    mean2d: np.ndarray   # (2,) pixels
    cov2d: np.ndarray    # (2, 2) symmetric positive-definite
    depth: float         # camera-space z
    gaussian_index: int


@dataclass
class Projected:
    """Vectorized projection of a whole set (culled entries masked out)."""

    means: np.ndarray    # (K, 2)
    covs: np.ndarray     # (K, 2, 2)
    depths: np.ndarray   # (K,)
    valid: np.ndarray    # (K,) bool, False = culled (behind near plane)
    # cached intermediates for the backward pass
    t_cam: np.ndarray    # (K, 3) camera-space centers
    M: np.ndarray        # (K, 2, 3) = J @ W
    rot_s: np.ndarray    # (K, 3, 3) R(q)
    sigma3d: np.ndarray  # (K, 3, 3)


def project_all(
    centers: np.ndarray,
    scales: np.ndarray,
    quats: np.ndarray,
    camera: Camera,
    blur: float = 0.3,
    near: float = 0.01,
) -> Projected:
    """Project Gaussian centers/covariances into screen space.

    cov2d = J W Sigma W^T J^T + blur * I with Sigma = R(q) diag(s^2) R(q)^T,
    W the camera rotation and J the perspective Jacobian at the center.
    Centers behind the near plane are flagged invalid, not raised.
    """
    centers = np.asarray(centers, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    quats = np.asarray(quats, dtype=np.float64)
    k = centers.shape[0]
    W = camera.rotation
    t = centers @ W.T + camera.translation  # (K, 3)
    valid = t[:, 2] > near

    tz = np.where(valid, t[:, 2], 1.0)  # placeholder depth for culled rows
    tx, ty = t[:, 0], t[:, 1]
    fx, fy = camera.fx, camera.fy

    means = np.stack([fx * tx / tz + camera.cx, fy * ty / tz + camera.cy], axis=1)

    J = np.zeros((k, 2, 3))
    J[:, 0, 0] = fx / tz
    J[:, 0, 2] = -fx * tx / tz**2
    J[:, 1, 1] = fy / tz
    J[:, 1, 2] = -fy * ty / tz**2

    R_s = quat_to_rotmat(quats)
    sigma3d = R_s @ (scales[:, :, None] ** 2 * np.swapaxes(R_s, 1, 2))

    M = J @ W[None]
    covs = M @ sigma3d @ np.swapaxes(M, 1, 2)
    covs[:, 0, 0] += blur
    covs[:, 1, 1] += blur
    return Projected(
        means=means, covs=covs, depths=t[:, 2].copy(), valid=valid,
        t_cam=t, M=M, rot_s=R_s, sigma3d=sigma3d,
    )


def project_gaussian(
    center, scale, quaternion, camera: Camera, blur: float = 0.3, near: float = 0.01
) -> Splat2D | None:
    """Single-Gaussian projection; returns None for a behind-camera center."""
    proj = project_all(
        np.asarray(center, dtype=np.float64).reshape(1, 3),
        np.asarray(scale, dtype=np.float64).reshape(1, 3),
        np.asarray(quaternion, dtype=np.float64).reshape(1, 4),
        camera, blur=blur, near=near,
    )
    if not proj.valid[0]:
        return None
    return Splat2D(
        mean2d=proj.means[0], cov2d=proj.covs[0],
        depth=float(proj.depths[0]), gaussian_index=0,
    )


def project_backward(
    proj: Projected,
    scales: np.ndarray,
    camera: Camera,
    d_means: np.ndarray,
    d_covs: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Map screen-space gradients back to world centers and scales.

    ``d_covs`` is the full-matrix (symmetric) gradient wrt cov2d.  Rotation
    gradients are not produced (quaternions are fixed in this model).
    """
    scales = np.asarray(scales, dtype=np.float64)
    k = proj.means.shape[0]
    W = camera.rotation
    fx, fy = camera.fx, camera.fy
    t = proj.t_cam
    tx, ty = t[:, 0], t[:, 1]
    tz = np.where(proj.valid, t[:, 2], 1.0)

    G = 0.5 * (d_covs + np.swapaxes(d_covs, 1, 2))

    # cov2d = M Sigma M^T (blur term is additive, gradient passes through)
    d_M = 2.0 * (G @ proj.M @ proj.sigma3d)                    # (K, 2, 3)
    d_sigma = np.swapaxes(proj.M, 1, 2) @ G @ proj.M           # (K, 3, 3)

    # Sigma = R diag(s^2) R^T  ->  d s_k = 2 s_k (R^T dSigma R)_kk
    Rt_dS_R = np.swapaxes(proj.rot_s, 1, 2) @ d_sigma @ proj.rot_s
    d_scales = 2.0 * scales * np.einsum("kii->ki", Rt_dS_R)

    # M = J W; J depends on the camera-space center t
    d_J = d_M @ W.T[None]                                      # (K, 2, 3)
    d_t = np.zeros((k, 3))
    inv_z2 = 1.0 / tz**2
    d_t[:, 0] += d_J[:, 0, 2] * (-fx * inv_z2)
    d_t[:, 1] += d_J[:, 1, 2] * (-fy * inv_z2)
    d_t[:, 2] += (
        d_J[:, 0, 0] * (-fx * inv_z2)
        + d_J[:, 1, 1] * (-fy * inv_z2)
        + d_J[:, 0, 2] * (2.0 * fx * tx / tz**3)
        + d_J[:, 1, 2] * (2.0 * fy * ty / tz**3)
    )

    # pinhole mean2d path
    d_t[:, 0] += d_means[:, 0] * fx / tz
    d_t[:, 1] += d_means[:, 1] * fy / tz
    d_t[:, 2] += d_means[:, 0] * (-fx * tx * inv_z2) + d_means[:, 1] * (-fy * ty * inv_z2)

    d_t[~proj.valid] = 0.0
    d_scales[~proj.valid] = 0.0
    d_centers = d_t @ W
    return d_centers, d_scales


def conic_from_cov(covs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Invert 2x2 covariances into packed conics (A, B, C) with the
    quadratic form A dx^2 + 2 B dx dy + C dy^2; also returns determinants."""
    a = covs[:, 0, 0]
    b = covs[:, 0, 1]
    c = covs[:, 1, 1]
    det = a * c - b * b
    if np.any(det[np.isfinite(det)] <= 0):
        raise ValidationError("cov2d must be positive definite after blur")
    inv_det = 1.0 / det
    conics = np.stack([c * inv_det, -b * inv_det, a * inv_det], axis=1)
    return conics, det


def cov_grad_from_conic_grad(conics: np.ndarray, d_conics: np.ndarray) -> np.ndarray:
    """Packed conic gradients (dA, dB, dC) -> full-matrix cov2d gradients.

    Lambda = cov^-1, so dL/dcov = -Lambda (dL/dLambda) Lambda with the
    packed B entry split across the two off-diagonal slots.
    """
    k = conics.shape[0]
    lam = np.empty((k, 2, 2))
    lam[:, 0, 0] = conics[:, 0]
    lam[:, 0, 1] = conics[:, 1]
    lam[:, 1, 0] = conics[:, 1]
    lam[:, 1, 1] = conics[:, 2]
    g = np.empty((k, 2, 2))
    g[:, 0, 0] = d_conics[:, 0]
    g[:, 0, 1] = 0.5 * d_conics[:, 1]
    g[:, 1, 0] = 0.5 * d_conics[:, 1]
    g[:, 1, 1] = d_conics[:, 2]
    return -lam @ g @ lam
