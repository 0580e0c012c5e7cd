"""Canonical 3D Gaussian soup with per-Gaussian attributes, normals, blend
weights and visibility flags."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass
class GaussianSet:
    """A set of K Gaussians.

    Opacity is fixed at 1 and rotation at the identity quaternion for the
    avatar model; the rasterizer itself accepts arbitrary values so the
    fields stay general.
    """

    centers: np.ndarray        # (K, 3)
    colors: np.ndarray         # (K, 3) in [0, 1]
    opacities: np.ndarray      # (K,)
    rotations: np.ndarray      # (K, 4) unit quaternions (w, x, y, z)
    scales: np.ndarray         # (K, 3) positive
    normals: np.ndarray        # (K, 3) unit
    blend_weights: np.ndarray  # (K, J)
    visibility: np.ndarray     # (K,) uint8 flags, monotone under marking
    uv_texel: np.ndarray       # (K, 2) int source texel (col, row)

    @property
    def count(self) -> int:
        return self.centers.shape[0]

    def validate(self) -> "GaussianSet":
        k = self.count
        for name in ("colors", "normals"):
            if getattr(self, name).shape != (k, 3):
                raise ValidationError(f"{name} must be (K, 3)")
        if self.scales.shape != (k, 3) or np.any(self.scales <= 0):
            raise ValidationError("scales must be (K, 3) and positive")
        if self.opacities.shape != (k,):
            raise ValidationError("opacities must be (K,)")
        qn = np.linalg.norm(self.rotations, axis=1)
        if self.rotations.shape != (k, 4) or not np.allclose(qn, 1.0, atol=1e-5):
            raise ValidationError("rotations must be (K, 4) unit quaternions")
        nn = np.linalg.norm(self.normals, axis=1)
        if not np.allclose(nn, 1.0, atol=1e-4):
            raise ValidationError("normals must be unit vectors")
        if not np.all(np.isin(self.visibility, (0, 1))):
            raise ValidationError("visibility flags must be 0/1")
        if self.blend_weights.shape[0] != k:
            raise ValidationError("blend weights must have K rows")
        if not np.allclose(self.blend_weights.sum(axis=1), 1.0, atol=1e-5):
            raise ValidationError("blend-weight rows must sum to 1")
        return self

    def posed(self, centers: np.ndarray, normals: np.ndarray | None = None) -> "GaussianSet":
        """Same attribute arrays with deformed geometry; canonical indices
        (and therefore visibility flags) are shared with self."""
        return replace(
            self,
            centers=centers,
            normals=self.normals if normals is None else normals,
        )

    def astype(self, dtype) -> "GaussianSet":
        return GaussianSet(
            centers=self.centers.astype(dtype),
            colors=self.colors.astype(dtype),
            opacities=self.opacities.astype(dtype),
            rotations=self.rotations.astype(dtype),
            scales=self.scales.astype(dtype),
            normals=self.normals.astype(dtype),
            blend_weights=self.blend_weights.astype(dtype),
            visibility=self.visibility.copy(),
            uv_texel=self.uv_texel.copy(),
        )


def make_gaussian_set(
    centers,
    colors=None,
    opacities=None,
    scales=None,
    normals=None,
    blend_weights=None,
    rotations=None,
    dtype=np.float64,
) -> GaussianSet:
    """Convenience constructor filling avatar-model defaults."""
    centers = np.asarray(centers, dtype=dtype).reshape(-1, 3)
    k = centers.shape[0]
    if colors is None:
        colors = np.full((k, 3), 0.5)
    if opacities is None:
        opacities = np.ones(k)
    if scales is None:
        scales = np.full((k, 3), 0.1)
    if normals is None:
        normals = np.tile(np.array([0.0, 0.0, -1.0]), (k, 1))
    if blend_weights is None:
        blend_weights = np.ones((k, 1))
    if rotations is None:
        rotations = np.tile(IDENTITY_QUAT, (k, 1))
    return GaussianSet(
        centers=centers,
        colors=np.asarray(colors, dtype=dtype).reshape(k, 3),
        opacities=np.asarray(opacities, dtype=dtype).reshape(k),
        rotations=np.asarray(rotations, dtype=dtype).reshape(k, 4),
        scales=np.asarray(scales, dtype=dtype).reshape(k, 3),
        normals=np.asarray(normals, dtype=dtype).reshape(k, 3),
        blend_weights=np.asarray(blend_weights, dtype=dtype).reshape(k, -1),
        visibility=np.zeros(k, dtype=np.uint8),
        uv_texel=np.zeros((k, 2), dtype=np.int32),
    )


@dataclass
class ParamGrads:
    """Gradients of a rendered-image functional with respect to the set."""

    d_centers: np.ndarray
    d_colors: np.ndarray
    d_scales: np.ndarray
    d_opacities: np.ndarray
    d_normals: np.ndarray | None = None

    def validate(self, gaussians: GaussianSet) -> "ParamGrads":
        k = gaussians.count
        shapes = {
            "d_centers": (k, 3), "d_colors": (k, 3),
            "d_scales": (k, 3), "d_opacities": (k,),
        }
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValidationError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")
        if self.d_normals is not None and self.d_normals.shape != (k, 3):
            raise ValidationError("d_normals must be (K, 3)")
        return self


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) as (w, x, y, z) to rotation matrices (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out
