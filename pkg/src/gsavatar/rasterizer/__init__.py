"""Differentiable splat rasterizer.

Front end shared by two kernel backends: a compiled extension
(``_kernels``, built from ``_kernels.pyx``) and a pure-NumPy fallback
(``_kernels_py``).  The compiled backend is used when the import
succeeds; set ``GSAVATAR_BACKEND=python`` or ``=compiled`` to force a
choice.  Both run the identical compositing semantics, so tests can be
parametrized over them.

The front end owns everything outside the pixel loops: EWA projection,
depth sorting with stable index tie-break, conic inversion, per-splat
pixel bounds (3-sigma boxes, or the full frame in exact mode), and the
mapping of kernel gradients back to world-space parameters.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError
from ..gaussians import GaussianSet, ParamGrads
from ..scene import Camera, ImageBuffer
from . import _kernels_py
from .projection import (
    Projected,
    conic_from_cov,
    cov_grad_from_conic_grad,
    project_all,
    project_backward,
)

_FORCED = os.environ.get("GSAVATAR_BACKEND", "").strip().lower()
if _FORCED not in ("", "compiled", "python"):
    raise ImportError(f"GSAVATAR_BACKEND must be 'compiled' or 'python', got {_FORCED!r}")

if _FORCED == "python":
    _impl = _kernels_py
    _BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
        _BACKEND = "compiled"
    except ImportError:
        if _FORCED == "compiled":
            raise
        _impl = _kernels_py
        _BACKEND = "python"


def active_backend() -> str:
    """Name of the kernel backend selected at import ('compiled' or 'python')."""
    return _BACKEND


def get_kernels(backend: str | None = None):
    """Kernel module for ``backend`` (default: the active one)."""
    if backend in (None, _BACKEND):
        return _impl
    if backend == "python":
        return _kernels_py
    if backend == "compiled":
        from . import _kernels  # type: ignore[attr-defined]
        return _kernels
    raise ValidationError(f"unknown backend {backend!r}")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RasterizerConfig:
    """Compositing thresholds.

    ``exact`` disables the skip and termination cutoffs and the 3-sigma
    pixel bounds (every splat is evaluated at every pixel) while keeping
    the alpha clamp, which makes the output directly comparable to a
    brute-force reference walk.
    """

    alpha_clamp: float = 0.99
    skip_threshold: float = 1.0 / 255.0
    term_threshold: float = 1e-4
    tile_sigma: float = 3.0
    blur: float = 0.3
    near: float = 0.01
    hit_threshold: float = 0.5
    exact: bool = False

    @property
    def effective_skip(self) -> float:
        return 0.0 if self.exact else self.skip_threshold

    @property
    def effective_term(self) -> float:
        return 0.0 if self.exact else self.term_threshold


DEFAULT_CONFIG = RasterizerConfig()
EXACT_CONFIG = RasterizerConfig(exact=True)

_ATTRIBUTES = ("color", "normal", "visibility")


@dataclass
class RenderState:
    """Forward-pass bookkeeping needed to run the backward pass."""

    camera: Camera
    config: RasterizerConfig
    attribute: str
    dtype: np.dtype
    backend: str
    count: int
    order: np.ndarray        # original indices, front to back (valid only)
    proj: Projected          # full-count projection cache, float64
    conics64: np.ndarray     # (n_sorted, 3) float64
    means_s: np.ndarray      # kernel-dtype sorted arrays
    conics_s: np.ndarray
    attrs_s: np.ndarray
    opac_s: np.ndarray
    bboxes_s: np.ndarray     # (n_sorted, 4) int32: x0, x1, y0, y1
    background: np.ndarray
    image: np.ndarray        # (H, W, C) final composited output
    scales: np.ndarray       # (count, 3) float64 world scales


@dataclass
class RenderOutput:
    image: ImageBuffer
    alpha: ImageBuffer
    state: RenderState


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _gather_attributes(gaussians: GaussianSet, attribute: str) -> np.ndarray:
    if attribute == "color":
        return gaussians.colors
    if attribute == "normal":
        return gaussians.normals
    if attribute == "visibility":
        return gaussians.visibility.astype(np.float64)[:, None]
    raise ValidationError(f"attribute must be one of {_ATTRIBUTES}, got {attribute!r}")


def _sorted_order(proj: Projected) -> np.ndarray:
    idx = np.nonzero(proj.valid)[0]
    # stable front-to-back order: depth ascending, original index breaks ties
    return idx[np.lexsort((idx, proj.depths[idx]))]


def _pixel_bounds(means: np.ndarray, covs: np.ndarray, width: int, height: int,
                  tile_sigma: float, exact: bool) -> np.ndarray:
    n = means.shape[0]
    bboxes = np.empty((n, 4), dtype=np.int32)
    if exact:
        bboxes[:, 0], bboxes[:, 1] = 0, width
        bboxes[:, 2], bboxes[:, 3] = 0, height
        return bboxes
    a = covs[:, 0, 0]
    b = covs[:, 0, 1]
    c = covs[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.0, (0.5 * (a - c)) ** 2 + b * b))
    radius = tile_sigma * np.sqrt(lam_max)
    bboxes[:, 0] = np.clip(np.floor(means[:, 0] - radius), 0, width).astype(np.int32)
    bboxes[:, 1] = np.clip(np.ceil(means[:, 0] + radius) + 1, 0, width).astype(np.int32)
    bboxes[:, 2] = np.clip(np.floor(means[:, 1] - radius), 0, height).astype(np.int32)
    bboxes[:, 3] = np.clip(np.ceil(means[:, 1] + radius) + 1, 0, height).astype(np.int32)
    return bboxes


def _prepare(gaussians: GaussianSet, camera: Camera, attribute: str,
             config: RasterizerConfig, dtype):
    if dtype is None:
        dtype = gaussians.centers.dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValidationError(f"dtype must be float32 or float64, got {dtype}")

    attrs = np.asarray(_gather_attributes(gaussians, attribute), dtype=np.float64)
    proj = project_all(gaussians.centers, gaussians.scales, gaussians.rotations,
                       camera, blur=config.blur, near=config.near)
    order = _sorted_order(proj)
    conics64, _ = conic_from_cov(proj.covs[order])
    bboxes = _pixel_bounds(proj.means[order], proj.covs[order],
                           camera.width, camera.height, config.tile_sigma, config.exact)
    means_s = np.ascontiguousarray(proj.means[order], dtype=dtype)
    conics_s = np.ascontiguousarray(conics64, dtype=dtype)
    attrs_s = np.ascontiguousarray(attrs[order], dtype=dtype)
    opac_s = np.ascontiguousarray(
        np.asarray(gaussians.opacities, dtype=np.float64)[order], dtype=dtype)
    return dtype, proj, order, conics64, means_s, conics_s, attrs_s, opac_s, bboxes


def render(gaussians: GaussianSet, camera: Camera, *, attribute: str = "color",
           background=None, config: RasterizerConfig = DEFAULT_CONFIG,
           dtype=None, backend: str | None = None) -> RenderOutput:
    """Project, sort, and composite a Gaussian set into an image.

    ``background`` is a per-channel value (scalar broadcasts); remaining
    transmittance multiplies it.  ``dtype`` selects the kernel precision
    and defaults to the dtype of ``gaussians.centers``.
    """
    (dtype, proj, order, conics64, means_s, conics_s,
     attrs_s, opac_s, bboxes) = _prepare(gaussians, camera, attribute, config, dtype)
    channels = attrs_s.shape[1]
    if background is None:
        bg = np.zeros(channels, dtype=dtype)
    else:
        bg = np.broadcast_to(np.asarray(background, dtype=dtype), (channels,)).copy()

    kern = get_kernels(backend)
    image, trans = kern.composite_forward(
        means_s, conics_s, attrs_s, opac_s, bboxes,
        camera.width, camera.height, bg,
        config.alpha_clamp, config.effective_skip, config.effective_term)
    image = np.asarray(image)
    trans = np.asarray(trans)

    state = RenderState(
        camera=camera, config=config, attribute=attribute, dtype=dtype,
        backend=backend or _BACKEND, count=gaussians.count, order=order,
        proj=proj, conics64=conics64, means_s=means_s, conics_s=conics_s,
        attrs_s=attrs_s, opac_s=opac_s, bboxes_s=bboxes, background=bg,
        image=image, scales=np.asarray(gaussians.scales, dtype=np.float64),
    )
    alpha = (1.0 - trans)[:, :, None].astype(dtype)
    return RenderOutput(image=ImageBuffer.from_array(image),
                        alpha=ImageBuffer.from_array(alpha), state=state)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def render_backward(state: RenderState, grad_image: np.ndarray) -> ParamGrads:
    """Pull an image-space gradient back to per-Gaussian parameters.

    Returns float64 gradients indexed like the original set.  The attribute
    gradient lands in ``d_colors`` for color renders and ``d_normals`` for
    normal renders; visibility renders propagate only geometry gradients.
    """
    grad_image = np.ascontiguousarray(grad_image, dtype=state.dtype)
    expected = state.image.shape
    if grad_image.shape != expected:
        raise ValidationError(
            f"grad_image shape {grad_image.shape} does not match render {expected}")

    kern = get_kernels(state.backend)
    d_means_s, d_conics_s, d_attrs_s, d_opac_s = kern.composite_backward(
        state.means_s, state.conics_s, state.attrs_s, state.opac_s, state.bboxes_s,
        state.camera.width, state.camera.height, state.background,
        state.config.alpha_clamp, state.config.effective_skip,
        state.config.effective_term, state.image, grad_image)

    n = state.count
    order = state.order
    d_means = np.zeros((n, 2), dtype=np.float64)
    d_covs = np.zeros((n, 2, 2), dtype=np.float64)
    d_means[order] = np.asarray(d_means_s, dtype=np.float64)
    d_covs[order] = cov_grad_from_conic_grad(
        state.conics64, np.asarray(d_conics_s, dtype=np.float64))

    d_centers, d_scales = project_backward(
        state.proj, state.scales, state.camera, d_means, d_covs)

    d_opacities = np.zeros(n, dtype=np.float64)
    d_opacities[order] = np.asarray(d_opac_s, dtype=np.float64)

    d_colors = np.zeros((n, 3), dtype=np.float64)
    d_normals = None
    d_attrs = np.zeros((n, d_attrs_s.shape[1]), dtype=np.float64)
    d_attrs[order] = np.asarray(d_attrs_s, dtype=np.float64)
    if state.attribute == "color":
        d_colors = d_attrs
    elif state.attribute == "normal":
        d_normals = d_attrs

    return ParamGrads(d_centers=d_centers, d_colors=d_colors, d_scales=d_scales,
                      d_opacities=d_opacities, d_normals=d_normals)


# ---------------------------------------------------------------------------
# visibility
# ---------------------------------------------------------------------------

def pixel_owner(gaussians: GaussianSet, camera: Camera,
                config: RasterizerConfig = DEFAULT_CONFIG,
                backend: str | None = None) -> np.ndarray:
    """(H, W) int32 map of the nearest Gaussian whose local alpha exceeds
    the hit threshold at each pixel; -1 where none does.  Indices refer to
    the original set order."""
    (dtype, proj, order, conics64, means_s, conics_s,
     attrs_s, opac_s, bboxes) = _prepare(gaussians, camera, "color", config,
                                         np.float64)
    kern = get_kernels(backend)
    winner = np.asarray(kern.mark_visibility(
        means_s, conics_s, opac_s, bboxes,
        camera.width, camera.height, config.alpha_clamp, config.hit_threshold))
    owner = np.full(winner.shape, -1, dtype=np.int32)
    hit = winner >= 0
    owner[hit] = order[winner[hit]].astype(np.int32)
    return owner


def mark_visibility(gaussians: GaussianSet, cameras, posed_centers=None,
                    config: RasterizerConfig = DEFAULT_CONFIG,
                    backend: str | None = None) -> np.ndarray:
    """Union of per-camera hit sets as a 0/1 uint8 flag array.

    ``cameras`` is a single camera or an iterable.  ``posed_centers``
    optionally substitutes deformed centers (one array per camera, or one
    shared array) while keeping all other attributes.
    """
    if isinstance(cameras, Camera):
        cameras = [cameras]
    cameras = list(cameras)
    flags = np.zeros(gaussians.count, dtype=np.uint8)
    for ci, cam in enumerate(cameras):
        gs = gaussians
        if posed_centers is not None:
            centers = posed_centers[ci] if isinstance(posed_centers, (list, tuple)) \
                else posed_centers
            gs = gaussians.posed(centers=np.asarray(centers, dtype=np.float32))
        owner = pixel_owner(gs, cam, config=config, backend=backend)
        hit = np.unique(owner[owner >= 0])
        flags[hit] = 1
    return flags


__all__ = [
    "RasterizerConfig", "RenderOutput", "RenderState",
    "DEFAULT_CONFIG", "EXACT_CONFIG",
    "render", "render_backward", "pixel_owner", "mark_visibility",
    "active_backend", "get_kernels",
]
