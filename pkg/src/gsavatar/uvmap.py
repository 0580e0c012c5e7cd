"""Baking template geometry into UV-space maps and seeding Gaussians from
the covered texels.

A texel (row, col) has UV center ((col + 0.5)/R, (row + 0.5)/R).  Baking
rasterizes every face into the grid with barycentric interpolation of
positions, smooth vertex normals and blend weights; ``mask`` records the
covered texels.  Gaussians are seeded one per covered texel, enumerated in
row-major mask order, and keep their source texel in ``uv_texel`` as
(col, row) so per-texel decoders can address them.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .gaussians import GaussianSet, make_gaussian_set
from .scene import Pose, SkinnedTemplate
from .skinning import forward_kinematics, lbs_normals, lbs_points

UVMAP_MAGIC = b"AVUV1\n"


def vertex_normals(template: SkinnedTemplate) -> np.ndarray:
    """Area-weighted smooth vertex normals, (N, 3) unit float64."""
    v = np.asarray(template.vertices, dtype=np.float64)
    f = template.faces
    n = np.zeros_like(v)
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    face_n = np.cross(e1, e2)  # magnitude carries the area weight
    for c in range(3):
        np.add.at(n, f[:, c], face_n)
    lengths = np.linalg.norm(n, axis=1, keepdims=True)
    degenerate = lengths[:, 0] < 1e-12
    n[degenerate] = (0.0, 0.0, -1.0)
    lengths[degenerate] = 1.0
    return n / lengths


@dataclass
class PositionalUVMap:
    """Canonical geometry sampled on a UV grid."""

    resolution: int
    positions: np.ndarray  # (R, R, 3) float32
    normals: np.ndarray    # (R, R, 3) float32, unit where mask
    weights: np.ndarray    # (R, R, J) float32, rows sum to 1 where mask
    mask: np.ndarray       # (R, R) bool

    @property
    def texel_count(self) -> int:
        return int(self.mask.sum())

    def texel_indices(self) -> np.ndarray:
        """(T, 2) int32 (row, col) of covered texels in row-major order."""
        rows, cols = np.nonzero(self.mask)
        return np.stack([rows, cols], axis=1).astype(np.int32)


def bake_positional_map(template: SkinnedTemplate, resolution: int) -> PositionalUVMap:
    """Rasterize the template into a UV grid of ``resolution``^2 texels."""
    if resolution < 1:
        raise ValidationError("resolution must be positive")
    r = resolution
    uv = np.asarray(template.uv, dtype=np.float64)
    verts = np.asarray(template.vertices, dtype=np.float64)
    weights = np.asarray(template.blend_weights, dtype=np.float64)
    normals = vertex_normals(template)
    j = template.joint_count

    positions = np.zeros((r, r, 3))
    out_normals = np.zeros((r, r, 3))
    out_weights = np.zeros((r, r, j))
    mask = np.zeros((r, r), dtype=bool)

    for face in template.faces:
        a, b, c = uv[face[0]] * r, uv[face[1]] * r, uv[face[2]] * r
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(area) < 1e-12:
            continue
        x0 = max(0, int(np.floor(min(a[0], b[0], c[0]) - 0.5)))
        x1 = min(r, int(np.ceil(max(a[0], b[0], c[0]) + 0.5)))
        y0 = max(0, int(np.floor(min(a[1], b[1], c[1]) - 0.5)))
        y1 = min(r, int(np.ceil(max(a[1], b[1], c[1]) + 0.5)))
        if x0 >= x1 or y0 >= y1:
            continue
        px = np.arange(x0, x1) + 0.5
        py = np.arange(y0, y1) + 0.5
        gx, gy = np.meshgrid(px, py)
        w_a = ((b[0] - gx) * (c[1] - gy) - (b[1] - gy) * (c[0] - gx)) / area
        w_b = ((c[0] - gx) * (a[1] - gy) - (c[1] - gy) * (a[0] - gx)) / area
        w_c = 1.0 - w_a - w_b
        inside = (w_a >= -1e-9) & (w_b >= -1e-9) & (w_c >= -1e-9)
        free = ~mask[y0:y1, x0:x1]
        fill = inside & free
        if not np.any(fill):
            continue
        bary = np.stack([w_a, w_b, w_c], axis=-1)[fill]  # (t, 3)
        tri = face
        positions[y0:y1, x0:x1][fill] = bary @ verts[tri]
        blend_n = bary @ normals[tri]
        blend_n /= np.maximum(np.linalg.norm(blend_n, axis=1, keepdims=True), 1e-12)
        out_normals[y0:y1, x0:x1][fill] = blend_n
        out_weights[y0:y1, x0:x1][fill] = bary @ weights[tri]
        mask[y0:y1, x0:x1] |= fill

    wsum = out_weights.sum(axis=2)
    wsum[~mask] = 1.0
    out_weights /= wsum[:, :, None]
    return PositionalUVMap(
        resolution=r,
        positions=positions.astype(np.float32),
        normals=out_normals.astype(np.float32),
        weights=out_weights.astype(np.float32),
        mask=mask,
    )


def downsample_map(uvmap: PositionalUVMap, factor: int) -> PositionalUVMap:
    """Mask-aware box filter by an integer ``factor``; a coarse texel is
    covered when any of its fine texels is, and averages only those."""
    r = uvmap.resolution
    if factor < 1 or r % factor != 0:
        raise ValidationError(f"factor {factor} must divide resolution {r}")
    if factor == 1:
        return uvmap
    out_r = r // factor

    def blocks(arr):
        c = arr.shape[2]
        return arr.reshape(out_r, factor, out_r, factor, c).swapaxes(1, 2) \
                  .reshape(out_r, out_r, factor * factor, c)

    m = uvmap.mask.reshape(out_r, factor, out_r, factor).swapaxes(1, 2) \
                  .reshape(out_r, out_r, factor * factor)
    counts = m.sum(axis=2)
    mask = counts > 0
    denom = np.maximum(counts, 1).astype(np.float64)[:, :, None]

    def masked_mean(arr):
        vals = blocks(arr.astype(np.float64)) * m[:, :, :, None]
        return vals.sum(axis=2) / denom

    positions = masked_mean(uvmap.positions)
    normals = masked_mean(uvmap.normals)
    lengths = np.maximum(np.linalg.norm(normals, axis=2, keepdims=True), 1e-12)
    normals = normals / lengths
    normals[~mask] = 0.0
    weights = masked_mean(uvmap.weights)
    wsum = weights.sum(axis=2)
    wsum[~mask] = 1.0
    weights = weights / wsum[:, :, None]
    positions[~mask] = 0.0
    weights[~mask] = 0.0
    return PositionalUVMap(
        resolution=out_r,
        positions=positions.astype(np.float32),
        normals=normals.astype(np.float32),
        weights=weights.astype(np.float32),
        mask=mask,
    )


# ---------------------------------------------------------------------------
# posing and seeding
# ---------------------------------------------------------------------------

def pose_positional_map(uvmap: PositionalUVMap, template: SkinnedTemplate,
                        pose: Pose) -> np.ndarray:
    """(R, R, 3) float32 map of blend-skinned texel positions (zero outside
    the mask); the observation-space conditioning signal."""
    fk = forward_kinematics(template, pose)
    out = np.zeros((uvmap.resolution, uvmap.resolution, 3), dtype=np.float32)
    m = uvmap.mask
    posed = lbs_points(uvmap.weights[m], uvmap.positions[m], fk)
    out[m] = posed.astype(np.float32)
    return out


def texel_spacing(uvmap: PositionalUVMap) -> float:
    """Mean 3D distance between adjacent covered texels (right and down
    neighbors); the natural length scale of one texel on the surface."""
    m = uvmap.mask
    p = uvmap.positions.astype(np.float64)
    dists = []
    right = m[:, :-1] & m[:, 1:]
    if np.any(right):
        dists.append(np.linalg.norm(p[:, 1:][right] - p[:, :-1][right], axis=1))
    down = m[:-1, :] & m[1:, :]
    if np.any(down):
        dists.append(np.linalg.norm(p[1:, :][down] - p[:-1, :][down], axis=1))
    if not dists:
        return 0.02
    return float(np.concatenate(dists).mean())


def init_gaussians_from_uv(uvmap: PositionalUVMap, color=0.5,
                           scale: float | None = None) -> GaussianSet:
    """One Gaussian per covered texel, row-major; isotropic scales default
    to half the mean texel spacing."""
    idx = uvmap.texel_indices()
    if idx.shape[0] == 0:
        raise ValidationError("UV map covers no texels")
    if scale is None:
        scale = 0.5 * texel_spacing(uvmap)
    rows, cols = idx[:, 0], idx[:, 1]
    gs = make_gaussian_set(
        centers=uvmap.positions[rows, cols],
        colors=np.full((idx.shape[0], 3), float(color)),
        scales=np.full((idx.shape[0], 3), float(scale)),
        normals=uvmap.normals[rows, cols],
        blend_weights=uvmap.weights[rows, cols],
        dtype=np.float32,
    )
    gs.uv_texel = np.stack([cols, rows], axis=1).astype(np.int32)
    return gs


# ---------------------------------------------------------------------------
# cache file ("AVUV1"): magic + JSON header + raw little-endian arrays
# ---------------------------------------------------------------------------

def save_uvmap(uvmap: PositionalUVMap, path) -> None:
    fields = [
        ("positions", uvmap.positions, "<f4"),
        ("normals", uvmap.normals, "<f4"),
        ("weights", uvmap.weights, "<f4"),
        ("mask", uvmap.mask.astype(np.uint8), "|u1"),
    ]
    header = {
        "resolution": uvmap.resolution,
        "arrays": {name: {"shape": list(arr.shape), "dtype": dt}
                   for name, arr, dt in fields},
    }
    blob = io.BytesIO()
    blob.write(UVMAP_MAGIC)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob.write(struct.pack("<I", len(header_bytes)))
    blob.write(header_bytes)
    for _, arr, dt in fields:
        blob.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    with open(path, "wb") as f:
        f.write(blob.getvalue())


def load_uvmap(path) -> PositionalUVMap:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(UVMAP_MAGIC)] != UVMAP_MAGIC:
        raise ValidationError(f"{path}: not an AVUV1 map file")
    off = len(UVMAP_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    arrays = {}
    for name in ["positions", "normals", "weights", "mask"]:
        meta = header["arrays"][name]
        shape = tuple(meta["shape"])
        dt = np.dtype(meta["dtype"])
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, dtype=dt, count=count, offset=off) \
                         .reshape(shape).copy()
        off += count * dt.itemsize
    return PositionalUVMap(
        resolution=int(header["resolution"]),
        positions=arrays["positions"],
        normals=arrays["normals"],
        weights=arrays["weights"],
        mask=arrays["mask"].astype(bool),
    )
