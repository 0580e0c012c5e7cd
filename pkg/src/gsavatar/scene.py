"""Fundamental geometric and image types: cameras, rays, images, poses and
the skinned template every other module deforms and renders.

Coordinate conventions
----------------------
World: right-handed, +y up (subjects stand along +y).
Camera: OpenCV-style; looks along +z, x right, y down.  ``rotation`` is the
3x3 world-to-camera matrix R, ``translation`` the 3-vector T, so a world
point X maps to camera space as ``R @ X + T``.
Image: u right, v down, origin at the top-left corner; the center of pixel
(i, j) sits at continuous coordinates (i + 0.5, j + 0.5).

Azimuth 0 / elevation 0 is the monocular capture direction: the camera sits
on the -z world axis facing +z (the subject's front).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, ValidationError

TEMPLATE_MAGIC = b"AVFT1\n"


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with OpenCV world-to-camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray    # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        T = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", T)
        if self.width < 1 or self.height < 1:
            raise ValidationError("camera image size must be at least 1x1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if R.shape != (3, 3):
            raise ValidationError("rotation must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise ValidationError("rotation must be orthonormal (R^T R = I)")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, -R^T T."""
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]),
            cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            rotation=np.asarray(d["rotation"], dtype=np.float64),
            translation=np.asarray(d["translation"], dtype=np.float64),
        )


@dataclass(frozen=True)
class Ray:
    """World-space ray with a unit direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValidationError("ray direction must be unit length")


@dataclass
class ImageBuffer:
    """Row-major scalar image grid.

    ``data`` has shape (height, width, channels).  Color and visibility
    values live in [0, 1]; normal-encoded images live in [-1, 1].
    """

    width: int
    height: int
    channels: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.shape != (self.height, self.width, self.channels):
            raise ValidationError(
                f"image data shape {self.data.shape} does not match "
                f"({self.height}, {self.width}, {self.channels})"
            )
        if not (1 <= self.channels <= 4):
            raise ValidationError("channels must be in 1..4")

    @classmethod
    def from_array(cls, data: np.ndarray) -> "ImageBuffer":
        data = np.asarray(data)
        if data.ndim == 2:
            data = data[:, :, None]
        h, w, c = data.shape
        return cls(width=w, height=h, channels=c, data=data)

    def validate_finite(self):
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("image contains NaN or Inf")
        return self


@dataclass
class Pose:
    """Skeleton pose: per-joint axis-angle rotations plus a root translation."""

    joint_rotations: np.ndarray  # (J, 3) axis-angle, radians
    root_translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64).reshape(-1, 3)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)

    @property
    def joint_count(self) -> int:
        return self.joint_rotations.shape[0]

    @classmethod
    def identity(cls, joint_count: int) -> "Pose":
        return cls(np.zeros((joint_count, 3)), np.zeros(3))

    def copy(self) -> "Pose":
        return Pose(self.joint_rotations.copy(), self.root_translation.copy())


@dataclass
class SkinnedTemplate:
    """Rest-pose mesh with joint tree, blend weights and a UV chart."""

    vertices: np.ndarray       # (N, 3)
    faces: np.ndarray          # (M, 3) int
    uv: np.ndarray             # (N, 2) in [0,1]^2
    joint_parents: np.ndarray  # (J,) int, root = -1
    rest_joints: np.ndarray    # (J, 3)
    blend_weights: np.ndarray  # (N, J), rows sum to 1

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float32).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int32).reshape(-1, 3)
        self.uv = np.ascontiguousarray(self.uv, dtype=np.float32).reshape(-1, 2)
        self.joint_parents = np.ascontiguousarray(self.joint_parents, dtype=np.int32).reshape(-1)
        self.rest_joints = np.ascontiguousarray(self.rest_joints, dtype=np.float32).reshape(-1, 3)
        self.blend_weights = np.ascontiguousarray(self.blend_weights, dtype=np.float32)
        self.validate()

    @property
    def vertex_count(self) -> int:
        return self.vertices.shape[0]

    @property
    def joint_count(self) -> int:
        return self.joint_parents.shape[0]

    def validate(self):
        n = self.vertex_count
        j = self.joint_count
        if self.uv.shape[0] != n:
            raise ValidationError("uv count must match vertex count")
        if self.blend_weights.shape != (n, j):
            raise ValidationError("blend weights must be (N, J)")
        if self.rest_joints.shape != (j, 3):
            raise ValidationError("rest joints must be (J, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ValidationError("face index out of range")
        row_sums = self.blend_weights.sum(axis=1)
        if not np.allclose(row_sums, 1.0, atol=1e-5):
            raise ValidationError("blend-weight rows must sum to 1")
        if np.any(self.blend_weights < -1e-7):
            raise ValidationError("blend weights must be nonnegative")
        self._validate_tree()

    def _validate_tree(self):
        parents = self.joint_parents
        roots = np.flatnonzero(parents < 0)
        if len(roots) != 1:
            raise ValidationError("joint tree must have exactly one root")
        # walk to the root from every joint; revisits mean a cycle
        for j in range(len(parents)):
            seen = set()
            cur = j
            while cur >= 0:
                if cur in seen:
                    raise ValidationError("joint parent array contains a cycle")
                seen.add(cur)
                cur = int(parents[cur])

    def topological_order(self) -> np.ndarray:
        """Joint ordering with every parent before its children."""
        parents = self.joint_parents
        order, placed = [], set()
        while len(order) < len(parents):
            progressed = False
            for j in range(len(parents)):
                if j in placed:
                    continue
                p = int(parents[j])
                if p < 0 or p in placed:
                    order.append(j)
                    placed.add(j)
                    progressed = True
            if not progressed:  # unreachable after _validate_tree
                raise ValidationError("joint parent array contains a cycle")
        return np.asarray(order, dtype=np.int32)


def camera_ray(camera: Camera, px: tuple[float, float] | np.ndarray) -> Ray:
    """World-space ray through continuous image coordinates ``px``.

    ``px`` addresses the image plane directly: the center of pixel (i, j)
    is (i + 0.5, j + 0.5).  Out-of-bounds coordinates raise BoundsError.
    """
    u, v = float(px[0]), float(px[1])
    if not (0.0 <= u < camera.width and 0.0 <= v < camera.height):
        raise BoundsError(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    d_cam = np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])
    d_world = camera.rotation.T @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(origin=camera.center, direction=d_world)


def look_at_camera(
    azimuth_deg: float,
    elevation_deg: float,
    radius: float,
    target: np.ndarray | tuple[float, float, float] = (0.0, 0.0, 0.0),
    fx: float = 320.0,
    fy: float = 320.0,
    cx: float | None = None,
    cy: float | None = None,
    width: int = 128,
    height: int = 128,
) -> Camera:
    """Camera on the sphere of ``radius`` around ``target``, looking at it.

    Azimuth 0 / elevation 0 places the camera on the -z axis through the
    target, facing +z (the subject front); azimuth increases toward the +x
    side, elevation raises the camera toward +y.
    """
    if radius <= 0:
        raise ValidationError("radius must be positive")
    target = np.asarray(target, dtype=np.float64).reshape(3)
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    offset = np.array([
        np.sin(az) * np.cos(el),
        np.sin(el),
        -np.cos(az) * np.cos(el),
    ]) * radius
    center = target + offset

    forward = target - center
    forward /= np.linalg.norm(forward)
    up = np.array([0.0, 1.0, 0.0])
    if abs(forward @ up) > 0.999:  # straight up/down view: fall back to z
        up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward], axis=0)
    T = -R @ center
    return Camera(
        fx=fx, fy=fy,
        cx=width / 2.0 if cx is None else cx,
        cy=height / 2.0 if cy is None else cy,
        width=width, height=height, rotation=R, translation=T,
    )


# ---------------------------------------------------------------------------
# Template container ("AVFT1"): magic + JSON header line + raw little-endian
# arrays (f32 for floats, i32 for indices) in the header's field order.
# ---------------------------------------------------------------------------

def save_template(template: SkinnedTemplate, path) -> None:
    fields = [
        ("vertices", template.vertices, "<f4"),
        ("faces", template.faces, "<i4"),
        ("uv", template.uv, "<f4"),
        ("joint_parents", template.joint_parents, "<i4"),
        ("rest_joints", template.rest_joints, "<f4"),
        ("blend_weights", template.blend_weights, "<f4"),
    ]
    header = {name: {"shape": list(arr.shape), "dtype": dt} for name, arr, dt in fields}
    blob = io.BytesIO()
    blob.write(TEMPLATE_MAGIC)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob.write(struct.pack("<I", len(header_bytes)))
    blob.write(header_bytes)
    for _, arr, dt in fields:
        blob.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    with open(path, "wb") as f:
        f.write(blob.getvalue())


def load_template(path) -> SkinnedTemplate:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(TEMPLATE_MAGIC)] != TEMPLATE_MAGIC:
        raise ValidationError(f"{path}: not an AVFT1 template file")
    off = len(TEMPLATE_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    arrays = {}
    for name in ["vertices", "faces", "uv", "joint_parents", "rest_joints", "blend_weights"]:
        meta = header[name]
        shape = tuple(meta["shape"])
        dt = np.dtype(meta["dtype"])
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(shape).copy()
        off += count * dt.itemsize
    return SkinnedTemplate(**arrays)
