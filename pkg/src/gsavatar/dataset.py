"""Dataset directory layout, image codecs, and the loader.

Layout (one directory per capture):

    frames/%06d.png      8-bit rgb
    masks/%06d.png       8-bit grayscale, foreground >= 128
    normals/%06d.png     optional, unit vectors mapped (n+1)/2 per channel
    cameras.json         intrinsics + per-frame extrinsics + eval ring
    poses.json           per-frame joint axis-angles + root translation
    template.avft        skinned template
    eval/cam_%02d/%06d.png  optional ground-truth ring renders
    synth.json           generator echo (synthetic captures only)

Cameras carry their spherical placement (azimuth, elevation, radius)
alongside the matrices so relative camera deltas for guidance never have
to be reverse-engineered from extrinsics.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError
from .scene import Camera, Pose, SkinnedTemplate, load_template

IMAGE_KINDS = ("rgb", "mask", "normal", "visibility")


def write_image(path, array, kind="rgb"):
    path = Path(path)
    array = np.asarray(array)
    if kind == "rgb":
        if array.ndim != 3 or array.shape[2] != 3:
            raise ValidationError("rgb image must be (H, W, 3)")
        data = np.clip(np.round(array * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(data, mode="RGB").save(path)
    elif kind == "mask":
        if array.ndim != 2:
            raise ValidationError("mask must be (H, W)")
        data = np.where(array.astype(bool), 255, 0).astype(np.uint8)
        Image.fromarray(data, mode="L").save(path)
    elif kind == "normal":
        if array.ndim != 3 or array.shape[2] != 3:
            raise ValidationError("normal image must be (H, W, 3)")
        data = np.clip(np.round((array + 1.0) * 0.5 * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(data, mode="RGB").save(path)
    elif kind == "visibility":
        if array.ndim != 2:
            raise ValidationError("visibility image must be (H, W)")
        data = np.clip(np.round(array * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(data, mode="L").save(path)
    else:
        raise ValidationError(f"unknown image kind {kind!r}")


def read_image(path, kind="rgb"):
    path = Path(path)
    if kind not in IMAGE_KINDS:
        raise ValidationError(f"unknown image kind {kind!r}")
    with Image.open(path) as img:
        if kind in ("rgb", "normal"):
            arr = np.asarray(img.convert("RGB"), dtype=np.float64)
        else:
            arr = np.asarray(img.convert("L"), dtype=np.float64)
    if kind == "rgb":
        return arr / 255.0
    if kind == "mask":
        return arr >= 128.0
    if kind == "normal":
        return arr / 255.0 * 2.0 - 1.0
    return arr / 255.0


@dataclass
class PlacedCamera:
    """A camera plus where it sits on the capture sphere."""

    camera: Camera
    azimuth_deg: float
    elevation_deg: float
    radius: float

    def to_dict(self):
        return {"azimuth_deg": self.azimuth_deg,
                "elevation_deg": self.elevation_deg,
                "radius": self.radius,
                "camera": self.camera.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(camera=Camera.from_dict(d["camera"]),
                   azimuth_deg=float(d["azimuth_deg"]),
                   elevation_deg=float(d["elevation_deg"]),
                   radius=float(d["radius"]))


@dataclass
class Frame:
    rgb: np.ndarray          # (H, W, 3) in [0, 1]
    mask: np.ndarray         # (H, W) bool
    normal: np.ndarray | None
    pose: Pose
    camera: PlacedCamera


@dataclass
class EvalView:
    placed: PlacedCamera
    images: list  # (H, W, 3) per frame


@dataclass
class Dataset:
    frames: list
    template: SkinnedTemplate
    eval_views: list
    root: Path

    @property
    def frame_count(self):
        return len(self.frames)

    @property
    def resolution(self):
        return self.frames[0].rgb.shape[0]

    @property
    def has_normals(self):
        return self.frames[0].normal is not None


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"missing required file {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed JSON in {path}: {exc}") from exc


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"dataset directory {root} does not exist")

    cameras_doc = _load_json(root / "cameras.json")
    poses_doc = _load_json(root / "poses.json")
    try:
        capture = [PlacedCamera.from_dict(d) for d in cameras_doc["capture"]]
        eval_entries = [PlacedCamera.from_dict(d) for d in cameras_doc.get("eval", [])]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed {root / 'cameras.json'}: {exc}") from exc
    try:
        poses = [Pose(np.asarray(p["joint_rotations"], dtype=np.float64),
                      np.asarray(p["root_translation"], dtype=np.float64))
                 for p in poses_doc["frames"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed {root / 'poses.json'}: {exc}") from exc

    frame_paths = sorted((root / "frames").glob("*.png"))
    if not frame_paths:
        raise ValidationError(f"no frames found under {root / 'frames'}")
    if len(frame_paths) != len(poses):
        raise ValidationError(
            f"{root / 'poses.json'} has {len(poses)} poses for {len(frame_paths)} frames")
    if len(frame_paths) != len(capture):
        raise ValidationError(
            f"{root / 'cameras.json'} has {len(capture)} capture cameras for "
            f"{len(frame_paths)} frames")

    template = load_template(root / "template.avft")
    for pose in poses:
        if pose.joint_count != template.joint_count:
            raise ValidationError(
                f"{root / 'poses.json'} pose has {pose.joint_count} joints, "
                f"template has {template.joint_count}")

    normals_dir = root / "normals"
    has_normals = normals_dir.is_dir()
    if not has_normals:
        warnings.warn(f"{normals_dir} missing: normal supervision disabled")

    frames = []
    shape = None
    for i, frame_path in enumerate(frame_paths):
        rgb = read_image(frame_path, "rgb")
        if shape is None:
            shape = rgb.shape
        elif rgb.shape != shape:
            raise ValidationError(f"{frame_path} size {rgb.shape[:2]} differs from {shape[:2]}")
        mask_path = root / "masks" / frame_path.name
        if not mask_path.exists():
            raise ValidationError(f"missing mask {mask_path}")
        mask = read_image(mask_path, "mask")
        normal = None
        if has_normals:
            normal_path = normals_dir / frame_path.name
            if not normal_path.exists():
                raise ValidationError(f"missing normal map {normal_path}")
            normal = read_image(normal_path, "normal")
        frames.append(Frame(rgb=rgb, mask=mask, normal=normal,
                            pose=poses[i], camera=capture[i]))

    eval_views = []
    eval_root = root / "eval"
    for k, placed in enumerate(eval_entries):
        cam_dir = eval_root / f"cam_{k:02d}"
        if not cam_dir.is_dir():
            warnings.warn(f"{cam_dir} missing: eval ring view {k} skipped")
            continue
        images = [read_image(cam_dir / p.name, "rgb") for p in frame_paths]
        eval_views.append(EvalView(placed=placed, images=images))

    return Dataset(frames=frames, template=template, eval_views=eval_views, root=root)


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
