"""Procedural capsule humanoid: the desk-scale ground-truth oracle.

An 11-joint skeleton (root, spine, head, paired shoulder/elbow and
hip/knee chains) carries ten capsule body parts.  The same capsule table
drives three artifacts that must agree with each other:

* a triangle-mesh ``SkinnedTemplate`` with one UV chart per part,
* a dense surface-sampled ground-truth ``GaussianSet`` with exact
  outward normals and front/back-distinct checkered colors,
* the analytic geometry handed to test oracles (ray-capsule hits).

``generate_synthetic`` renders the ground-truth set with this package's
own rasterizer into a full dataset directory: front-camera frames, masks,
normal maps, a held-out ring of eval cameras, and the camera/pose JSON.
Everything is deterministic under the config seed.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .dataset import PlacedCamera, write_image, write_json
from .errors import ValidationError
from .gaussians import GaussianSet, make_gaussian_set
from .guidance import (GUIDANCE_SIZE, DiffusionSchedule, OracleProvider,
                       crop_bounds, resize_bilinear)
from .rasterizer import DEFAULT_CONFIG, render
from .scene import Pose, SkinnedTemplate, load_template, look_at_camera, save_template
from .skinning import forward_kinematics, lbs_normals, lbs_points

JOINT_NAMES = ("root", "spine", "head", "shoulder_l", "elbow_l", "shoulder_r",
               "elbow_r", "hip_l", "knee_l", "hip_r", "knee_r")
JOINT_PARENTS = np.array([-1, 0, 1, 1, 3, 1, 5, 0, 7, 0, 9], dtype=np.int32)
JOINT_REST = np.array([
    [0.0, 0.0, 0.0],
    [0.0, 0.25, 0.0],
    [0.0, 0.55, 0.0],
    [-0.18, 0.45, 0.0],
    [-0.18, 0.17, 0.0],
    [0.18, 0.45, 0.0],
    [0.18, 0.17, 0.0],
    [-0.09, -0.05, 0.0],
    [-0.09, -0.45, 0.0],
    [0.09, -0.05, 0.0],
    [0.09, -0.45, 0.0],
])

CAMERA_RADIUS = 5.0
FOCAL_PER_PIXEL = 2.5  # fx = fy = 2.5 * resolution
EVAL_RING_COUNT = 8    # azimuths 0, 45, ..., 315; all but 0 are unseen
CHECKER_TILES = 6
CHECKER_DELTA = 0.08


@dataclass(frozen=True)
class BodyPart:
    """A capsule from p0 to p1 whose skin follows one or two joints."""

    name: str
    p0: tuple
    p1: tuple
    radius: float
    joint_a: int
    joint_b: int
    weight_rule: str      # "torso" | "single" | "toward_b" | "from_a"
    front_color: tuple
    back_color: tuple

    @property
    def axis(self):
        return np.asarray(self.p1, dtype=np.float64) - np.asarray(self.p0)

    @property
    def length(self):
        return float(np.linalg.norm(self.axis))

    @property
    def area(self):
        return 2.0 * np.pi * self.radius * self.length + 4.0 * np.pi * self.radius**2


def humanoid_parts():
    arm_front, arm_back = (0.85, 0.55, 0.15), (0.5, 0.2, 0.6)
    leg_front, leg_back = (0.15, 0.6, 0.6), (0.55, 0.4, 0.2)
    return [
        BodyPart("torso", (0, -0.08, 0), (0, 0.45, 0), 0.14, 0, 1, "torso",
                 (0.75, 0.2, 0.2), (0.2, 0.3, 0.75)),
        BodyPart("head", (0, 0.52, 0), (0, 0.64, 0), 0.09, 2, 2, "single",
                 (0.9, 0.75, 0.6), (0.25, 0.65, 0.3)),
        BodyPart("upper_arm_l", (-0.18, 0.45, 0), (-0.18, 0.17, 0), 0.048,
                 3, 4, "toward_b", arm_front, arm_back),
        BodyPart("fore_arm_l", (-0.18, 0.17, 0), (-0.18, -0.09, 0), 0.042,
                 3, 4, "from_a", arm_front, arm_back),
        BodyPart("upper_arm_r", (0.18, 0.45, 0), (0.18, 0.17, 0), 0.048,
                 5, 6, "toward_b", arm_front, arm_back),
        BodyPart("fore_arm_r", (0.18, 0.17, 0), (0.18, -0.09, 0), 0.042,
                 5, 6, "from_a", arm_front, arm_back),
        BodyPart("upper_leg_l", (-0.09, -0.05, 0), (-0.09, -0.45, 0), 0.065,
                 7, 8, "toward_b", leg_front, leg_back),
        BodyPart("lower_leg_l", (-0.09, -0.45, 0), (-0.09, -0.85, 0), 0.055,
                 7, 8, "from_a", leg_front, leg_back),
        BodyPart("upper_leg_r", (0.09, -0.05, 0), (0.09, -0.45, 0), 0.065,
                 9, 10, "toward_b", leg_front, leg_back),
        BodyPart("lower_leg_r", (0.09, -0.45, 0), (0.09, -0.85, 0), 0.055,
                 9, 10, "from_a", leg_front, leg_back),
    ]


def part_weights(part: BodyPart, positions, axial):
    """Blend weights (N, 11) for points on a part.

    ``axial`` is the 0..1 parameter along the capsule axis (cap points
    clamp to the ends).  Rules: the torso splits root/spine by world
    height across the spine joint; limb capsules belong to their upper
    joint, handing over half the weight across the shared joint so skin
    is continuous at elbows and knees.
    """
    n = len(axial)
    weights = np.zeros((n, len(JOINT_NAMES)))
    if part.weight_rule == "torso":
        frac = np.clip(positions[:, 1] / JOINT_REST[1, 1], 0.0, 1.0)
        weights[:, 0] = 1.0 - frac
        weights[:, 1] = frac
    elif part.weight_rule == "single":
        weights[:, part.joint_a] = 1.0
    elif part.weight_rule == "toward_b":
        wb = 0.5 * np.clip((axial - 0.8) / 0.2, 0.0, 1.0)
        weights[:, part.joint_b] = wb
        weights[:, part.joint_a] = 1.0 - wb
    elif part.weight_rule == "from_a":
        wb = 0.5 + 0.5 * np.clip(axial / 0.2, 0.0, 1.0)
        weights[:, part.joint_b] = wb
        weights[:, part.joint_a] = 1.0 - wb
    else:
        raise ValidationError(f"unknown weight rule {part.weight_rule!r}")
    return weights


def _part_frame(part: BodyPart):
    axis = part.axis / part.length
    helper = np.array([1.0, 0.0, 0.0])
    if abs(axis @ helper) > 0.9:
        helper = np.array([0.0, 0.0, 1.0])
    e1 = np.cross(helper, axis)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return axis, e1, e2


# ---------------------------------------------------------------------------
# template mesh
# ---------------------------------------------------------------------------

MESH_SEGMENTS = 16
MESH_CYL_ROWS = 9
MESH_CAP_ROWS = 4
CAP_POLE_ANGLE = 0.12  # leave a pinhole at each pole instead of degenerate tris
CHART_GRID = (4, 3)
CHART_MARGIN = 0.06


def _capsule_profile(part: BodyPart):
    """Rows of (offset along axis, ring radius, profile arc position)."""
    r, length = part.radius, part.length
    cap_arc = r * (np.pi / 2 - CAP_POLE_ANGLE)
    total = 2 * cap_arc + length
    rows = []
    for theta in np.linspace(CAP_POLE_ANGLE, np.pi / 2, MESH_CAP_ROWS):
        arc = r * (theta - CAP_POLE_ANGLE)
        rows.append((-r * np.cos(theta), r * np.sin(theta), arc / total))
    for s in np.linspace(0.0, 1.0, MESH_CYL_ROWS + 1)[1:]:
        rows.append((s * length, r, (cap_arc + s * length) / total))
    for theta in np.linspace(np.pi / 2, CAP_POLE_ANGLE, MESH_CAP_ROWS)[1:]:
        arc = cap_arc + length + r * (np.pi / 2 - theta)
        rows.append((length + r * np.cos(theta), r * np.sin(theta), arc / total))
    return rows


def _chart_rect(index):
    cols, rows = CHART_GRID
    col, row = index % cols, index // cols
    w, h = 1.0 / cols, 1.0 / rows
    return (col * w + CHART_MARGIN * w, row * h + CHART_MARGIN * h,
            w * (1 - 2 * CHART_MARGIN), h * (1 - 2 * CHART_MARGIN))


def build_humanoid_template() -> SkinnedTemplate:
    parts = humanoid_parts()
    vertices, uvs, weights, faces = [], [], [], []
    for index, part in enumerate(parts):
        axis, e1, e2 = _part_frame(part)
        p0 = np.asarray(part.p0, dtype=np.float64)
        u0, v0, uw, vh = _chart_rect(index)
        rows = _capsule_profile(part)
        base = len(vertices)
        n_cols = MESH_SEGMENTS + 1
        axial = []
        for along, ring_r, profile in rows:
            for j in range(n_cols):
                phi = 2.0 * np.pi * j / MESH_SEGMENTS
                radial = np.cos(phi) * e1 + np.sin(phi) * e2
                vertices.append(p0 + along * axis + ring_r * radial)
                uvs.append((u0 + uw * j / MESH_SEGMENTS, v0 + vh * profile))
                axial.append(np.clip(along / part.length, 0.0, 1.0))
        block = np.asarray(vertices[base:])
        weights.append(part_weights(part, block, np.asarray(axial)))
        for r in range(len(rows) - 1):
            for j in range(MESH_SEGMENTS):
                a = base + r * n_cols + j
                b = a + 1
                c = a + n_cols
                d = c + 1
                faces.append((a, b, d))
                faces.append((a, d, c))
    return SkinnedTemplate(
        vertices=np.asarray(vertices, dtype=np.float32),
        faces=np.asarray(faces, dtype=np.int32),
        uv=np.asarray(uvs, dtype=np.float32),
        joint_parents=JOINT_PARENTS.copy(),
        rest_joints=JOINT_REST.astype(np.float32),
        blend_weights=np.concatenate(weights).astype(np.float32),
    )


# ---------------------------------------------------------------------------
# ground-truth gaussians
# ---------------------------------------------------------------------------

def _checker(part: BodyPart, u_loc, v_loc, front_mask):
    base = np.where(front_mask[:, None],
                    np.asarray(part.front_color)[None, :],
                    np.asarray(part.back_color)[None, :])
    parity = (np.floor(u_loc * CHECKER_TILES) + np.floor(v_loc * CHECKER_TILES)) % 2
    delta = CHECKER_DELTA * (2.0 * parity - 1.0)
    return np.clip(base + delta[:, None], 0.02, 0.98)


def sample_surface_gaussians(count, seed):
    """Uniform area sampling of all capsules; returns the gaussian set and
    its blend weights (N, 11)."""
    parts = humanoid_parts()
    areas = np.array([p.area for p in parts])
    rng = np.random.default_rng(seed)
    exact = count * areas / areas.sum()
    shares = np.floor(exact).astype(int)
    for index in np.argsort(exact - shares)[::-1][: count - shares.sum()]:
        shares[index] += 1

    spacing = float(np.sqrt(areas.sum() / count))
    scale = 0.6 * spacing
    centers, normals, colors, weight_rows = [], [], [], []
    for part, n_part in zip(parts, shares):
        if n_part == 0:
            continue
        axis, e1, e2 = _part_frame(part)
        p0 = np.asarray(part.p0, dtype=np.float64)
        p1 = np.asarray(part.p1, dtype=np.float64)
        cyl_frac = 2 * np.pi * part.radius * part.length / part.area

        pick = rng.random(n_part)
        s = rng.random(n_part)
        phi = 2.0 * np.pi * rng.random(n_part)
        cos_t = rng.random(n_part)          # hemisphere polar angle
        on_cap = pick >= cyl_frac
        top_cap = on_cap & (rng.random(n_part) < 0.5)

        radial = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
        sin_t = np.sqrt(1.0 - cos_t**2)
        axis_sign = np.where(top_cap, 1.0, -1.0)
        cap_dir = sin_t[:, None] * radial + (axis_sign * cos_t)[:, None] * axis
        cap_base = np.where(top_cap[:, None], p1[None, :], p0[None, :])

        pos = np.where(on_cap[:, None],
                       cap_base + part.radius * cap_dir,
                       p0[None, :] + s[:, None] * (p1 - p0)[None, :] + part.radius * radial)
        nrm = np.where(on_cap[:, None], cap_dir, radial)
        axial = np.where(on_cap, np.where(top_cap, 1.0, 0.0), s)

        # profile arc position for the checker pattern: pole-to-pole
        cap_arc = part.radius * np.pi / 2
        total_arc = 2 * cap_arc + part.length
        pole_arc = part.radius * np.arccos(np.clip(cos_t, 0.0, 1.0))
        v_loc = np.where(
            on_cap,
            np.where(top_cap, total_arc - pole_arc, pole_arc) / total_arc,
            (cap_arc + s * part.length) / total_arc)
        front = nrm[:, 2] < 0.0   # subject faces -z (toward the capture camera)
        colors.append(_checker(part, phi / (2 * np.pi), v_loc, front))
        centers.append(pos)
        normals.append(nrm)
        weight_rows.append(part_weights(part, pos, axial))

    centers = np.concatenate(centers)
    gs = make_gaussian_set(
        centers=centers,
        colors=np.concatenate(colors),
        opacities=np.full(len(centers), 0.95),
        scales=np.full((len(centers), 3), scale),
        normals=np.concatenate(normals),
        dtype=np.float64,
    )
    return gs, np.concatenate(weight_rows)


# ---------------------------------------------------------------------------
# motion and cameras
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    frame_count: int = 60
    resolution: int = 128
    swing_amplitude: float = 0.6   # radians, shoulder sagittal swing
    swing_cycles: float = 2.0      # walk cycles over the sequence
    gaussian_count: int = 24000
    seed: int = 0

    def __post_init__(self):
        if self.frame_count < 2:
            raise ValidationError("frame_count must be at least 2")
        if self.resolution < 32:
            raise ValidationError("resolution must be at least 32")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**data)


def walk_pose(config: SynthConfig, frame_index: int) -> Pose:
    """Arm/leg swing walk cycle; frame 0 is exactly the rest pose."""
    phase = 2.0 * np.pi * config.swing_cycles * frame_index / config.frame_count
    amp = config.swing_amplitude
    swing = np.sin(phase)
    bend = 0.5 * (1.0 - np.cos(phase))   # zero at phase 0, peaks mid-cycle
    rotations = np.zeros((len(JOINT_NAMES), 3))
    rotations[3, 0] = amp * swing          # left shoulder
    rotations[5, 0] = -amp * swing         # right shoulder, counter-swing
    rotations[4, 0] = 0.3 * amp * bend     # elbows flex together
    rotations[6, 0] = 0.3 * amp * bend
    rotations[7, 0] = -0.66 * amp * swing  # hips oppose their shoulder
    rotations[9, 0] = 0.66 * amp * swing
    rotations[8, 0] = 0.4 * amp * bend
    rotations[10, 0] = 0.4 * amp * bend
    rotations[1, 2] = 0.08 * np.sin(2.0 * phase)   # slight spine sway
    rotations[2, 0] = 0.05 * swing
    root = np.array([0.0, 0.0075 * (1.0 - np.cos(2.0 * phase)), 0.0])
    return Pose(rotations, root)


def capture_camera(resolution: int) -> PlacedCamera:
    focal = FOCAL_PER_PIXEL * resolution
    cam = look_at_camera(0.0, 0.0, CAMERA_RADIUS, fx=focal, fy=focal,
                         width=resolution, height=resolution)
    return PlacedCamera(camera=cam, azimuth_deg=0.0, elevation_deg=0.0,
                        radius=CAMERA_RADIUS)


def eval_ring_cameras(resolution: int):
    focal = FOCAL_PER_PIXEL * resolution
    ring = []
    for k in range(EVAL_RING_COUNT):
        azimuth = 360.0 * k / EVAL_RING_COUNT
        cam = look_at_camera(azimuth, 0.0, CAMERA_RADIUS, fx=focal, fy=focal,
                             width=resolution, height=resolution)
        ring.append(PlacedCamera(camera=cam, azimuth_deg=azimuth,
                                 elevation_deg=0.0, radius=CAMERA_RADIUS))
    return ring


# ---------------------------------------------------------------------------
# analytic silhouettes
# ---------------------------------------------------------------------------

def posed_capsules(template: SkinnedTemplate, pose: Pose):
    """Each part's capsule endpoints moved by the same skinning that moves
    its surface gaussians; radii are unchanged."""
    from .skinning import forward_kinematics, lbs_points

    fk = forward_kinematics(template, pose)
    capsules = []
    for part in humanoid_parts():
        ends = np.array([part.p0, part.p1], dtype=np.float64)
        weights = part_weights(part, ends, np.array([0.0, 1.0]))
        q0, q1 = lbs_points(weights, ends, fk)
        capsules.append((q0, q1, part.radius))
    return capsules


def _ray_segment_distance(origin, directions, p0, p1):
    """Min distance from each ray (shared origin, t >= 0) to a segment.

    Alternating minimization of the convex quadratic |w0 + t*d - s*u|^2
    over the box t >= 0, s in [0, 1]: solve the unconstrained saddle,
    then clamp one variable and re-solve the other a few times (exact for
    this two-variable case).
    """
    u = p1 - p0
    uu = float(u @ u)
    w0 = origin - p0
    dd = np.einsum("ij,ij->i", directions, directions)
    du = directions @ u
    dw = directions @ w0
    uw = float(u @ w0)
    den = dd * uu - du * du
    parallel = den <= 1e-12 * dd * uu
    t = np.where(parallel, 0.0,
                 (uw * du - dw * uu) / np.where(parallel, 1.0, den))
    t = np.maximum(t, 0.0)
    for _ in range(3):
        s = np.clip((uw + t * du) / uu, 0.0, 1.0)
        t = np.maximum((s * du - dw) / dd, 0.0)
    residual = (w0[None, :] + t[:, None] * directions - s[:, None] * u)
    return np.linalg.norm(residual, axis=1)


def capsule_silhouette(camera, capsules):
    """(H, W) bool: pixel centers whose rays pass through any capsule."""
    from .scene import camera_ray

    h, w = camera.height, camera.width
    xs, ys = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    # camera_ray vectorizes poorly; build directions directly
    x_cam = (xs - camera.cx) / camera.fx
    y_cam = (ys - camera.cy) / camera.fy
    dirs_cam = np.stack([x_cam, y_cam, np.ones_like(x_cam)], axis=-1).reshape(-1, 3)
    dirs = dirs_cam @ camera.rotation   # R^T applied row-wise
    origin = camera.center
    hit = np.zeros(h * w, dtype=bool)
    for q0, q1, radius in capsules:
        miss = ~hit
        if not miss.any():
            break
        dist = _ray_segment_distance(origin, dirs[miss], q0, q1)
        hit[np.flatnonzero(miss)[dist <= radius]] = True
    return hit.reshape(h, w)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _render_views(gs: GaussianSet, weights, template, pose, cameras,
                  want_normals=False):
    fk = forward_kinematics(template, pose)
    posed_centers = lbs_points(weights, gs.centers, fk)
    posed_normals = lbs_normals(weights, gs.normals, fk)
    posed = gs.posed(posed_centers, posed_normals)
    outputs = []
    for cam in cameras:
        out = render(posed, cam, attribute="color", config=DEFAULT_CONFIG)
        entry = {"rgb": out.image.data, "alpha": out.alpha.data[:, :, 0]}
        if want_normals:
            nrm = render(posed, cam, attribute="normal", config=DEFAULT_CONFIG)
            entry["normal"] = np.clip(nrm.image.data, -1.0, 1.0)
        outputs.append(entry)
    return outputs


def generate_synthetic(config: SynthConfig, out_dir) -> Path:
    """Write a complete synthetic capture under ``out_dir``."""
    out = Path(out_dir)
    if out.exists():
        shutil.rmtree(out)
    for sub in ("frames", "masks", "normals"):
        (out / sub).mkdir(parents=True)

    template = build_humanoid_template()
    save_template(template, out / "template.avft")
    gs, weights = sample_surface_gaussians(config.gaussian_count, config.seed)

    placed = capture_camera(config.resolution)
    ring = eval_ring_cameras(config.resolution)
    for k in range(len(ring)):
        (out / "eval" / f"cam_{k:02d}").mkdir(parents=True)

    poses = [walk_pose(config, t) for t in range(config.frame_count)]
    for t, pose in enumerate(poses):
        front = _render_views(gs, weights, template, pose, [placed.camera],
                              want_normals=True)[0]
        name = f"{t:06d}.png"
        mask = capsule_silhouette(placed.camera, posed_capsules(template, pose))
        write_image(out / "frames" / name, front["rgb"], "rgb")
        write_image(out / "masks" / name, mask, "mask")
        write_image(out / "normals" / name, front["normal"], "normal")
        ring_renders = _render_views(gs, weights, template, pose,
                                     [p.camera for p in ring])
        for k, view in enumerate(ring_renders):
            write_image(out / "eval" / f"cam_{k:02d}" / name, view["rgb"], "rgb")

    write_json(out / "cameras.json", {
        "capture": [placed.to_dict() for _ in range(config.frame_count)],
        "eval": [p.to_dict() for p in ring],
    })
    write_json(out / "poses.json", {
        "frames": [{"joint_rotations": pose.joint_rotations.tolist(),
                    "root_translation": pose.root_translation.tolist()}
                   for pose in poses],
    })
    write_json(out / "synth.json", config.to_dict())
    return out


class GroundTruthProvider:
    """Guidance provider that renders the generating scene itself as the
    denoising target.

    Rebuilt from a capture directory: the dense surface sampling is
    reproducible from the stored config, so the provider can show the
    trainer what any camera would have seen.  The trainer announces each
    guidance render through ``record_context``; the matching ground-truth
    view is rendered, cropped with the same mask, and handed to an
    exact-noise oracle.  Canonical-space views repeat every epoch and are
    cached; observation views change with the frame and are not.
    """

    def __init__(self, root, schedule: DiffusionSchedule | None = None):
        root = Path(root)
        self.config = SynthConfig.from_dict(
            json.loads((root / "synth.json").read_text()))
        self.template = load_template(root / "template.avft")
        self.gaussians, self.weights = sample_surface_gaussians(
            self.config.gaussian_count, self.config.seed)
        self.oracle = OracleProvider(schedule or DiffusionSchedule())
        self._canonical_cache = {}

    def _view(self, space, frame_index, camera):
        if space == "canonical":
            key = (round(camera.azimuth_deg, 6), round(camera.elevation_deg, 6))
            cached = self._canonical_cache.get(key)
            if cached is not None:
                return cached
            pose = Pose.identity(len(JOINT_PARENTS))
        else:
            pose = walk_pose(self.config, frame_index)
        image = _render_views(self.gaussians, self.weights, self.template,
                              pose, [camera.camera])[0]["rgb"]
        image = np.clip(image, 0.0, 1.0)
        if space == "canonical":
            self._canonical_cache[key] = image
        return image

    def record_context(self, space, frame_index, camera, mask):
        bounds = crop_bounds(mask)
        if bounds is None:
            return
        image = self._view(space, frame_index, camera)
        r0, r1, c0, c1 = bounds
        self.oracle.set_target(
            resize_bilinear(image[r0:r1, c0:c1], GUIDANCE_SIZE, GUIDANCE_SIZE))

    def predict_noise(self, request):
        return self.oracle.predict_noise(request)
