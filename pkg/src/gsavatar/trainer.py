"""Two-stage avatar training: photometric fitting of the captured views,
then guidance-driven completion of the regions no camera saw."""

import json
import warnings
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import PlacedCamera
from .decoder import (
    decode,
    decode_backward,
    encode_pose,
    encode_pose_backward,
    init_canonical_features,
    init_decoder,
)
from .errors import ValidationError
from .guidance import CameraDelta, DiffusionSchedule, sds_gradient
from .losses import frobenius, photometric_loss, psnr, ssim
from .optim import OptimizerState, TrainConfig, adam_step, schedule_epoch, sds_weight
from .rasterizer import mark_visibility, render, render_backward
from .scene import look_at_camera
from .skinning import Pose, forward_kinematics, lbs_backward, lbs_normals, lbs_points
from .uvmap import bake_positional_map, init_gaussians_from_uv

STAGE1_CHECKPOINT = "stage1.avck"
STAGE2_CHECKPOINT = "stage2.avck"
METRICS_LOG = "metrics.jsonl"


@dataclass
class AvatarState:
    """Everything the optimizer touches, plus the fixed scaffolding."""

    template: object
    uvmap: object
    base: object               # canonical anchor Gaussians, one per texel
    features: np.ndarray       # (T, 32) learnable texel features
    params: object             # decoder + pose encoder weights
    pose_joints: np.ndarray    # (F, J, 3) additive axis-angle offsets
    pose_root: np.ndarray      # (F, 3) additive root offsets
    optimizer: OptimizerState
    stage: int = 1
    epochs_run: int = 0
    canonical_condition: np.ndarray | None = None

    @property
    def texel_count(self) -> int:
        return self.base.count

    @property
    def joint_count(self) -> int:
        return self.template.rest_joints.shape[0]


@dataclass
class ViewSelection:
    cameras: list              # the azimuth ring followed by the overhead view
    visibility: np.ndarray     # visible fraction per camera, nan where skipped
    unseen_mask: np.ndarray    # bool per camera

    @property
    def unseen(self) -> list:
        return [c for c, u in zip(self.cameras, self.unseen_mask) if u]


@dataclass
class StepReport:
    total: float
    terms: dict
    skin: object               # pose gradients for the frame that was fit


@dataclass
class _Forward:
    pose: Pose
    fk: object
    cond: np.ndarray | None
    cond_cache: object
    result: object
    cache: object
    centers_c: np.ndarray
    normals_c: np.ndarray
    rgb: object
    normal: object


def init_avatar(dataset, config: TrainConfig) -> AvatarState:
    dt = config.np_dtype
    uvmap = bake_positional_map(dataset.template, config.map_resolution)
    base = init_gaussians_from_uv(uvmap).astype(dt)
    features = init_canonical_features(base.count, seed=config.seed, dtype=dt)
    params = init_decoder(seed=config.seed, dtype=dt)
    joints = dataset.template.rest_joints.shape[0]
    return AvatarState(
        template=dataset.template,
        uvmap=uvmap,
        base=base,
        features=features,
        params=params,
        pose_joints=np.zeros((dataset.frame_count, joints, 3)),
        pose_root=np.zeros((dataset.frame_count, 3)),
        optimizer=OptimizerState(),
    )


def _check_dataset(dataset, config: TrainConfig) -> None:
    if dataset.frame_count < 1:
        raise ValidationError("dataset has no frames")
    if dataset.resolution != config.resolution:
        raise ValidationError(
            f"dataset resolution {dataset.resolution} does not match "
            f"configured resolution {config.resolution}")
    joints = dataset.template.rest_joints.shape[0]
    for i, frame in enumerate(dataset.frames):
        if frame.pose.joint_count != joints:
            raise ValidationError(
                f"frame {i} pose has {frame.pose.joint_count} joints, "
                f"template has {joints}")


def frame_pose(state: AvatarState, dataset, index: int) -> Pose:
    """Dataset pose plus the learned per-frame refinement offsets."""
    base = dataset.frames[index].pose
    return Pose(base.joint_rotations + state.pose_joints[index],
                base.root_translation + state.pose_root[index])


def _forward(state: AvatarState, pose: Pose, camera, config: TrainConfig,
             with_normals: bool = False) -> _Forward:
    dt = config.np_dtype
    fk = forward_kinematics(state.template, pose)
    weights = state.base.blend_weights
    cond = cond_cache = None
    if state.stage >= 2:
        # conditioning reads the posed template surface, not the decoded
        # offsets, so the decoder input does not depend on its own output
        cond_positions = lbs_points(weights, state.base.centers, fk)
        emb, cond_cache = encode_pose(state.params, cond_positions)
        cond = emb.astype(dt)
    result, cache = decode(state.params, state.features, cond)
    centers_c = state.base.centers + result.offsets
    normals_c = state.base.normals + result.normal_deltas
    posed = dc_replace(
        state.base,
        centers=lbs_points(weights, centers_c, fk).astype(dt),
        normals=lbs_normals(weights, normals_c, fk).astype(dt),
        colors=result.colors,
        scales=result.scales,
    )
    rgb = render(posed, camera, attribute="color")
    normal = render(posed, camera, attribute="normal") if with_normals else None
    return _Forward(pose, fk, cond, cond_cache, result, cache,
                    centers_c, normals_c, rgb, normal)


def _apply_grads(state: AvatarState, config: TrainConfig, dec_grads,
                 d_features, skin=None, frame_index=None) -> None:
    adam_step({"features": state.features}, {"features": d_features},
              state.optimizer, config.lr_features)
    own = state.params.named_tensors()
    params, grads = {}, {}
    for name, grad in dec_grads.named_tensors().items():
        if state.stage == 1 and name.startswith("enc."):
            continue
        params["decoder." + name] = own[name]
        grads["decoder." + name] = grad
    adam_step(params, grads, state.optimizer, config.lr_networks)
    if skin is not None and config.pose_refinement and frame_index is not None:
        i = frame_index
        adam_step(
            {f"pose.joints.{i}": state.pose_joints[i],
             f"pose.root.{i}": state.pose_root[i]},
            {f"pose.joints.{i}": skin.d_joint_rotations,
             f"pose.root.{i}": skin.d_root_translation},
            state.optimizer, config.lr_pose)


def given_view_step(state: AvatarState, dataset, config: TrainConfig,
                    frame_index: int, apply: bool = True) -> StepReport:
    """One photometric fitting step against a captured frame.

    Unmasked pixels of the ground truth are forced to the (black)
    background before any loss; the masked terms then restrict their
    means to the covered pixels.
    """
    dt = config.np_dtype
    w = config.weights
    frame = dataset.frames[frame_index]
    pose = frame_pose(state, dataset, frame_index)
    use_normals = dataset.has_normals
    fwd = _forward(state, pose, frame.camera.camera, config,
                   with_normals=use_normals)

    mask = frame.mask
    gt_rgb = np.where(mask[:, :, None], frame.rgb, 0.0)
    gt_normal = pred_normal = None
    if use_normals:
        gt_normal = np.where(mask[:, :, None], frame.normal, 0.0)
        pred_normal = fwd.normal.image.data
    report, d_rgb, d_normal = photometric_loss(
        fwd.rgb.image.data, gt_rgb, w,
        pred_normals=pred_normal, gt_normals=gt_normal, mask=mask)

    v_off, g_off = frobenius(fwd.result.offsets)
    v_scale, g_scale = frobenius(fwd.result.scales)
    v_feat, g_feat = frobenius(state.features)
    terms = dict(report.terms)
    terms["offset"] = v_off
    terms["scale"] = v_scale
    terms["feature"] = v_feat
    total = (report.total + w.offset * v_off + w.scale_reg * v_scale
             + w.feature_reg * v_feat)
    if fwd.cond is not None:
        v_pose, g_pose = frobenius(fwd.cond)
        terms["pose_feature"] = v_pose
        total += w.pose_reg * v_pose

    pr = render_backward(fwd.rgb.state, d_rgb)
    d_centers = pr.d_centers
    d_scales = pr.d_scales
    d_posed_normals = None
    if use_normals:
        pn = render_backward(fwd.normal.state, d_normal)
        d_centers = d_centers + pn.d_centers
        d_scales = d_scales + pn.d_scales
        d_posed_normals = pn.d_normals
    skin = lbs_backward(state.template, state.base.blend_weights,
                        fwd.centers_c, pose, fwd.fk, d_centers,
                        normals=fwd.normals_c if use_normals else None,
                        d_posed_normals=d_posed_normals)

    d_offsets = (skin.d_points + w.offset * g_off).astype(dt)
    d_colors = pr.d_colors.astype(dt)
    d_scales = (d_scales + w.scale_reg * g_scale).astype(dt)
    if use_normals:
        d_deltas = skin.d_normals.astype(dt)
    else:
        d_deltas = np.zeros_like(d_offsets)
    dec_grads, d_features, d_cond = decode_backward(
        state.params, fwd.cache, d_offsets, d_colors, d_scales, d_deltas)
    d_features = d_features + (w.feature_reg * g_feat).astype(dt)
    if fwd.cond is not None:
        d_cond = d_cond + (w.pose_reg * g_pose).astype(dt)
        encode_pose_backward(state.params, fwd.cond_cache, d_cond,
                             grads=dec_grads)
    if apply:
        _apply_grads(state, config, dec_grads, d_features,
                     skin=skin, frame_index=frame_index)
    return StepReport(float(total), terms, skin)


def refine_pose_step(state: AvatarState, dataset, config: TrainConfig,
                     frame_index: int) -> StepReport:
    """Pose-only update against one frame: the full photometric gradient
    is computed, but only the per-frame pose offsets step.  A no-op on
    the offsets while refinement is disabled."""
    report = given_view_step(state, dataset, config, frame_index, apply=False)
    if config.pose_refinement:
        i = frame_index
        adam_step(
            {f"pose.joints.{i}": state.pose_joints[i],
             f"pose.root.{i}": state.pose_root[i]},
            {f"pose.joints.{i}": report.skin.d_joint_rotations,
             f"pose.root.{i}": report.skin.d_root_translation},
            state.optimizer, config.lr_pose)
    return report


def _ring_cameras(dataset, config: TrainConfig) -> list:
    ref = dataset.frames[0].camera
    intr = ref.camera
    kwargs = dict(fx=intr.fx, fy=intr.fy, cx=intr.cx, cy=intr.cy,
                  width=intr.width, height=intr.height)
    placed = []
    step = 360.0 / config.azimuth_samples
    for k in range(config.azimuth_samples):
        az = k * step
        placed.append(PlacedCamera(look_at_camera(az, 0.0, ref.radius, **kwargs),
                                   az, 0.0, ref.radius))
    el = config.overhead_elevation_deg
    placed.append(PlacedCamera(look_at_camera(0.0, el, ref.radius, **kwargs),
                               0.0, el, ref.radius))
    return placed


def select_views(state: AvatarState, dataset, config: TrainConfig) -> ViewSelection:
    """Visibility sweep of the canonical-pose avatar over the azimuth ring
    plus one overhead camera; a camera whose marked fraction of the
    foreground is at or below the threshold counts as unseen."""
    result, _ = decode(state.params, state.features, None)
    canonical = dc_replace(
        state.base,
        centers=state.base.centers + result.offsets,
        colors=result.colors,
        scales=result.scales,
    )
    cameras = _ring_cameras(dataset, config)
    values = np.full(len(cameras), np.nan)
    unseen = np.zeros(len(cameras), dtype=bool)
    for k, cam in enumerate(cameras):
        out = render(canonical, cam.camera, attribute="visibility")
        foreground = out.alpha.data[:, :, 0] >= 0.5
        if not foreground.any():
            warnings.warn(
                f"camera at azimuth {cam.azimuth_deg:.1f} sees no foreground; "
                "skipping it in view selection")
            continue
        visible = foreground & (out.image.data[:, :, 0] >= 0.5)
        values[k] = visible.sum() / foreground.sum()
        unseen[k] = values[k] <= config.visibility_threshold
    return ViewSelection(cameras, values, unseen)


def _mark_all_frames(state: AvatarState, dataset, config: TrainConfig) -> None:
    result, _ = decode(state.params, state.features, None)
    centers_c = state.base.centers + result.offsets
    marked = dc_replace(state.base, colors=result.colors, scales=result.scales)
    posed = []
    for i in range(dataset.frame_count):
        fk = forward_kinematics(state.template, frame_pose(state, dataset, i))
        posed.append(lbs_points(state.base.blend_weights, centers_c, fk))
    cameras = [f.camera.camera for f in dataset.frames]
    state.base.visibility = mark_visibility(marked, cameras, posed_centers=posed)


def validation_psnr(state: AvatarState, dataset, config: TrainConfig,
                    frame_index: int = 0) -> float:
    frame = dataset.frames[frame_index]
    fwd = _forward(state, frame_pose(state, dataset, frame_index),
                   frame.camera.camera, config)
    gt = np.where(frame.mask[:, :, None], frame.rgb, 0.0)
    return psnr(fwd.rgb.image.data, gt)


def _mean_terms(collected: list) -> dict:
    if not collected:
        return {}
    keys = collected[0].keys()
    return {k: float(np.mean([t[k] for t in collected])) for k in keys}


def save_avatar(state: AvatarState, path, config: TrainConfig) -> None:
    tensors = {
        "features": state.features,
        "pose.joints": state.pose_joints,
        "pose.root": state.pose_root,
        "visibility": state.base.visibility.astype(np.uint8),
    }
    for name, arr in state.params.named_tensors().items():
        tensors["decoder." + name] = arr
    for name in state.optimizer.first:
        tensors[f"adam.{name}.m"] = state.optimizer.first[name]
        tensors[f"adam.{name}.v"] = state.optimizer.second[name]
    if state.canonical_condition is not None:
        tensors["canonical_condition"] = state.canonical_condition
    metadata = {
        "kind": "avatar-state",
        "stage": state.stage,
        "epochs_run": state.epochs_run,
        "config": config.to_dict(),
        "adam_steps": {k: int(v) for k, v in state.optimizer.steps.items()},
        "adam_skipped": state.optimizer.skipped,
    }
    save_checkpoint(path, tensors, metadata)


def load_avatar(path, template):
    """Rebuild an AvatarState (and its TrainConfig) from a checkpoint; the
    UV bake is deterministic, so only the template travels separately."""
    tensors, metadata = load_checkpoint(path)
    if metadata.get("kind") != "avatar-state":
        raise ValidationError(f"{path} is not an avatar checkpoint")
    config = TrainConfig.from_dict(metadata["config"])
    dt = config.np_dtype
    uvmap = bake_positional_map(template, config.map_resolution)
    base = init_gaussians_from_uv(uvmap).astype(dt)
    if tensors["visibility"].shape != (base.count,):
        raise ValidationError("checkpoint does not match the template bake")
    base.visibility = tensors["visibility"]
    params = init_decoder(seed=config.seed, dtype=dt)
    params.replace_tensors({name[len("decoder."):]: arr
                            for name, arr in tensors.items()
                            if name.startswith("decoder.")})
    optimizer = OptimizerState()
    for name, steps in metadata["adam_steps"].items():
        optimizer.first[name] = tensors[f"adam.{name}.m"]
        optimizer.second[name] = tensors[f"adam.{name}.v"]
        optimizer.steps[name] = int(steps)
    optimizer.skipped = int(metadata["adam_skipped"])
    state = AvatarState(
        template=template,
        uvmap=uvmap,
        base=base,
        features=tensors["features"],
        params=params,
        pose_joints=tensors["pose.joints"],
        pose_root=tensors["pose.root"],
        optimizer=optimizer,
        stage=int(metadata["stage"]),
        epochs_run=int(metadata["epochs_run"]),
        canonical_condition=tensors.get("canonical_condition"),
    )
    return state, config


def train_stage1(dataset, config: TrainConfig, out_dir) -> AvatarState:
    """Fit the avatar to the captured frames, mark per-Gaussian visibility
    in a final pass, and write the checkpoint plus a metrics log."""
    _check_dataset(dataset, config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = init_avatar(dataset, config)
    with open(out_dir / METRICS_LOG, "w") as log:
        for epoch in range(config.epochs_stage1):
            totals, terms = [], []
            for i in range(dataset.frame_count):
                report = given_view_step(state, dataset, config, i)
                totals.append(report.total)
                terms.append(report.terms)
            state.epochs_run += 1
            record = {
                "stage": 1,
                "epoch": epoch,
                "loss": float(np.mean(totals)),
                "terms": _mean_terms(terms),
                "iterations": {"given": dataset.frame_count,
                               "canonical": 0, "observation": 0},
                "lambda_sds": 0.0,
                "psnr": validation_psnr(state, dataset, config),
            }
            log.write(json.dumps(record, sort_keys=True) + "\n")
    _mark_all_frames(state, dataset, config)
    save_avatar(state, out_dir / STAGE1_CHECKPOINT, config)
    return state


def _wrap_degrees(angle: float) -> float:
    return float((angle + 180.0) % 360.0 - 180.0)


def _camera_delta(target: PlacedCamera, reference: PlacedCamera) -> CameraDelta:
    return CameraDelta(
        azimuth_deg=_wrap_degrees(target.azimuth_deg - reference.azimuth_deg),
        elevation_deg=target.elevation_deg - reference.elevation_deg,
        radius=target.radius - reference.radius,
    )


def _plan_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, 13, epoch]).generate_state(1)[0])


def _sds_step(state: AvatarState, dataset, config: TrainConfig, space: str,
              provider, schedule, sds_rng, pick_rng, unseen: list,
              weight: float):
    dt = config.np_dtype
    camera = unseen[int(pick_rng.integers(len(unseen)))]
    if space == "canonical":
        frame_index = None
        pose = Pose.identity(state.joint_count)
        condition = state.canonical_condition
        reference = dataset.frames[0].camera
    else:
        frame_index = int(pick_rng.integers(dataset.frame_count))
        pose = frame_pose(state, dataset, frame_index)
        condition = dataset.frames[frame_index].rgb
        reference = dataset.frames[frame_index].camera

    fwd = _forward(state, pose, camera.camera, config)
    mask = fwd.rgb.alpha.data[:, :, 0] >= 0.5
    hook = getattr(provider, "record_context", None)
    if hook is not None:
        hook(space=space, frame_index=frame_index, camera=camera, mask=mask)
    result = sds_gradient(fwd.rgb.image.data, mask, condition,
                          _camera_delta(camera, reference),
                          schedule, provider, sds_rng)
    if result.skipped or not np.any(result.gradient):
        return result

    pr = render_backward(fwd.rgb.state, weight * result.gradient)
    skin = lbs_backward(state.template, state.base.blend_weights,
                        fwd.centers_c, pose, fwd.fk, pr.d_centers)
    d_offsets = skin.d_points.astype(dt)
    dec_grads, d_features, d_cond = decode_backward(
        state.params, fwd.cache, d_offsets, pr.d_colors.astype(dt),
        pr.d_scales.astype(dt), np.zeros_like(d_offsets))
    encode_pose_backward(state.params, fwd.cond_cache, d_cond, grads=dec_grads)
    _apply_grads(state, config, dec_grads, d_features)
    return result


def train_stage2(dataset, state: AvatarState, config: TrainConfig, provider,
                 out_dir) -> AvatarState:
    """Continue from a fitted avatar: keep refitting the captured views
    while score-distillation pulls unseen regions toward the guidance
    model, in canonical space and in observation space."""
    _check_dataset(dataset, config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    selection = select_views(state, dataset, config)
    unseen = selection.unseen
    if not unseen:
        warnings.warn("no unseen cameras; guidance iterations will be skipped")

    # the conditioning image for canonical-space guidance is the avatar as
    # stage one left it, seen from the capture camera; frozen from here on
    capture = dataset.frames[0].camera
    fwd = _forward(state, Pose.identity(state.joint_count), capture.camera,
                   config)
    state.canonical_condition = np.asarray(fwd.rgb.image.data, dtype=np.float64).copy()
    state.stage = 2

    schedule = DiffusionSchedule()
    sds_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    pick_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 11]))
    iterations = config.iterations_per_epoch or dataset.frame_count
    given_cursor = 0
    provider_warned = False

    with open(out_dir / METRICS_LOG, "a") as log:
        for epoch in range(config.epochs_stage2):
            weight = sds_weight(epoch, config.weights.sds,
                                config.sds_t0, config.sds_k)
            plan = schedule_epoch(iterations, config,
                                  _plan_seed(config.seed, epoch))
            counts = {"given": 0, "canonical": 0, "observation": 0}
            totals, terms, norms = [], [], []
            failures = 0
            for kind in plan.order:
                if kind == "given":
                    report = given_view_step(state, dataset, config,
                                             given_cursor % dataset.frame_count)
                    given_cursor += 1
                    totals.append(report.total)
                    terms.append(report.terms)
                elif unseen:
                    result = _sds_step(state, dataset, config, kind, provider,
                                       schedule, sds_rng, pick_rng, unseen,
                                       weight)
                    norms.append(weight * result.grad_norm)
                    if result.skipped and result.reason != "empty mask":
                        failures += 1
                        if not provider_warned:
                            provider_warned = True
                            warnings.warn(
                                "guidance provider unavailable "
                                f"({result.reason}); continuing with "
                                "given-view training only")
                counts[kind] += 1
            state.epochs_run += 1
            record = {
                "stage": 2,
                "epoch": epoch,
                "loss": float(np.mean(totals)) if totals else None,
                "terms": _mean_terms(terms),
                "iterations": counts,
                "lambda_sds": weight,
                "sds_grad_norm": float(np.mean(norms)) if norms else 0.0,
                "provider_failures": failures,
                "psnr": validation_psnr(state, dataset, config),
            }
            log.write(json.dumps(record, sort_keys=True) + "\n")
    save_avatar(state, out_dir / STAGE2_CHECKPOINT, config)
    return state


def evaluate_avatar(state: AvatarState, dataset, config: TrainConfig,
                    frame_stride: int = 1) -> dict:
    """Mean PSNR and SSIM over the captured views and over each held-out
    ring camera, rendered with the current stage's decoding."""
    indices = range(0, dataset.frame_count, frame_stride)
    given_psnr, given_ssim = [], []
    for i in indices:
        frame = dataset.frames[i]
        fwd = _forward(state, frame_pose(state, dataset, i),
                       frame.camera.camera, config)
        gt = np.where(frame.mask[:, :, None], frame.rgb, 0.0)
        given_psnr.append(psnr(fwd.rgb.image.data, gt))
        given_ssim.append(ssim(fwd.rgb.image.data, gt)[0])
    held_out = []
    for view in dataset.eval_views:
        scores, similarities = [], []
        for i in indices:
            fwd = _forward(state, frame_pose(state, dataset, i),
                           view.placed.camera, config)
            scores.append(psnr(fwd.rgb.image.data, view.images[i]))
            similarities.append(ssim(fwd.rgb.image.data, view.images[i])[0])
        held_out.append({
            "azimuth_deg": view.placed.azimuth_deg,
            "elevation_deg": view.placed.elevation_deg,
            "psnr": float(np.mean(scores)),
            "ssim": float(np.mean(similarities)),
        })
    return {"given_psnr": float(np.mean(given_psnr)),
            "given_ssim": float(np.mean(given_ssim)),
            "eval_views": held_out}
