"""Command-line entry point: data generation, preprocessing, the two
training stages, rendering, animation, evaluation, and visibility reports.

Exit codes: 0 on success, 1 for validation problems (bad inputs, bad
config, mismatched checkpoint), 2 for runtime failures.  Machine-readable
results go to stdout as JSON; human-readable tables mirror them on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .dataset import load_dataset, write_image, write_json
from .errors import ValidationError
from .guidance import MockProvider, RemoteProvider
from .optim import TrainConfig
from .scene import Pose, look_at_camera
from .synthetic import GroundTruthProvider, SynthConfig, generate_synthetic
from .trainer import (
    STAGE1_CHECKPOINT,
    STAGE2_CHECKPOINT,
    _forward,
    evaluate_avatar,
    load_avatar,
    select_views,
    train_stage1,
    train_stage2,
    validation_psnr,
)

GUIDANCE_URL_VAR = "AVATAR_GUIDANCE_URL"


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _table(rows, header) -> None:
    widths = [max(len(str(r[i])) for r in [header] + rows)
              for i in range(len(header))]
    def line(cells):
        print("  ".join(str(c).ljust(w) for c, w in zip(cells, widths)),
              file=sys.stderr)
    line(header)
    line(["-" * w for w in widths])
    for row in rows:
        line(row)


def _load_pair(args):
    dataset = load_dataset(args.data)
    state, config = load_avatar(args.checkpoint, dataset.template)
    return dataset, state, config


def cmd_synth_data(args) -> int:
    config = SynthConfig(frame_count=args.frames, resolution=args.resolution,
                         swing_amplitude=args.swing_amplitude,
                         swing_cycles=args.swing_cycles,
                         gaussian_count=args.gaussians, seed=args.seed)
    root = generate_synthetic(config, args.out)
    _emit({"root": str(root), "frames": config.frame_count,
           "resolution": config.resolution})
    return 0


def cmd_preprocess(args) -> int:
    from .uvmap import bake_positional_map, init_gaussians_from_uv, save_uvmap

    dataset = load_dataset(args.data)
    uvmap = bake_positional_map(dataset.template, args.map_resolution)
    save_uvmap(uvmap, args.out)
    gaussians = init_gaussians_from_uv(uvmap)
    _emit({"out": str(args.out), "map_resolution": uvmap.resolution,
           "texels": uvmap.texel_count, "gaussians": gaussians.count})
    return 0


def _build_provider(name: str, data_root):
    if name == "mock":
        return MockProvider()
    if name == "oracle":
        return GroundTruthProvider(data_root)
    url = os.environ.get(GUIDANCE_URL_VAR)
    if not url:
        raise ValidationError(
            f"--provider remote needs the {GUIDANCE_URL_VAR} environment variable")
    return RemoteProvider(url)


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    file_config = None
    if args.config is not None:
        file_config = TrainConfig.from_dict(
            json.loads(Path(args.config).read_text()))

    out = Path(args.out)
    if args.stage == 1:
        config = file_config or TrainConfig(resolution=dataset.resolution)
        if args.seed is not None:
            config = TrainConfig.from_dict({**config.to_dict(), "seed": args.seed})
        state = train_stage1(dataset, config, out)
        checkpoint = out / STAGE1_CHECKPOINT
    else:
        source = Path(args.checkpoint) if args.checkpoint \
            else out / STAGE1_CHECKPOINT
        state, config = load_avatar(source, dataset.template)
        if file_config is not None:
            for field in ("map_resolution", "dtype"):
                if getattr(file_config, field) != getattr(config, field):
                    raise ValidationError(
                        f"--config {field} must match the checkpoint "
                        f"({getattr(config, field)!r})")
            config = file_config
        if args.seed is not None:
            config = TrainConfig.from_dict({**config.to_dict(), "seed": args.seed})
        provider = _build_provider(args.provider, args.data)
        state = train_stage2(dataset, state, config, provider, out)
        checkpoint = out / STAGE2_CHECKPOINT

    _emit({"checkpoint": str(checkpoint), "stage": state.stage,
           "epochs_run": state.epochs_run,
           "validation_psnr": validation_psnr(state, dataset, config)})
    return 0


def _canonical_render(state, config, dataset, azimuth, elevation):
    ref = dataset.frames[0].camera
    intr = ref.camera
    camera = look_at_camera(azimuth, elevation, ref.radius,
                            fx=intr.fx, fy=intr.fy, cx=intr.cx, cy=intr.cy,
                            width=intr.width, height=intr.height)
    fwd = _forward(state, Pose.identity(state.joint_count), camera, config)
    return np.clip(fwd.rgb.image.data, 0.0, 1.0)


def cmd_render(args) -> int:
    dataset, state, config = _load_pair(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.turntable:
        step = 360.0 / args.turntable
        for k in range(args.turntable):
            azimuth = args.azimuth + k * step
            image = _canonical_render(state, config, dataset, azimuth,
                                      args.elevation)
            path = out / f"turn_{k:03d}.png"
            write_image(path, image, "rgb")
            written.append({"path": str(path), "azimuth_deg": azimuth,
                            "elevation_deg": args.elevation})
    else:
        image = _canonical_render(state, config, dataset, args.azimuth,
                                  args.elevation)
        path = out / "view.png"
        write_image(path, image, "rgb")
        written.append({"path": str(path), "azimuth_deg": args.azimuth,
                        "elevation_deg": args.elevation})
    _emit({"images": written})
    return 0


def cmd_animate(args) -> int:
    dataset, state, config = _load_pair(args)
    payload = json.loads(Path(args.poses).read_text())
    frames = payload.get("frames")
    if not isinstance(frames, list) or not frames:
        raise ValidationError("poses file needs a non-empty 'frames' list")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    camera = dataset.frames[0].camera.camera
    written = []
    for k, entry in enumerate(frames):
        rotations = np.asarray(entry["joint_rotations"], dtype=np.float64)
        translation = np.asarray(entry["root_translation"], dtype=np.float64)
        if rotations.shape != (state.joint_count, 3):
            raise ValidationError(
                f"pose {k}: joint_rotations must be ({state.joint_count}, 3), "
                f"got {rotations.shape}")
        pose = Pose(rotations, translation)
        fwd = _forward(state, pose, camera, config)
        path = out / f"frame_{k:06d}.png"
        write_image(path, np.clip(fwd.rgb.image.data, 0.0, 1.0), "rgb")
        written.append(str(path))
    _emit({"frames": len(written), "out": str(out)})
    return 0


def cmd_evaluate(args) -> int:
    dataset, state, config = _load_pair(args)
    report = evaluate_avatar(state, dataset, config, frame_stride=args.stride)
    if args.out:
        write_json(args.out, report)
    _emit(report)
    rows = [["seen", "-", f"{report['given_psnr']:.2f}",
             f"{report['given_ssim']:.4f}"]]
    for view in report["eval_views"]:
        rows.append([f"az {view['azimuth_deg']:.0f}",
                     f"el {view['elevation_deg']:.0f}",
                     f"{view['psnr']:.2f}", f"{view['ssim']:.4f}"])
    _table(rows, ["view", "", "psnr_db", "ssim"])
    return 0


def cmd_visibility(args) -> int:
    dataset, state, config = _load_pair(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    grid = np.zeros((state.uvmap.resolution, state.uvmap.resolution))
    rows, cols = state.uvmap.texel_indices().T
    grid[rows, cols] = state.base.visibility
    map_path = out / "visibility_map.png"
    write_image(map_path, grid, "visibility")

    selection = select_views(state, dataset, config)
    cameras = []
    for k, placed in enumerate(selection.cameras):
        value = selection.visibility[k]
        cameras.append({
            "azimuth_deg": placed.azimuth_deg,
            "elevation_deg": placed.elevation_deg,
            "visibility": None if np.isnan(value) else float(value),
            "unseen": bool(selection.unseen_mask[k]),
        })
    report = {
        "map": str(map_path),
        "visible_fraction": float(np.mean(state.base.visibility > 0)),
        "unseen_count": int(selection.unseen_mask.sum()),
        "cameras": cameras,
    }
    write_json(out / "visibility.json", report)
    _emit(report)
    rows = [[f"az {c['azimuth_deg']:.0f}", f"el {c['elevation_deg']:.0f}",
             "-" if c["visibility"] is None else f"{c['visibility']:.3f}",
             "unseen" if c["unseen"] else "seen"]
            for c in cameras]
    _table(rows, ["camera", "", "visibility", "status"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gsavatar",
        description="Animatable Gaussian avatars from partial-view captures")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic capsule capture")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--gaussians", type=int, default=24000)
    p.add_argument("--swing-amplitude", type=float, default=0.6)
    p.add_argument("--swing-cycles", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=cmd_synth_data)

    p = sub.add_parser("preprocess", help="bake the UV map and report coverage")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--map-resolution", type=int, default=128)
    p.set_defaults(run=cmd_preprocess)

    p = sub.add_parser("train", help="run a training stage")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--config", help="JSON file of TrainConfig overrides")
    p.add_argument("--provider", choices=("mock", "oracle", "remote"),
                   default="mock")
    p.add_argument("--checkpoint", help="stage-1 checkpoint (stage 2 only; "
                   "defaults to <out>/" + STAGE1_CHECKPOINT)
    p.add_argument("--seed", type=int)
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("render", help="render the canonical avatar")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--azimuth", type=float, default=0.0)
    p.add_argument("--elevation", type=float, default=0.0)
    p.add_argument("--turntable", type=int,
                   help="write N evenly spaced azimuth views")
    p.set_defaults(run=cmd_render)

    p = sub.add_parser("animate", help="render a pose sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--poses", required=True,
                   help="JSON file: {'frames': [{joint_rotations, root_translation}]}")
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_animate)

    p = sub.add_parser("evaluate", help="PSNR/SSIM over seen and held-out views")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="also write the JSON report here")
    p.add_argument("--stride", type=int, default=1)
    p.set_defaults(run=cmd_evaluate)

    p = sub.add_parser("visibility", help="visibility map and unseen-camera list")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_visibility)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.run(args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001  (exit-code contract)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
