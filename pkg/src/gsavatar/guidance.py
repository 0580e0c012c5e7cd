"""Diffusion noise schedule, score-distillation gradients, and the
noise-prediction provider contract.

The provider boundary keeps the heavy denoising network out of process:
the engine crops the render to the subject, resizes to the provider's
256x256 input, noises it at a sampled timestep, and asks the provider for
the noise it sees.  The score-distillation gradient is the prediction
residual mapped back through the exact adjoint of the resize and crop, so
whatever the provider believes about the unseen region flows into the
full-resolution image gradient (zeros outside the crop).

Providers:

* ``MockProvider`` replays the true noise recorded alongside the request,
  giving an exactly zero gradient (pipeline plumbing tests).
* ``OracleProvider`` answers as if the clean image were a known target,
  which turns the residual into a pull toward that target.
* ``EchoProvider`` returns the noised image itself, bit for bit, matching
  the remote service's echo mode.
* ``RemoteProvider`` forwards over HTTP with a timeout and one retry.
"""

from __future__ import annotations

import base64
import json
import urllib.error
import urllib.request
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ProviderUnavailable, StateError, ValidationError

GUIDANCE_SIZE = 256
DEFAULT_STEPS = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
T_RANGE = (0.02, 0.98)
CROP_PAD_FRACTION = 0.1


class DiffusionSchedule:
    """Linear-beta DDPM schedule; only the cumulative signal/noise split
    matters here."""

    def __init__(self, steps=DEFAULT_STEPS, beta_start=DEFAULT_BETA_START,
                 beta_end=DEFAULT_BETA_END):
        if steps < 2:
            raise ValidationError("schedule needs at least 2 steps")
        self.steps = int(steps)
        self.betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
        self.alpha_bars = np.cumprod(1.0 - self.betas)

    def signal_scale(self, t: int) -> float:
        self._check_t(t)
        return float(np.sqrt(self.alpha_bars[t]))

    def noise_scale(self, t: int) -> float:
        self._check_t(t)
        return float(np.sqrt(1.0 - self.alpha_bars[t]))

    def _check_t(self, t):
        if not 0 <= t < self.steps:
            raise ValidationError(f"timestep {t} outside [0, {self.steps})")

    def add_noise(self, image, noise, t: int):
        image = np.asarray(image, dtype=np.float64)
        noise = np.asarray(noise, dtype=np.float64)
        if image.shape != noise.shape:
            raise ValidationError("image and noise shapes differ")
        return self.signal_scale(t) * image + self.noise_scale(t) * noise

    def sample_t(self, rng) -> int:
        lo = int(T_RANGE[0] * self.steps)
        hi = int(T_RANGE[1] * self.steps)
        return int(rng.integers(lo, hi + 1))


@dataclass
class CameraDelta:
    """Relative condition-to-target camera in spherical terms."""

    azimuth_deg: float = 0.0
    elevation_deg: float = 0.0
    radius: float = 0.0

    def as_dict(self):
        return {"azimuth_deg": float(self.azimuth_deg),
                "elevation_deg": float(self.elevation_deg),
                "radius": float(self.radius)}


@dataclass
class GuidanceRequest:
    z_t: np.ndarray          # (256, 256, 3) noised image
    condition: np.ndarray    # (256, 256, 3) reference view
    t: int
    delta_camera: CameraDelta


def _check_guidance_image(arr, name):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != (GUIDANCE_SIZE, GUIDANCE_SIZE, 3):
        raise ValidationError(
            f"{name} must be ({GUIDANCE_SIZE}, {GUIDANCE_SIZE}, 3), got {arr.shape}")
    return arr


class MockProvider:
    """Replays the true noise handed to ``record_noise``; the resulting
    score-distillation gradient is identically zero."""

    def __init__(self):
        self._noise = None
        self.calls = 0

    def record_noise(self, noise):
        self._noise = np.array(noise, dtype=np.float64)

    def predict_noise(self, request: GuidanceRequest):
        if self._noise is None:
            raise StateError("no noise recorded for this request")
        self.calls += 1
        noise, self._noise = self._noise, None
        if noise.shape != request.z_t.shape:
            raise ValidationError("recorded noise shape mismatch")
        return noise


class OracleProvider:
    """Answers with the exact noise under the assumption that the clean
    image is a known target, so the residual pulls the render toward it.

    ``target`` is a [0, 1] image, or a callable mapping the request to one
    (for targets that depend on the requested viewpoint).
    """

    def __init__(self, schedule: DiffusionSchedule, target=None):
        self.schedule = schedule
        self._target = None
        if target is not None:
            self.set_target(target)

    def set_target(self, target):
        if callable(target):
            self._target = target
        else:
            self._target = _check_guidance_image(target, "target")

    def predict_noise(self, request: GuidanceRequest):
        if self._target is None:
            raise StateError("oracle target not set")
        target = self._target
        if callable(target):
            target = _check_guidance_image(np.asarray(target(request)), "target")
        z_t = _check_guidance_image(request.z_t, "z_t")
        s = self.schedule.signal_scale(request.t)
        n = self.schedule.noise_scale(request.t)
        return (z_t - s * (2.0 * target - 1.0)) / n


class EchoProvider:
    """Returns the noised image unchanged (the service's echo mode).

    The image is rounded through the f32 wire encoding so a run against
    this provider is bit-identical to one against the remote echo service.
    """

    def predict_noise(self, request: GuidanceRequest):
        return decode_image_payload(encode_image_payload(request.z_t))


def encode_image_payload(arr):
    arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
    return {"shape": list(arr.shape), "dtype": "f32le",
            "data_b64": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_image_payload(payload, expect_shape=None):
    try:
        shape = tuple(int(d) for d in payload["shape"])
        if payload["dtype"] != "f32le":
            raise ValidationError(f"unsupported dtype {payload['dtype']!r}")
        raw = base64.b64decode(payload["data_b64"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed image payload: {exc}") from exc
    count = int(np.prod(shape)) if shape else 0
    if len(raw) != count * 4:
        raise ValidationError(
            f"payload holds {len(raw)} bytes, shape {shape} needs {count * 4}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
    if expect_shape is not None and arr.shape != tuple(expect_shape):
        raise ValidationError(f"expected shape {expect_shape}, got {arr.shape}")
    return arr.astype(np.float64)


class RemoteProvider:
    """HTTP client for the noise-prediction service; one in-flight request,
    one retry, then the trainer is told to skip."""

    def __init__(self, base_url, timeout=30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = float(timeout)

    def _post(self, body):
        req = urllib.request.Request(
            self.base_url + "/v1/noise-prediction",
            data=json.dumps(body).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))

    def predict_noise(self, request: GuidanceRequest):
        body = {
            "t": int(request.t),
            "delta_camera": request.delta_camera.as_dict(),
            "z_t": encode_image_payload(request.z_t),
            "condition": encode_image_payload(request.condition),
        }
        last_error = None
        for _ in range(2):
            try:
                reply = self._post(body)
                return decode_image_payload(
                    reply["epsilon"], (GUIDANCE_SIZE, GUIDANCE_SIZE, 3))
            except (urllib.error.URLError, OSError, json.JSONDecodeError,
                    KeyError, ValidationError) as exc:
                last_error = exc
        raise ProviderUnavailable(f"noise-prediction service failed: {last_error}")

    def health(self):
        req = urllib.request.Request(self.base_url + "/v1/health", method="GET")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise ProviderUnavailable(f"health check failed: {exc}") from exc


# ---------------------------------------------------------------------------
# resize with exact adjoint
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _resize_matrix(out_size, in_size):
    """Row-stochastic bilinear interpolation matrix (out_size, in_size),
    pixel-center convention with edge clamping."""
    m = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for i in range(out_size):
        u = (i + 0.5) * scale - 0.5
        lo = int(np.floor(u))
        frac = u - lo
        a = min(max(lo, 0), in_size - 1)
        b = min(max(lo + 1, 0), in_size - 1)
        m[i, a] += 1.0 - frac
        m[i, b] += frac
    return m


def _apply_separable(img, ry, rx):
    rows = np.tensordot(ry, img, axes=(1, 0))
    return np.tensordot(rx, rows, axes=(1, 1)).transpose(1, 0, 2)


def resize_bilinear(img, out_h, out_w):
    img = np.asarray(img, dtype=np.float64)
    return _apply_separable(img, _resize_matrix(out_h, img.shape[0]),
                            _resize_matrix(out_w, img.shape[1]))


def resize_bilinear_adjoint(grad, in_h, in_w):
    grad = np.asarray(grad, dtype=np.float64)
    return _apply_separable(grad, _resize_matrix(grad.shape[0], in_h).T,
                            _resize_matrix(grad.shape[1], in_w).T)


def crop_bounds(mask, pad_fraction=CROP_PAD_FRACTION):
    """Bounding box of a boolean mask padded by a fraction of its extent,
    clipped to the frame; None when the mask is empty."""
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0 or cols.size == 0:
        return None
    r0, r1 = int(rows[0]), int(rows[-1]) + 1
    c0, c1 = int(cols[0]), int(cols[-1]) + 1
    pad_r = int(np.ceil(pad_fraction * (r1 - r0)))
    pad_c = int(np.ceil(pad_fraction * (c1 - c0)))
    return (max(0, r0 - pad_r), min(mask.shape[0], r1 + pad_r),
            max(0, c0 - pad_c), min(mask.shape[1], c1 + pad_c))


@dataclass
class SdsResult:
    gradient: np.ndarray   # full-resolution, zeros outside the crop
    t: int | None
    skipped: bool
    reason: str = ""

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.gradient))


def sds_gradient(render, mask, condition, delta_camera: CameraDelta,
                 schedule: DiffusionSchedule, provider, rng, t=None):
    """Score-distillation gradient of the render wrt the provider's noise
    prediction: crop to the subject, resize to the provider input, noise at
    a sampled timestep, take the prediction residual, and run the exact
    resize/crop adjoint back to full resolution.  The provider network's
    own Jacobian is skipped, as usual for score distillation.
    """
    render = np.asarray(render, dtype=np.float64)
    if render.ndim != 3 or render.shape[2] != 3:
        raise ValidationError("render must be (H, W, 3)")
    zero = np.zeros_like(render)

    bounds = crop_bounds(mask)
    if bounds is None:
        return SdsResult(zero, None, True, "empty mask")
    r0, r1, c0, c1 = bounds
    crop = render[r0:r1, c0:c1]
    small = resize_bilinear(crop, GUIDANCE_SIZE, GUIDANCE_SIZE)

    cond = np.asarray(condition, dtype=np.float64)
    if cond.shape != (GUIDANCE_SIZE, GUIDANCE_SIZE, 3):
        if cond.ndim != 3 or cond.shape[2] != 3:
            raise ValidationError("condition must be (H, W, 3)")
        cond = resize_bilinear(cond, GUIDANCE_SIZE, GUIDANCE_SIZE)

    if t is None:
        t = schedule.sample_t(rng)
    noise = rng.standard_normal(small.shape)
    # denoisers expect signed inputs, so [0, 1] renders noise as 2x - 1
    z_t = schedule.add_noise(2.0 * small - 1.0, noise, t)

    recorder = getattr(provider, "record_noise", None)
    if recorder is not None:
        recorder(noise)
    request = GuidanceRequest(z_t=z_t, condition=cond, t=t,
                              delta_camera=delta_camera)
    try:
        predicted = provider.predict_noise(request)
    except ProviderUnavailable as exc:
        return SdsResult(zero, t, True, str(exc))

    residual = np.asarray(predicted, dtype=np.float64) - noise
    back = resize_bilinear_adjoint(residual, r1 - r0, c1 - c0)
    grad = zero
    grad[r0:r1, c0:c1] = back
    return SdsResult(grad, t, False)
