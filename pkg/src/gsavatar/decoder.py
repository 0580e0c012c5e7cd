"""Per-texel decoder: a shared MLP that turns a learned canonical feature
map (plus an optional pose embedding) into Gaussian attributes.

Input per covered texel is 64 channels: the texel's 32 learned features
concatenated with a 32-channel condition.  In canonical space the condition
is the feature vector itself; in observation space it is a two-layer
encoding of the texel's blend-skinned position, so the same decoder serves
both spaces.  The trunk is eight 128-wide leaky-rectified layers with the
raw input re-concatenated at the fourth, feeding four small heads:

    offset  -> tanh bounded to [-OFFSET_BOUND, OFFSET_BOUND]
    color   -> sigmoid, in [0, 1]
    scale   -> sigmoid scaled to (0, SCALE_MAX)
    normal  -> tanh-bounded delta added to the template normal before
               renormalizing

Head output layers start at zero, so an untrained decoder emits zero
offsets, 0.5 gray, mid-range scales and unchanged normals.  All gradients
are written out by hand; no autodiff anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ValidationError

FEATURE_CHANNELS = 32
TRUNK_WIDTH = 128
TRUNK_DEPTH = 8
SKIP_LAYER = 3  # raw input re-concatenated before this trunk layer
HEAD_HIDDEN = 64
HEAD_NAMES = ("offset", "color", "scale", "normal")
ENCODER_SIZES = ((3, 64), (64, FEATURE_CHANNELS))
SCALE_MAX = 0.05
OFFSET_BOUND = 0.1
LEAK = 0.01


def _leaky(z):
    return np.where(z > 0.0, z, LEAK * z)


def _leaky_slope(act):
    # the stored activation shares the preactivation's sign
    return np.where(act > 0.0, 1.0, LEAK)


def _trunk_sizes():
    sizes = []
    width_in = 2 * FEATURE_CHANNELS
    for i in range(TRUNK_DEPTH):
        fan_in = width_in if i == 0 else TRUNK_WIDTH
        if i == SKIP_LAYER:
            fan_in += 2 * FEATURE_CHANNELS
        sizes.append((fan_in, TRUNK_WIDTH))
    return sizes


TRUNK_SIZES = tuple(_trunk_sizes())
HEAD_SIZES = ((TRUNK_WIDTH, HEAD_HIDDEN), (HEAD_HIDDEN, 3))


@dataclass
class DecoderParams:
    """All learnable weights, keyed layer lists in fixed order."""

    trunk_w: list = field(default_factory=list)
    trunk_b: list = field(default_factory=list)
    head_w: dict = field(default_factory=dict)   # name -> [W1, W2]
    head_b: dict = field(default_factory=dict)
    enc_w: list = field(default_factory=list)
    enc_b: list = field(default_factory=list)

    def named_tensors(self) -> dict:
        """Flat name -> array view of every parameter, deterministic order."""
        out = {}
        for i, (w, b) in enumerate(zip(self.trunk_w, self.trunk_b)):
            out[f"trunk.{i}.w"] = w
            out[f"trunk.{i}.b"] = b
        for name in HEAD_NAMES:
            for i in range(2):
                out[f"head.{name}.{i}.w"] = self.head_w[name][i]
                out[f"head.{name}.{i}.b"] = self.head_b[name][i]
        for i, (w, b) in enumerate(zip(self.enc_w, self.enc_b)):
            out[f"enc.{i}.w"] = w
            out[f"enc.{i}.b"] = b
        return out

    def replace_tensors(self, tensors: dict) -> None:
        """Load arrays produced by ``named_tensors`` back into place."""
        own = self.named_tensors()
        if set(own) != set(tensors):
            missing = set(own) ^ set(tensors)
            raise ValidationError(f"parameter names do not match: {sorted(missing)}")
        for i in range(len(self.trunk_w)):
            self.trunk_w[i] = tensors[f"trunk.{i}.w"]
            self.trunk_b[i] = tensors[f"trunk.{i}.b"]
        for name in HEAD_NAMES:
            self.head_w[name] = [tensors[f"head.{name}.0.w"], tensors[f"head.{name}.1.w"]]
            self.head_b[name] = [tensors[f"head.{name}.0.b"], tensors[f"head.{name}.1.b"]]
        for i in range(len(self.enc_w)):
            self.enc_w[i] = tensors[f"enc.{i}.w"]
            self.enc_b[i] = tensors[f"enc.{i}.b"]


def init_decoder(seed: int = 0, dtype=np.float32) -> DecoderParams:
    """Fan-in uniform init (rectifier gain); zero biases; zero final head
    and encoder output layers."""
    rng = np.random.default_rng(seed)

    def layer(fan_in, fan_out, zero=False):
        if zero:
            w = np.zeros((fan_in, fan_out))
        else:
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, (fan_in, fan_out))
        return w.astype(dtype), np.zeros(fan_out, dtype=dtype)

    params = DecoderParams()
    for fan_in, fan_out in TRUNK_SIZES:
        w, b = layer(fan_in, fan_out)
        params.trunk_w.append(w)
        params.trunk_b.append(b)
    for name in HEAD_NAMES:
        w1, b1 = layer(*HEAD_SIZES[0])
        w2, b2 = layer(*HEAD_SIZES[1], zero=True)
        params.head_w[name] = [w1, w2]
        params.head_b[name] = [b1, b2]
    for i, (fan_in, fan_out) in enumerate(ENCODER_SIZES):
        # zero final encoder layer: pose conditioning starts silent
        w, b = layer(fan_in, fan_out, zero=(i == len(ENCODER_SIZES) - 1))
        params.enc_w.append(w)
        params.enc_b.append(b)
    return params


def zero_like_params(params: DecoderParams) -> DecoderParams:
    out = DecoderParams()
    out.trunk_w = [np.zeros_like(w) for w in params.trunk_w]
    out.trunk_b = [np.zeros_like(b) for b in params.trunk_b]
    for name in HEAD_NAMES:
        out.head_w[name] = [np.zeros_like(w) for w in params.head_w[name]]
        out.head_b[name] = [np.zeros_like(b) for b in params.head_b[name]]
    out.enc_w = [np.zeros_like(w) for w in params.enc_w]
    out.enc_b = [np.zeros_like(b) for b in params.enc_b]
    return out


def param_count(params: DecoderParams) -> int:
    return int(sum(t.size for t in params.named_tensors().values()))


def init_canonical_features(texel_count: int, seed: int = 0,
                            dtype=np.float32) -> np.ndarray:
    """(T, 32) learnable feature rows, small random start."""
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 0.1, (texel_count, FEATURE_CHANNELS)).astype(dtype)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

@dataclass
class DecodeResult:
    offsets: np.ndarray        # (T, 3)
    colors: np.ndarray         # (T, 3) in (0, 1)
    scales: np.ndarray         # (T, 3) in (0, SCALE_MAX)
    normal_deltas: np.ndarray  # (T, 3)


@dataclass
class DecodeCache:
    self_condition: bool
    x0: np.ndarray
    trunk_in: list        # input to each trunk matmul
    trunk_act: list       # post-activation output of each trunk layer
    head_in: dict         # name -> [trunk_out, hidden_act]
    head_sig: dict        # name -> sigmoid values where used
    head_tanh: dict       # name -> tanh values where used


def decode(params: DecoderParams, features: np.ndarray,
           condition: np.ndarray | None = None):
    """Run the decoder on (T, 32) features; ``condition`` of the same shape
    replaces the second input half (None concatenates features with itself).
    Returns (DecodeResult, DecodeCache)."""
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != FEATURE_CHANNELS:
        raise ValidationError(f"features must be (T, {FEATURE_CHANNELS})")
    self_condition = condition is None
    cond = features if self_condition else np.asarray(condition)
    if cond.shape != features.shape:
        raise ValidationError("condition must match the feature shape")
    x0 = np.concatenate([features, cond], axis=1)

    h = x0
    trunk_in, trunk_act = [], []
    for i in range(TRUNK_DEPTH):
        if i == SKIP_LAYER:
            h = np.concatenate([h, x0], axis=1)
        trunk_in.append(h)
        z = h @ params.trunk_w[i] + params.trunk_b[i]
        h = _leaky(z)
        trunk_act.append(h)

    head_in, head_sig, head_tanh, raw = {}, {}, {}, {}
    for name in HEAD_NAMES:
        w1, w2 = params.head_w[name]
        b1, b2 = params.head_b[name]
        hid = _leaky(h @ w1 + b1)
        head_in[name] = [h, hid]
        raw[name] = hid @ w2 + b2

    head_sig["color"] = expit(raw["color"])
    head_sig["scale"] = expit(raw["scale"])
    head_tanh["offset"] = np.tanh(raw["offset"])
    head_tanh["normal"] = np.tanh(raw["normal"])
    result = DecodeResult(
        offsets=OFFSET_BOUND * head_tanh["offset"],
        colors=head_sig["color"],
        scales=SCALE_MAX * head_sig["scale"],
        normal_deltas=OFFSET_BOUND * head_tanh["normal"],
    )
    cache = DecodeCache(self_condition=self_condition, x0=x0,
                        trunk_in=trunk_in, trunk_act=trunk_act,
                        head_in=head_in, head_sig=head_sig,
                        head_tanh=head_tanh)
    return result, cache


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _linear_backward(w, x, d_out):
    d_w = x.T @ d_out
    d_b = d_out.sum(axis=0)
    d_x = d_out @ w.T
    return d_w, d_b, d_x


def decode_backward(params: DecoderParams, cache: DecodeCache,
                    d_offsets, d_colors, d_scales, d_normal_deltas):
    """Gradients of the decoder outputs.

    Returns (grads, d_features, d_condition); ``d_condition`` is None when
    the forward pass self-concatenated (its share is folded into
    ``d_features``).
    """
    grads = zero_like_params(params)
    d_raw = {
        "offset": np.asarray(d_offsets) * OFFSET_BOUND
                  * (1.0 - cache.head_tanh["offset"] ** 2),
        "color": np.asarray(d_colors) * cache.head_sig["color"]
                 * (1.0 - cache.head_sig["color"]),
        "scale": np.asarray(d_scales) * SCALE_MAX * cache.head_sig["scale"]
                 * (1.0 - cache.head_sig["scale"]),
        "normal": np.asarray(d_normal_deltas) * OFFSET_BOUND
                  * (1.0 - cache.head_tanh["normal"] ** 2),
    }

    d_trunk_out = np.zeros_like(cache.trunk_act[-1])
    for name in HEAD_NAMES:
        w1, w2 = params.head_w[name]
        trunk_out, hid = cache.head_in[name]
        d_w2, d_b2, d_hid = _linear_backward(w2, hid, d_raw[name])
        d_hid = d_hid * _leaky_slope(hid)
        d_w1, d_b1, d_in = _linear_backward(w1, trunk_out, d_hid)
        grads.head_w[name][0] += d_w1
        grads.head_w[name][1] += d_w2
        grads.head_b[name][0] += d_b1
        grads.head_b[name][1] += d_b2
        d_trunk_out += d_in

    d_x0 = np.zeros_like(cache.x0)
    d_h = d_trunk_out
    for i in reversed(range(TRUNK_DEPTH)):
        d_z = d_h * _leaky_slope(cache.trunk_act[i])
        d_w, d_b, d_in = _linear_backward(params.trunk_w[i], cache.trunk_in[i], d_z)
        grads.trunk_w[i] += d_w
        grads.trunk_b[i] += d_b
        if i == SKIP_LAYER:
            d_h = d_in[:, :TRUNK_WIDTH]
            d_x0 += d_in[:, TRUNK_WIDTH:]
        else:
            d_h = d_in
    d_x0 += d_h

    c = FEATURE_CHANNELS
    if cache.self_condition:
        d_features = d_x0[:, :c] + d_x0[:, c:]
        d_condition = None
    else:
        d_features = d_x0[:, :c].copy()
        d_condition = d_x0[:, c:].copy()
    return grads, d_features, d_condition


# ---------------------------------------------------------------------------
# pose embedding
# ---------------------------------------------------------------------------

def encode_pose(params: DecoderParams, positions: np.ndarray):
    """Embed (T, 3) blend-skinned texel positions as (T, 32) condition rows.
    Returns (embedding, cache)."""
    positions = np.asarray(positions)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ValidationError("positions must be (T, 3)")
    hid = _leaky(positions @ params.enc_w[0] + params.enc_b[0])
    out = hid @ params.enc_w[1] + params.enc_b[1]
    return out, (positions, hid)


def encode_pose_backward(params: DecoderParams, cache, d_embedding,
                         grads: DecoderParams | None = None) -> DecoderParams:
    """Accumulate encoder weight gradients (input positions are treated as
    constants; the pose-refinement path runs through skinning instead)."""
    positions, hid = cache
    if grads is None:
        grads = zero_like_params(params)
    d_w1, d_b1, d_hid = _linear_backward(params.enc_w[1], hid, np.asarray(d_embedding))
    d_hid = d_hid * _leaky_slope(hid)
    d_w0, d_b0, _ = _linear_backward(params.enc_w[0], positions, d_hid)
    grads.enc_w[0] += d_w0
    grads.enc_w[1] += d_w1
    grads.enc_b[0] += d_b0
    grads.enc_b[1] += d_b1
    return grads


def accumulate_params(target: DecoderParams, source: DecoderParams) -> DecoderParams:
    """target += source, elementwise over every tensor."""
    for i in range(len(target.trunk_w)):
        target.trunk_w[i] += source.trunk_w[i]
        target.trunk_b[i] += source.trunk_b[i]
    for name in HEAD_NAMES:
        for i in range(2):
            target.head_w[name][i] += source.head_w[name][i]
            target.head_b[name][i] += source.head_b[name][i]
    for i in range(len(target.enc_w)):
        target.enc_w[i] += source.enc_w[i]
        target.enc_b[i] += source.enc_b[i]
    return target
