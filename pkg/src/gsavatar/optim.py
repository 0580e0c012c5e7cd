"""Adaptive-moment optimizer, the progressive guidance-weight decay, and
the per-epoch iteration scheduler.

Parameters travel as name -> array dicts (the checkpoint convention), so
the optimizer keeps moments per name and a per-name step counter: a tensor
whose gradient arrives non-finite skips its update without disturbing its
bias correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ValidationError
from .losses import LossWeights

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class OptimizerState:
    def __init__(self):
        self.first = {}
        self.second = {}
        self.steps = {}
        self.skipped = 0

    def ensure(self, name, shape, dtype):
        if name not in self.first:
            self.first[name] = np.zeros(shape, dtype=dtype)
            self.second[name] = np.zeros(shape, dtype=dtype)
            self.steps[name] = 0


def adam_step(params, grads, state: OptimizerState, lr,
              beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """One update over every name present in ``grads``; ``params`` is
    modified in place and returned."""
    for name, grad in grads.items():
        if name not in params:
            raise ValidationError(f"gradient for unknown parameter {name!r}")
        param = params[name]
        grad = np.asarray(grad)
        if grad.shape != param.shape:
            raise ValidationError(
                f"gradient shape {grad.shape} does not match {name!r} {param.shape}")
        if not np.all(np.isfinite(grad)):
            state.skipped += 1
            continue
        state.ensure(name, param.shape, np.float64)
        m = state.first[name]
        v = state.second[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        state.steps[name] += 1
        t = state.steps[name]
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False)
    return params


def sds_weight(epoch, lam0=0.3, t0=100, k=100):
    """Guidance weight halved every ``k`` epochs once past ``t0``; held at
    ``lam0`` before that."""
    if k < 1:
        raise ValidationError("decay interval must be >= 1")
    exponent = max(0, math.floor((epoch - t0) / k))
    return lam0 * 2.0 ** (-exponent)


def _round_half_up(x):
    return int(math.floor(x + 0.5))


@dataclass
class IterationPlan:
    n_given: int
    n_canonical_sds: int
    n_observation_sds: int
    order: list = field(default_factory=list)  # "given" | "canonical" | "observation"

    @property
    def total(self):
        return self.n_given + self.n_canonical_sds + self.n_observation_sds


def schedule_epoch(iterations, config, seed) -> IterationPlan:
    """Split an epoch between given-view and the two guidance spaces.

    Given-view takes its share first (round half up on N*(1-ratio_dual)),
    canonical guidance rounds half up within the remainder, observation
    gets the rest; the interleaving is a seeded shuffle.
    """
    if iterations < 1:
        raise ValidationError("an epoch needs at least one iteration")
    n_given = _round_half_up(iterations * (1.0 - config.ratio_dual))
    remainder = iterations - n_given
    n_canon = _round_half_up(remainder * config.ratio_canonical)
    n_obs = remainder - n_canon
    order = (["given"] * n_given + ["canonical"] * n_canon + ["observation"] * n_obs)
    rng = np.random.default_rng(seed)
    rng.shuffle(order)
    return IterationPlan(n_given, n_canon, n_obs, order)


@dataclass
class TrainConfig:
    epochs_stage1: int = 200
    epochs_stage2: int = 400
    ratio_dual: float = 0.5
    ratio_canonical: float = 0.5
    visibility_threshold: float = 0.5
    azimuth_samples: int = 100
    overhead_elevation_deg: float = 60.0
    weights: LossWeights = field(default_factory=LossWeights)
    sds_t0: int = 100
    sds_k: int = 100
    lr_features: float = 1e-3
    lr_networks: float = 5e-4
    lr_pose: float = 1e-4
    seed: int = 0
    resolution: int = 128
    map_resolution: int = 128
    dtype: str = "f64"
    pose_refinement: bool = False
    iterations_per_epoch: int | None = None  # None: one per dataset frame

    def __post_init__(self):
        for name in ("ratio_dual", "ratio_canonical"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {value}")
        if not 0.0 < self.visibility_threshold < 1.0:
            raise ValidationError("visibility_threshold must be in (0, 1)")
        if self.dtype not in ("f32", "f64"):
            raise ValidationError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if self.map_resolution < 8:
            raise ValidationError("map_resolution must be at least 8")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        weights = data.pop("weights", None)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        config = cls(**data)
        if weights is not None:
            unknown_w = set(weights) - {f.name for f in fields(LossWeights)}
            if unknown_w:
                raise ValidationError(f"unknown weight keys: {sorted(unknown_w)}")
            config = replace(config, weights=LossWeights(**weights))
        return config

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)
               if f.name != "weights"}
        out["weights"] = dict(vars(self.weights))
        return out
