"""Animatable Gaussian-splat avatars from partial monocular views.

Two-stage pipeline: fit the splats a capture actually saw, then fill in
the rest of the body with score-distillation guidance from a diffusion
provider, rendered and optimized in both the canonical pose and the
observation poses.
"""

__version__ = "0.1.0"
