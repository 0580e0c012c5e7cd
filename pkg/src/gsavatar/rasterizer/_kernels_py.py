"""Pure-NumPy compositing kernels.

Fallback implementation of the compiled kernels in ``_kernels.pyx``; both
expose the same three entry points and identical threshold semantics, so the
rasterizer front end can dispatch to either.  Splat arrays arrive already
culled, sorted front to back, and with per-splat integer pixel bounds
(x0, x1, y0, y1) precomputed by the front end.

Per pixel, splat i contributes alpha' = min(clamp, opacity * exp(-sigma))
with sigma = 0.5 * (A dx^2 + 2 B dx dy + C dy^2) evaluated at the pixel
center.  Contributions with alpha' below ``skip`` are ignored; a splat that
would drop the transmittance below ``term`` terminates the pixel without
being applied.  Remaining transmittance multiplies the background.
"""

from __future__ import annotations

import numpy as np


def _alpha_patch(mean, conic, opacity, clamp, x0, x1, y0, y1, dtype):
    xs = (np.arange(x0, x1, dtype=dtype) + dtype(0.5)) - dtype(mean[0])
    ys = (np.arange(y0, y1, dtype=dtype) + dtype(0.5)) - dtype(mean[1])
    dx = xs[None, :]
    dy = ys[:, None]
    sigma = dtype(0.5) * (conic[0] * dx * dx + conic[2] * dy * dy) + conic[1] * dx * dy
    alpha_raw = opacity * np.exp(-sigma)
    return np.minimum(alpha_raw, dtype(clamp)), alpha_raw, dx, dy


def composite_forward(means, conics, attrs, opacities, bboxes,
                      width, height, background, clamp, skip, term):
    """Front-to-back composite; returns (image, transmittance)."""
    dtype = means.dtype.type
    channels = attrs.shape[1]
    image = np.zeros((height, width, channels), dtype=dtype)
    trans = np.ones((height, width), dtype=dtype)
    done = np.zeros((height, width), dtype=bool)

    for i in range(means.shape[0]):
        x0, x1, y0, y1 = bboxes[i]
        if x0 >= x1 or y0 >= y1:
            continue
        alpha, _, _, _ = _alpha_patch(
            means[i], conics[i], opacities[i], clamp, x0, x1, y0, y1, dtype)
        sub_t = trans[y0:y1, x0:x1]
        cond = ~done[y0:y1, x0:x1] & (alpha >= skip)
        t_new = sub_t * (dtype(1.0) - alpha)
        kill = cond & (t_new < term)
        app = cond & ~kill
        weight = np.where(app, alpha * sub_t, dtype(0.0))
        image[y0:y1, x0:x1] += weight[:, :, None] * attrs[i][None, None, :]
        trans[y0:y1, x0:x1] = np.where(app, t_new, sub_t)
        done[y0:y1, x0:x1] |= kill

    image += trans[:, :, None] * np.asarray(background, dtype=dtype)[None, None, :]
    return image, trans


def composite_backward(means, conics, attrs, opacities, bboxes,
                       width, height, background, clamp, skip, term,
                       final_image, grad_image):
    """Replay the forward walk and accumulate per-splat gradients.

    Returns (d_means, d_conics, d_attrs, d_opacities).  The derivative of the
    final color wrt alpha'_i is T_i * attr_i - R_i / (1 - alpha'_i), where
    R_i is everything composited after splat i including the background term.
    Splats pinned at the alpha clamp pass no gradient into opacity or shape.
    """
    dtype = means.dtype.type
    n = means.shape[0]
    channels = attrs.shape[1]
    d_means = np.zeros((n, 2), dtype=dtype)
    d_conics = np.zeros((n, 3), dtype=dtype)
    d_attrs = np.zeros((n, channels), dtype=dtype)
    d_opac = np.zeros(n, dtype=dtype)

    accum = np.zeros((height, width, channels), dtype=dtype)
    trans = np.ones((height, width), dtype=dtype)
    done = np.zeros((height, width), dtype=bool)

    for i in range(n):
        x0, x1, y0, y1 = bboxes[i]
        if x0 >= x1 or y0 >= y1:
            continue
        alpha, alpha_raw, dx, dy = _alpha_patch(
            means[i], conics[i], opacities[i], clamp, x0, x1, y0, y1, dtype)
        sub_t = trans[y0:y1, x0:x1]
        cond = ~done[y0:y1, x0:x1] & (alpha >= skip)
        t_new = sub_t * (dtype(1.0) - alpha)
        kill = cond & (t_new < term)
        app = cond & ~kill

        weight = np.where(app, alpha * sub_t, dtype(0.0))
        contrib = weight[:, :, None] * attrs[i][None, None, :]
        s_after = accum[y0:y1, x0:x1] + contrib
        remain = final_image[y0:y1, x0:x1] - s_after
        grad = grad_image[y0:y1, x0:x1]

        d_attrs[i] += np.einsum("yxc,yx->c", grad, weight)
        d_alpha = np.einsum(
            "yxc,yxc->yx", grad,
            sub_t[:, :, None] * attrs[i][None, None, :]
            - remain / (dtype(1.0) - alpha)[:, :, None],
        )
        live = app & (alpha_raw <= clamp)
        d_alpha = np.where(live, d_alpha, dtype(0.0))
        gauss = alpha_raw / opacities[i] if opacities[i] > 0 else np.zeros_like(alpha_raw)
        d_opac[i] += np.sum(d_alpha * gauss)
        d_sigma = -d_alpha * opacities[i] * gauss
        d_conics[i, 0] += np.sum(d_sigma * dtype(0.5) * dx * dx)
        d_conics[i, 1] += np.sum(d_sigma * dx * dy)
        d_conics[i, 2] += np.sum(d_sigma * dtype(0.5) * dy * dy)
        d_means[i, 0] += np.sum(-d_sigma * (conics[i, 0] * dx + conics[i, 1] * dy))
        d_means[i, 1] += np.sum(-d_sigma * (conics[i, 1] * dx + conics[i, 2] * dy))

        accum[y0:y1, x0:x1] = s_after
        trans[y0:y1, x0:x1] = np.where(app, t_new, sub_t)
        done[y0:y1, x0:x1] |= kill

    return d_means, d_conics, d_attrs, d_opac


def mark_visibility(means, conics, opacities, bboxes,
                    width, height, clamp, hit_threshold):
    """Per-pixel index of the nearest splat with alpha' above the hit
    threshold (-1 where no splat qualifies)."""
    dtype = means.dtype.type
    winner = np.full((height, width), -1, dtype=np.int32)
    for i in range(means.shape[0]):
        x0, x1, y0, y1 = bboxes[i]
        if x0 >= x1 or y0 >= y1:
            continue
        alpha, _, _, _ = _alpha_patch(
            means[i], conics[i], opacities[i], clamp, x0, x1, y0, y1, dtype)
        sub = winner[y0:y1, x0:x1]
        hit = (sub < 0) & (alpha > hit_threshold)
        sub[hit] = i
    return winner
