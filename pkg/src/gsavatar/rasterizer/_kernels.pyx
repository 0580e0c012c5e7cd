# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled compositing kernels.

Same entry points and threshold semantics as the pure-NumPy reference in
``_kernels_py``; the front end dispatches to whichever backend is active.
Loops run single-threaded so accumulation order is deterministic.
"""

import numpy as np

from libc.math cimport exp, expf

ctypedef fused floating:
    float
    double


cdef inline floating _exp(floating x) noexcept nogil:
    if floating is float:
        return expf(x)
    else:
        return exp(x)


def composite_forward(floating[:, ::1] means, floating[:, ::1] conics,
                      floating[:, ::1] attrs, floating[::1] opacities,
                      int[:, ::1] bboxes, int width, int height,
                      floating[::1] background,
                      double clamp, double skip, double term):
    """Front-to-back composite; returns (image, transmittance)."""
    if floating is float:
        dt = np.float32
    else:
        dt = np.float64
    cdef int n = means.shape[0]
    cdef int channels = attrs.shape[1]
    image_arr = np.zeros((height, width, channels), dtype=dt)
    trans_arr = np.ones((height, width), dtype=dt)
    done_arr = np.zeros((height, width), dtype=np.uint8)
    cdef floating[:, :, ::1] image = image_arr
    cdef floating[:, ::1] trans = trans_arr
    cdef unsigned char[:, ::1] done = done_arr

    cdef int i, px, py, ch, x0, x1, y0, y1
    cdef floating a, b, c, mx, my, op, dx, dy, sigma, alpha, t_new, w
    cdef floating fclamp = <floating>clamp
    cdef floating fskip = <floating>skip
    cdef floating fterm = <floating>term

    for i in range(n):
        x0 = bboxes[i, 0]
        x1 = bboxes[i, 1]
        y0 = bboxes[i, 2]
        y1 = bboxes[i, 3]
        if x0 >= x1 or y0 >= y1:
            continue
        a = conics[i, 0]
        b = conics[i, 1]
        c = conics[i, 2]
        mx = means[i, 0]
        my = means[i, 1]
        op = opacities[i]
        for py in range(y0, y1):
            dy = <floating>(py + 0.5) - my
            for px in range(x0, x1):
                if done[py, px]:
                    continue
                dx = <floating>(px + 0.5) - mx
                sigma = <floating>0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
                alpha = op * _exp(-sigma)
                if alpha > fclamp:
                    alpha = fclamp
                if alpha < fskip:
                    continue
                t_new = trans[py, px] * (<floating>1.0 - alpha)
                if t_new < fterm:
                    done[py, px] = 1
                    continue
                w = alpha * trans[py, px]
                for ch in range(channels):
                    image[py, px, ch] += w * attrs[i, ch]
                trans[py, px] = t_new

    for py in range(height):
        for px in range(width):
            for ch in range(channels):
                image[py, px, ch] += trans[py, px] * background[ch]
    return image_arr, trans_arr


def composite_backward(floating[:, ::1] means, floating[:, ::1] conics,
                       floating[:, ::1] attrs, floating[::1] opacities,
                       int[:, ::1] bboxes, int width, int height,
                       floating[::1] background,
                       double clamp, double skip, double term,
                       floating[:, :, ::1] final_image,
                       floating[:, :, ::1] grad_image):
    """Replay the forward walk and accumulate per-splat gradients.

    Returns (d_means, d_conics, d_attrs, d_opacities); derivation mirrors
    the reference kernel.
    """
    if floating is float:
        dt = np.float32
    else:
        dt = np.float64
    cdef int n = means.shape[0]
    cdef int channels = attrs.shape[1]
    d_means_arr = np.zeros((n, 2), dtype=dt)
    d_conics_arr = np.zeros((n, 3), dtype=dt)
    d_attrs_arr = np.zeros((n, channels), dtype=dt)
    d_opac_arr = np.zeros(n, dtype=dt)
    accum_arr = np.zeros((height, width, channels), dtype=dt)
    trans_arr = np.ones((height, width), dtype=dt)
    done_arr = np.zeros((height, width), dtype=np.uint8)
    cdef floating[:, ::1] d_means = d_means_arr
    cdef floating[:, ::1] d_conics = d_conics_arr
    cdef floating[:, ::1] d_attrs = d_attrs_arr
    cdef floating[::1] d_opac = d_opac_arr
    cdef floating[:, :, ::1] accum = accum_arr
    cdef floating[:, ::1] trans = trans_arr
    cdef unsigned char[:, ::1] done = done_arr

    cdef int i, px, py, ch, x0, x1, y0, y1
    cdef floating a, b, c, mx, my, op, dx, dy, sigma, alpha_raw, alpha
    cdef floating t_new, w, t_cur, d_alpha, contrib, s_after, g, gauss, d_sigma
    cdef floating fclamp = <floating>clamp
    cdef floating fskip = <floating>skip
    cdef floating fterm = <floating>term

    for i in range(n):
        x0 = bboxes[i, 0]
        x1 = bboxes[i, 1]
        y0 = bboxes[i, 2]
        y1 = bboxes[i, 3]
        if x0 >= x1 or y0 >= y1:
            continue
        a = conics[i, 0]
        b = conics[i, 1]
        c = conics[i, 2]
        mx = means[i, 0]
        my = means[i, 1]
        op = opacities[i]
        for py in range(y0, y1):
            dy = <floating>(py + 0.5) - my
            for px in range(x0, x1):
                if done[py, px]:
                    continue
                dx = <floating>(px + 0.5) - mx
                sigma = <floating>0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
                alpha_raw = op * _exp(-sigma)
                alpha = alpha_raw
                if alpha > fclamp:
                    alpha = fclamp
                if alpha < fskip:
                    continue
                t_cur = trans[py, px]
                t_new = t_cur * (<floating>1.0 - alpha)
                if t_new < fterm:
                    done[py, px] = 1
                    continue
                w = alpha * t_cur
                d_alpha = <floating>0.0
                for ch in range(channels):
                    contrib = w * attrs[i, ch]
                    s_after = accum[py, px, ch] + contrib
                    g = grad_image[py, px, ch]
                    d_attrs[i, ch] += g * w
                    d_alpha += g * (t_cur * attrs[i, ch]
                                    - (final_image[py, px, ch] - s_after)
                                    / (<floating>1.0 - alpha))
                    accum[py, px, ch] = s_after
                if alpha_raw <= fclamp:
                    gauss = alpha_raw / op if op > 0 else <floating>0.0
                    d_opac[i] += d_alpha * gauss
                    d_sigma = -d_alpha * op * gauss
                    d_conics[i, 0] += d_sigma * <floating>0.5 * dx * dx
                    d_conics[i, 1] += d_sigma * dx * dy
                    d_conics[i, 2] += d_sigma * <floating>0.5 * dy * dy
                    d_means[i, 0] -= d_sigma * (a * dx + b * dy)
                    d_means[i, 1] -= d_sigma * (b * dx + c * dy)
                trans[py, px] = t_new

    return d_means_arr, d_conics_arr, d_attrs_arr, d_opac_arr


def mark_visibility(floating[:, ::1] means, floating[:, ::1] conics,
                    floating[::1] opacities, int[:, ::1] bboxes,
                    int width, int height, double clamp, double hit_threshold):
    """Per-pixel index of the nearest splat with alpha' above the hit
    threshold (-1 where no splat qualifies)."""
    winner_arr = np.full((height, width), -1, dtype=np.int32)
    cdef int[:, ::1] winner = winner_arr
    cdef int n = means.shape[0]
    cdef int i, px, py, x0, x1, y0, y1
    cdef floating a, b, c, mx, my, op, dx, dy, sigma, alpha
    cdef floating fclamp = <floating>clamp
    cdef floating fhit = <floating>hit_threshold

    for i in range(n):
        x0 = bboxes[i, 0]
        x1 = bboxes[i, 1]
        y0 = bboxes[i, 2]
        y1 = bboxes[i, 3]
        if x0 >= x1 or y0 >= y1:
            continue
        a = conics[i, 0]
        b = conics[i, 1]
        c = conics[i, 2]
        mx = means[i, 0]
        my = means[i, 1]
        op = opacities[i]
        for py in range(y0, y1):
            dy = <floating>(py + 0.5) - my
            for px in range(x0, x1):
                if winner[py, px] >= 0:
                    continue
                dx = <floating>(px + 0.5) - mx
                sigma = <floating>0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
                alpha = op * _exp(-sigma)
                if alpha > fclamp:
                    alpha = fclamp
                if alpha > fhit:
                    winner[py, px] = i
    return winner_arr
