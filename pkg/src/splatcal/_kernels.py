"""Numba kernels for the splatting hot loops.

All kernels are single-threaded and deterministic: pixels are traversed in
row-major order inside depth-sorted tile lists, so repeated runs are
bit-identical. Parallelism happens one level up (whole views rendered on
worker threads; ``nogil`` lets them overlap).
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def build_tile_lists(tile_bounds, n_tiles_x, n_tiles_y):
    """CSR tile lists from per-splat inclusive tile bounds (V, 4)=(tx0,tx1,ty0,ty1).

    Splats are appended in input (depth-rank) order, so every tile list is
    depth-sorted by construction.
    """
    n_tiles = n_tiles_x * n_tiles_y
    counts = np.zeros(n_tiles, dtype=np.int64)
    v = tile_bounds.shape[0]
    for g in range(v):
        for ty in range(tile_bounds[g, 2], tile_bounds[g, 3] + 1):
            for tx in range(tile_bounds[g, 0], tile_bounds[g, 1] + 1):
                counts[ty * n_tiles_x + tx] += 1
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    for t in range(n_tiles):
        offsets[t + 1] = offsets[t] + counts[t]
    lists = np.empty(offsets[n_tiles], dtype=np.int64)
    cursor = offsets[:-1].copy()
    for g in range(v):
        for ty in range(tile_bounds[g, 2], tile_bounds[g, 3] + 1):
            for tx in range(tile_bounds[g, 0], tile_bounds[g, 1] + 1):
                t = ty * n_tiles_x + tx
                lists[cursor[t]] = g
                cursor[t] += 1
    return offsets, lists


@njit(cache=True, nogil=True)
def count_contributions(
    mu2d, conic, opacity, tile_offsets, tile_lists, height, width,
    tile_size, n_tiles_x, n_tiles_y, alpha_cutoff, sigma_max,
):
    """Per-pixel count of blend contributions (the record sizes)."""
    counts = np.zeros(height * width, dtype=np.int64)
    for ty in range(n_tiles_y):
        for tx in range(n_tiles_x):
            t = ty * n_tiles_x + tx
            lo, hi = tile_offsets[t], tile_offsets[t + 1]
            if lo == hi:
                continue
            for py in range(ty * tile_size, min((ty + 1) * tile_size, height)):
                for px in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                    x = px + 0.5
                    y = py + 0.5
                    c = 0
                    for r in range(lo, hi):
                        g = tile_lists[r]
                        dx = x - mu2d[g, 0]
                        dy = y - mu2d[g, 1]
                        sigma = (
                            0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy)
                            + conic[g, 1] * dx * dy
                        )
                        if sigma > sigma_max:
                            continue
                        alpha = opacity[g] * np.exp(-sigma)
                        if alpha < alpha_cutoff:
                            continue
                        c += 1
                    counts[py * width + px] = c
    return counts


@njit(cache=True, nogil=True)
def blend_forward(
    mu2d, conic, rgb, opacity, tile_offsets, tile_lists, height, width,
    tile_size, n_tiles_x, n_tiles_y, alpha_cutoff, sigma_max, alpha_max,
    fill_records, rec_offsets, rec_id, rec_alpha, rec_weight,
    image, final_t,
):
    """Front-to-back alpha blending over tile lists.

    When ``fill_records`` is set, the (splat rank, alpha, weight) of every
    contribution is written to the CSR record arrays in blend order.
    """
    for ty in range(n_tiles_y):
        for tx in range(n_tiles_x):
            t = ty * n_tiles_x + tx
            lo, hi = tile_offsets[t], tile_offsets[t + 1]
            for py in range(ty * tile_size, min((ty + 1) * tile_size, height)):
                for px in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                    x = px + 0.5
                    y = py + 0.5
                    trans = 1.0
                    base = rec_offsets[py * width + px] if fill_records else 0
                    c = 0
                    for r in range(lo, hi):
                        g = tile_lists[r]
                        dx = x - mu2d[g, 0]
                        dy = y - mu2d[g, 1]
                        sigma = (
                            0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy)
                            + conic[g, 1] * dx * dy
                        )
                        if sigma > sigma_max:
                            continue
                        alpha = opacity[g] * np.exp(-sigma)
                        if alpha < alpha_cutoff:
                            continue
                        if alpha > alpha_max:
                            alpha = alpha_max
                        w = alpha * trans
                        image[py, px, 0] += rgb[g, 0] * w
                        image[py, px, 1] += rgb[g, 1] * w
                        image[py, px, 2] += rgb[g, 2] * w
                        if fill_records:
                            rec_id[base + c] = g
                            rec_alpha[base + c] = alpha
                            rec_weight[base + c] = w
                        c += 1
                        trans *= 1.0 - alpha
                    final_t[py, px] = trans


@njit(cache=True, nogil=True)
def blend_backward(
    d_image, mu2d, conic, rgb, opacity, rec_offsets, rec_id, rec_alpha,
    rec_weight, height, width, alpha_max,
    d_mu2d, d_conic_mat, d_rgb, d_opacity,
):
    """Adjoint of :func:`blend_forward` from stored records.

    Pixels are walked row-major and each pixel's contributions back-to-front,
    maintaining the suffix color sum so every splat's alpha gradient costs
    O(1). Outputs accumulate per splat rank: d_mu2d (V,2), d_conic_mat (V,3)
    holding the gradient w.r.t. the full symmetric conic matrix entries
    (m00, m01, m11), d_rgb (V,3), d_opacity (V,) w.r.t. the materialized
    opacity.
    """
    for py in range(height):
        for px in range(width):
            idx = py * width + px
            lo, hi = rec_offsets[idx], rec_offsets[idx + 1]
            if lo == hi:
                continue
            dc0 = d_image[py, px, 0]
            dc1 = d_image[py, px, 1]
            dc2 = d_image[py, px, 2]
            s0 = 0.0
            s1 = 0.0
            s2 = 0.0
            x = px + 0.5
            y = py + 0.5
            for r in range(hi - 1, lo - 1, -1):
                g = rec_id[r]
                a = rec_alpha[r]
                w = rec_weight[r]
                trans = w / a
                d_rgb[g, 0] += w * dc0
                d_rgb[g, 1] += w * dc1
                d_rgb[g, 2] += w * dc2
                one_m = 1.0 - a
                d_alpha = (
                    dc0 * (rgb[g, 0] * trans - s0 / one_m)
                    + dc1 * (rgb[g, 1] * trans - s1 / one_m)
                    + dc2 * (rgb[g, 2] * trans - s2 / one_m)
                )
                if a < alpha_max:  # alpha cap active -> no gradient through alpha
                    d_opacity[g] += (a / opacity[g]) * d_alpha
                    d_sigma = -a * d_alpha
                    dx = x - mu2d[g, 0]
                    dy = y - mu2d[g, 1]
                    adx = conic[g, 0] * dx + conic[g, 1] * dy
                    ady = conic[g, 1] * dx + conic[g, 2] * dy
                    d_mu2d[g, 0] -= d_sigma * adx
                    d_mu2d[g, 1] -= d_sigma * ady
                    d_conic_mat[g, 0] += d_sigma * 0.5 * dx * dx
                    d_conic_mat[g, 1] += d_sigma * 0.5 * dx * dy
                    d_conic_mat[g, 2] += d_sigma * 0.5 * dy * dy
                s0 += rgb[g, 0] * w
                s1 += rgb[g, 1] * w
                s2 += rgb[g, 2] * w
