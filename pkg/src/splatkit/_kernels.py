"""Numba tile kernels for compositing and its adjoint.

Both kernels parallelise over tiles. Every tile owns a disjoint pixel block
for the forward pass and a disjoint slice of the pair buffer for the
backward pass, so results do not depend on the number of threads.
"""
import numpy as np
from numba import njit, prange

# m = Mahalanobis^2; footprint is truncated at the 3-sigma ellipse
CUTOFF = 9.0


@njit(cache=True, parallel=True)
def composite_tiles(tile_start, pair_splat, means, conics, opac, colors, depths,
                    width, height, tiles_x, tile, alpha_max, out_color, out_trans,
                    out_wsum, out_depth):
    n_tiles = tile_start.size - 1
    for t in prange(n_tiles):
        ty, tx = divmod(t, tiles_x)
        y0 = ty * tile
        x0 = tx * tile
        s = tile_start[t]
        e = tile_start[t + 1]
        for py in range(y0, min(y0 + tile, height)):
            for px in range(x0, min(x0 + tile, width)):
                T = 1.0
                r = 0.0
                g_ = 0.0
                b = 0.0
                wsum = 0.0
                dsum = 0.0
                for k in range(s, e):
                    j = pair_splat[k]
                    dx = px - means[j, 0]
                    dy = py - means[j, 1]
                    m = conics[j, 0] * dx * dx + 2.0 * conics[j, 1] * dx * dy + conics[j, 2] * dy * dy
                    if m > CUTOFF:
                        continue
                    a = opac[j] * np.exp(-0.5 * m)
                    if a > alpha_max:
                        a = alpha_max
                    w = a * T
                    r += colors[j, 0] * w
                    g_ += colors[j, 1] * w
                    b += colors[j, 2] * w
                    dsum += depths[j] * w
                    wsum += w
                    T *= 1.0 - a
                out_color[py, px, 0] = r
                out_color[py, px, 1] = g_
                out_color[py, px, 2] = b
                out_trans[py, px] = T
                out_wsum[py, px] = wsum
                out_depth[py, px] = dsum


@njit(cache=True, parallel=True)
def composite_tiles_backward(tile_start, pair_splat, means, conics, opac, colors,
                             width, height, tiles_x, tile, alpha_max,
                             d_color, d_trans, pair_grad):
    """Per-pair gradients: d mean (2), d conic (a, b, c), d opacity, d colour (3).

    ``d_color`` is the cotangent of the splat-only colour sum and ``d_trans``
    the cotangent of the final transmittance (background terms fold into it).
    """
    n_tiles = tile_start.size - 1
    for t in prange(n_tiles):
        ty, tx = divmod(t, tiles_x)
        y0 = ty * tile
        x0 = tx * tile
        s = tile_start[t]
        e = tile_start[t + 1]
        n = e - s
        idx = np.empty(n, dtype=np.int64)
        alph = np.empty(n)
        trans = np.empty(n)
        gval = np.empty(n)
        clamped = np.empty(n, dtype=np.bool_)
        ddx = np.empty(n)
        ddy = np.empty(n)
        for py in range(y0, min(y0 + tile, height)):
            for px in range(x0, min(x0 + tile, width)):
                T = 1.0
                cnt = 0
                for k in range(s, e):
                    j = pair_splat[k]
                    dx = px - means[j, 0]
                    dy = py - means[j, 1]
                    m = conics[j, 0] * dx * dx + 2.0 * conics[j, 1] * dx * dy + conics[j, 2] * dy * dy
                    if m > CUTOFF:
                        continue
                    g = np.exp(-0.5 * m)
                    a = opac[j] * g
                    c = False
                    if a > alpha_max:
                        a = alpha_max
                        c = True
                    idx[cnt] = k
                    alph[cnt] = a
                    trans[cnt] = T
                    gval[cnt] = g
                    clamped[cnt] = c
                    ddx[cnt] = dx
                    ddy[cnt] = dy
                    cnt += 1
                    T *= 1.0 - a
                gr = d_color[py, px, 0]
                gg = d_color[py, px, 1]
                gb = d_color[py, px, 2]
                acc = d_trans[py, px] * T
                for i in range(cnt - 1, -1, -1):
                    k = idx[i]
                    j = pair_splat[k]
                    a = alph[i]
                    Ti = trans[i]
                    w = a * Ti
                    pair_grad[k, 6] += gr * w
                    pair_grad[k, 7] += gg * w
                    pair_grad[k, 8] += gb * w
                    cg = colors[j, 0] * gr + colors[j, 1] * gg + colors[j, 2] * gb
                    d_alpha = Ti * cg - acc / (1.0 - a)
                    acc += cg * w
                    if clamped[i]:
                        continue
                    g = gval[i]
                    pair_grad[k, 5] += d_alpha * g
                    dg = d_alpha * opac[j]
                    dx = ddx[i]
                    dy = ddy[i]
                    # g = exp(-m/2), dm/dmean = -2 A delta
                    pair_grad[k, 0] += dg * g * (conics[j, 0] * dx + conics[j, 1] * dy)
                    pair_grad[k, 1] += dg * g * (conics[j, 1] * dx + conics[j, 2] * dy)
                    pair_grad[k, 2] += -0.5 * dg * g * dx * dx
                    pair_grad[k, 3] += -dg * g * dx * dy
                    pair_grad[k, 4] += -0.5 * dg * g * dy * dy


@njit(cache=True)
def reduce_pairs(pair_splat, pair_grad, out):
    for k in range(pair_splat.size):
        j = pair_splat[k]
        for c in range(pair_grad.shape[1]):
            out[j, c] += pair_grad[k, c]
