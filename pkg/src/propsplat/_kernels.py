"""Compiled inner loops for prediction and gradient accumulation.

Gaussians are passed as a packed ``(N, 12)`` array: columns 0-2 hold the
center, columns 3-11 the row-major matrix ``diag(1/s) @ R^T``, so that
applying it to a world-frame displacement yields the scale-normalized local
displacement whose squared norm is the Mahalanobis term.

Prediction is vectorized across queries: for each Gaussian, every query in a
block is updated in lockstep, so each query still accumulates its Gaussians
strictly in index order. The result for a query never depends on which other
queries share its batch.
"""

import math
import os
import warnings

import llvmlite.binding as llvm
import numba as nb
import numpy as np
from numba.core import types
from numba.extending import intrinsic


def _allow_wide_vectors() -> None:
    """Let LLVM use full 512-bit registers on AVX-512 hosts.

    By default LLVM caps auto-vectorization at 256 bits on these CPUs. The
    query loops here are long, branch-free and FMA-bound, and run roughly
    40 % faster at full width. A user-supplied NUMBA_CPU_FEATURES is left
    alone, and the change only takes effect if nothing has been compiled yet.
    """
    if nb.config.CPU_FEATURES or os.environ.get("NUMBA_CPU_FEATURES"):
        return
    llvm.initialize_native_target()
    features = llvm.get_host_cpu_features()
    if features.get("avx512f"):
        nb.config.CPU_FEATURES = features.flatten() + ",-prefer-256-bit"


_allow_wide_vectors()

# An old system TBB only disables one optional threading layer; numba falls
# back to another, so the warning carries no information for users.
warnings.filterwarnings("ignore", message="The TBB threading layer")

MIN_DISTANCE_M = 1.0
QUERY_BLOCK = 1024

# exp() is evaluated on [EXP_FLOOR, 0]; below that the result would be
# subnormal (and slow), so the exponent is clamped instead.
EXP_FLOOR = -708.0
_LOG2E = 1.4426950408889634
_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10
_ROUND_MAGIC = 6755399441055744.0  # 1.5 * 2**52
_ROUND_MAGIC_BITS = 0x4338000000000000

_FASTMATH = {"contract"}


@intrinsic
def _f2i(typingctx, x):
    sig = types.int64(types.float64)

    def codegen(context, builder, signature, args):
        return builder.bitcast(args[0], context.get_value_type(types.int64))

    return sig, codegen


@intrinsic
def _i2f(typingctx, x):
    sig = types.float64(types.int64)

    def codegen(context, builder, signature, args):
        return builder.bitcast(args[0], context.get_value_type(types.float64))

    return sig, codegen


@nb.njit(inline="always", fastmath=_FASTMATH)
def exp_nonpos(x):
    """exp(x) for x in [EXP_FLOOR, 0] without a libm call (vectorizes).

    Degree-11 Taylor polynomial on |r| <= ln2/2; relative error below 2e-14.
    """
    t = x * _LOG2E + _ROUND_MAGIC
    n = t - _ROUND_MAGIC
    r = (x - n * _LN2_HI) - n * _LN2_LO
    p = 1.0 / 39916800
    p = 1.0 / 3628800 + r * p
    p = 1.0 / 362880 + r * p
    p = 1.0 / 40320 + r * p
    p = 1.0 / 5040 + r * p
    p = 1.0 / 720 + r * p
    p = 1.0 / 120 + r * p
    p = 1.0 / 24 + r * p
    p = 1.0 / 6 + r * p
    p = 0.5 + r * p
    p = 1.0 + r * p
    p = 1.0 + r * p
    return p * _i2f((_f2i(t) - (_ROUND_MAGIC_BITS - 1023)) << 52)


@nb.njit(inline="always", fastmath=_FASTMATH)
def _link_terms(t0, t1, t2, ux, uy, uz, g):
    """Projection length, perpendicular displacement and scaled local coordinates.

    ``g`` is one packed Gaussian row as a 12-tuple of scalars.
    """
    wx = g[0] - t0
    wy = g[1] - t1
    wz = g[2] - t2
    l = wx * ux + wy * uy + wz * uz
    dx = l * ux - wx
    dy = l * uy - wy
    dz = l * uz - wz
    z0 = g[3] * dx + g[4] * dy + g[5] * dz
    z1 = g[6] * dx + g[7] * dy + g[8] * dz
    z2 = g[9] * dx + g[10] * dy + g[11] * dz
    return l, dx, dy, dz, z0, z1, z2


@nb.njit(inline="always")
def _row(G, i):
    return (G[i, 0], G[i, 1], G[i, 2], G[i, 3], G[i, 4], G[i, 5],
            G[i, 6], G[i, 7], G[i, 8], G[i, 9], G[i, 10], G[i, 11])


def _make_predict(cull, parallel):
    loop = nb.prange if parallel else range

    @nb.njit(cache=True, fastmath=_FASTMATH, error_model="numpy", parallel=parallel)
    def kernel(tx, rx, f_term, gamma, G, offset, cull_r2, skip, out):
        n_g = G.shape[0]
        n_q = tx.shape[0]
        n_blocks = (n_q + QUERY_BLOCK - 1) // QUERY_BLOCK
        for b in loop(n_blocks):
            q0 = b * QUERY_BLOCK
            m = min(QUERY_BLOCK, n_q - q0)
            T0 = np.empty(m)
            T1 = np.empty(m)
            T2 = np.empty(m)
            UX = np.empty(m)
            UY = np.empty(m)
            UZ = np.empty(m)
            D = np.empty(m)
            acc = np.zeros(m)
            for j in range(m):
                vx = rx[q0 + j, 0] - tx[q0 + j, 0]
                vy = rx[q0 + j, 1] - tx[q0 + j, 1]
                vz = rx[q0 + j, 2] - tx[q0 + j, 2]
                d = math.sqrt(vx * vx + vy * vy + vz * vz)
                D[j] = d
                # zero-length links: every Gaussian fails the gate (0 < l < 0)
                inv = 1.0 / d if d > 0.0 else 0.0
                UX[j] = vx * inv
                UY[j] = vy * inv
                UZ[j] = vz * inv
                T0[j] = tx[q0 + j, 0]
                T1[j] = tx[q0 + j, 1]
                T2[j] = tx[q0 + j, 2]
            for i in range(n_g):
                if i == skip:
                    continue
                o = offset[i]
                c2 = cull_r2[i]
                g = _row(G, i)
                for j in range(m):
                    l, dx, dy, dz, z0, z1, z2 = _link_terms(
                        T0[j], T1[j], T2[j], UX[j], UY[j], UZ[j], g)
                    x = max(-0.5 * (z0 * z0 + z1 * z1 + z2 * z2), EXP_FLOOR)
                    ok = (l > 0.0) & (l < D[j])
                    if cull:
                        ok = ok & (dx * dx + dy * dy + dz * dz <= c2)
                    acc[j] += (o * exp_nonpos(x)) if ok else 0.0
            for j in range(m):
                base = f_term + 10.0 * gamma * math.log10(max(D[j], MIN_DISTANCE_M))
                out[q0 + j] = base + acc[j]

    return kernel


_PREDICT = {
    (cull, parallel): _make_predict(cull, parallel)
    for cull in (False, True)
    for parallel in (False, True)
}


def predict_into(tx, rx, f_term, gamma, G, offset, cull_r2, out, skip=-1, parallel=False):
    kernel = _PREDICT[(bool(np.isfinite(cull_r2).any()), parallel)]
    kernel(tx, rx, f_term, gamma, G, offset, cull_r2, skip, out)
    return out


@nb.njit(cache=True, fastmath=_FASTMATH, error_model="numpy")
def alphas_one(tx, rx, G, cull_r2):
    """Per-Gaussian influence and projection length for one link.

    Irrelevant Gaussians (outside the gate, or culled) get alpha = -1.
    """
    n = G.shape[0]
    alpha = np.empty(n)
    lproj = np.empty(n)
    vx = rx[0] - tx[0]
    vy = rx[1] - tx[1]
    vz = rx[2] - tx[2]
    d = math.sqrt(vx * vx + vy * vy + vz * vz)
    inv = 1.0 / d if d > 0.0 else 0.0
    ux = vx * inv
    uy = vy * inv
    uz = vz * inv
    for i in range(n):
        l, dx, dy, dz, z0, z1, z2 = _link_terms(tx[0], tx[1], tx[2], ux, uy, uz, _row(G, i))
        lproj[i] = l
        x = max(-0.5 * (z0 * z0 + z1 * z1 + z2 * z2), EXP_FLOOR)
        if 0.0 < l < d and dx * dx + dy * dy + dz * dz <= cull_r2[i]:
            alpha[i] = exp_nonpos(x)
        else:
            alpha[i] = -1.0
    return alpha, lproj


@nb.njit(cache=True, fastmath=_FASTMATH, error_model="numpy")
def _accumulate(j0, j1, tx, rx, dl_dpl, G, rot, inv_s, offset, g_mu, g_ls, g_rot, g_off):
    """Backward pass over samples ``j0..j1`` given dL/dPL per sample.

    ``rot`` is (N, 9) row-major R, ``inv_s`` is (N, 3). Accumulates
    dL/dmu, dL/dlog_s, dL/dR and dL/doffset.
    """
    n = G.shape[0]
    for j in range(j0, j1):
        g = dl_dpl[j]
        if g == 0.0:
            continue
        vx = rx[j, 0] - tx[j, 0]
        vy = rx[j, 1] - tx[j, 1]
        vz = rx[j, 2] - tx[j, 2]
        d = math.sqrt(vx * vx + vy * vy + vz * vz)
        ux = vx / d
        uy = vy / d
        uz = vz / d
        for i in range(n):
            l, dx, dy, dz, z0, z1, z2 = _link_terms(tx[j, 0], tx[j, 1], tx[j, 2], ux, uy, uz,
                                                    _row(G, i))
            if not (0.0 < l < d):
                continue
            x = -0.5 * (z0 * z0 + z1 * z1 + z2 * z2)
            if x < EXP_FLOOR:
                # clamped region is flat: only the offset sees the floor value
                g_off[i] += g * exp_nonpos(EXP_FLOOR)
                continue
            a = exp_nonpos(x)
            g_off[i] += g * a
            c = g * offset[i] * a
            g_ls[i, 0] += c * z0 * z0
            g_ls[i, 1] += c * z1 * z1
            g_ls[i, 2] += c * z2 * z2
            # e_k = z_k / s_k ; dL/dR[m, k] = -c * delta_m * e_k
            e0 = z0 * inv_s[i, 0]
            e1 = z1 * inv_s[i, 1]
            e2 = z2 * inv_s[i, 2]
            g_rot[i, 0] -= c * dx * e0
            g_rot[i, 1] -= c * dx * e1
            g_rot[i, 2] -= c * dx * e2
            g_rot[i, 3] -= c * dy * e0
            g_rot[i, 4] -= c * dy * e1
            g_rot[i, 5] -= c * dy * e2
            g_rot[i, 6] -= c * dz * e0
            g_rot[i, 7] -= c * dz * e1
            g_rot[i, 8] -= c * dz * e2
            # b = R e ; dL/dmu = c * (b - (b.u) u)
            bx = rot[i, 0] * e0 + rot[i, 1] * e1 + rot[i, 2] * e2
            by = rot[i, 3] * e0 + rot[i, 4] * e1 + rot[i, 5] * e2
            bz = rot[i, 6] * e0 + rot[i, 7] * e1 + rot[i, 8] * e2
            bu = bx * ux + by * uy + bz * uz
            g_mu[i, 0] += c * (bx - bu * ux)
            g_mu[i, 1] += c * (by - bu * uy)
            g_mu[i, 2] += c * (bz - bu * uz)


@nb.njit(cache=True)
def backward(tx, rx, dl_dpl, G, rot, inv_s, offset):
    n = G.shape[0]
    g_mu = np.zeros((n, 3))
    g_ls = np.zeros((n, 3))
    g_rot = np.zeros((n, 9))
    g_off = np.zeros(n)
    _accumulate(0, tx.shape[0], tx, rx, dl_dpl, G, rot, inv_s, offset, g_mu, g_ls, g_rot, g_off)
    return g_mu, g_ls, g_rot, g_off


@nb.njit(cache=True, parallel=True)
def backward_chunked(tx, rx, dl_dpl, G, rot, inv_s, offset, n_chunks):
    """Chunked backward pass; partials are reduced in chunk order so the
    result does not depend on how many threads ran the chunks."""
    n = G.shape[0]
    m = tx.shape[0]
    p_mu = np.zeros((n_chunks, n, 3))
    p_ls = np.zeros((n_chunks, n, 3))
    p_rot = np.zeros((n_chunks, n, 9))
    p_off = np.zeros((n_chunks, n))
    for c in nb.prange(n_chunks):
        j0 = (m * c) // n_chunks
        j1 = (m * (c + 1)) // n_chunks
        _accumulate(j0, j1, tx, rx, dl_dpl, G, rot, inv_s, offset,
                    p_mu[c], p_ls[c], p_rot[c], p_off[c])
    g_mu = np.zeros((n, 3))
    g_ls = np.zeros((n, 3))
    g_rot = np.zeros((n, 9))
    g_off = np.zeros(n)
    for c in range(n_chunks):
        g_mu += p_mu[c]
        g_ls += p_ls[c]
        g_rot += p_rot[c]
        g_off += p_off[c]
    return g_mu, g_ls, g_rot, g_off
