"""Pure numpy kernels. Reference semantics for the compiled ``_ckernels``."""
import numpy as np

NAME = "python"


def _corners(u, v, H, W):
    x0 = np.floor(u)
    y0 = np.floor(v)
    ax = u - x0
    ay = v - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1
    out = []
    for yy, xx, w, dwu, dwv in (
        (y0, x0, (1 - ay) * (1 - ax), -(1 - ay), -(1 - ax)),
        (y0, x1, (1 - ay) * ax, (1 - ay), -ax),
        (y1, x0, ay * (1 - ax), -ay, (1 - ax)),
        (y1, x1, ay * ax, ay, ax),
    ):
        ok = (xx >= 0) & (xx < W) & (yy >= 0) & (yy < H)
        out.append((np.where(ok, yy, 0), np.where(ok, xx, 0), ok, w, dwu, dwv))
    return out


def bilinear_sample(fmap, u, v):
    H, W, C = fmap.shape
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    out = np.zeros((u.size, C))
    for yy, xx, ok, w, _, _ in _corners(u, v, H, W):
        out += np.where(ok, w, 0.0)[:, None] * fmap[yy, xx]
    return out


def bilinear_backward(fmap, u, v, grad_out):
    H, W, C = fmap.shape
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    g_map = np.zeros_like(fmap)
    g_u = np.zeros(u.size)
    g_v = np.zeros(u.size)
    for yy, xx, ok, w, dwu, dwv in _corners(u, v, H, W):
        okf = ok.astype(np.float64)
        np.add.at(g_map, (yy, xx), (okf * w)[:, None] * grad_out)
        dot = (fmap[yy, xx] * grad_out).sum(axis=1) * okf
        g_u += dwu * dot
        g_v += dwv * dot
    return g_map, g_u, g_v


def deform_aggregate(fmap, u, v, offsets, att):
    """``G[n, h] = sum_s att[n, h, s] * bilinear(fmap, (u[n], v[n]) + offsets[n, h, s])``."""
    N, Hh, S, _ = offsets.shape
    C = fmap.shape[2]
    G = np.zeros((N, Hh, C))
    for s in range(S):
        pu = (u[:, None] + offsets[:, :, s, 0]).ravel()
        pv = (v[:, None] + offsets[:, :, s, 1]).ravel()
        samp = bilinear_sample(fmap, pu, pv).reshape(N, Hh, C)
        G += att[:, :, s, None] * samp
    return G


def deform_aggregate_backward(fmap, u, v, offsets, att, grad_G):
    N, Hh, S, _ = offsets.shape
    C = fmap.shape[2]
    g_map = np.zeros_like(fmap)
    g_off = np.zeros_like(offsets)
    g_att = np.zeros_like(att)
    for s in range(S):
        pu = (u[:, None] + offsets[:, :, s, 0]).ravel()
        pv = (v[:, None] + offsets[:, :, s, 1]).ravel()
        samp = bilinear_sample(fmap, pu, pv).reshape(N, Hh, C)
        g_att[:, :, s] = (samp * grad_G).sum(axis=2)
        g_samp = (att[:, :, s, None] * grad_G).reshape(N * Hh, C)
        gm, gu, gv = bilinear_backward(fmap, pu, pv, g_samp)
        g_map += gm
        g_off[:, :, s, 0] = gu.reshape(N, Hh)
        g_off[:, :, s, 1] = gv.reshape(N, Hh)
    return g_map, g_off, g_att


def linear_rows(X, Wt, b):
    # einsum keeps each row's reduction order independent of the batch size
    return np.einsum("ni,ij->nj", X, Wt) + b


def raycast(occ, origin, voxel_size, ray_o, dirs):
    """First occupied voxel along each ray (Amanatides-Woo traversal).

    Returns ``(flat_index or -1, t_entry)`` per ray; ``t`` is in units of the
    direction vectors.
    """
    dims = np.array(occ.shape)
    n = dirs.shape[0]
    hit = np.full(n, -1, dtype=np.int64)
    t_hit = np.full(n, np.inf)
    lo = np.asarray(origin, dtype=np.float64)
    hi = lo + dims * voxel_size
    occ_flat = occ.ravel()
    for r in range(n):
        d = dirs[r]
        t0, t1 = 0.0, np.inf
        for a in range(3):
            if abs(d[a]) < 1e-15:
                if ray_o[a] < lo[a] or ray_o[a] >= hi[a]:
                    t0, t1 = 1.0, 0.0
                continue
            ta = (lo[a] - ray_o[a]) / d[a]
            tb = (hi[a] - ray_o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
        if t0 > t1:
            continue
        p = ray_o + t0 * d
        idx = np.floor((p - lo) / voxel_size).astype(np.int64)
        idx = np.minimum(np.maximum(idx, 0), dims - 1)
        step = np.zeros(3, dtype=np.int64)
        t_max = np.full(3, np.inf)
        t_delta = np.full(3, np.inf)
        for a in range(3):
            if d[a] > 1e-15:
                step[a] = 1
                t_max[a] = (lo[a] + (idx[a] + 1) * voxel_size - ray_o[a]) / d[a]
                t_delta[a] = voxel_size / d[a]
            elif d[a] < -1e-15:
                step[a] = -1
                t_max[a] = (lo[a] + idx[a] * voxel_size - ray_o[a]) / d[a]
                t_delta[a] = -voxel_size / d[a]
        t = t0
        while True:
            flat = (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]
            if occ_flat[flat]:
                hit[r] = flat
                t_hit[r] = t
                break
            a = int(np.argmin(t_max))
            t = t_max[a]
            if t > t1:
                break
            idx[a] += step[a]
            if idx[a] < 0 or idx[a] >= dims[a]:
                break
            t_max[a] += t_delta[a]
    return hit, t_hit
