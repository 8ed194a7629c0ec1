"""Pure-numpy bilinear gather/scatter, same contract as the compiled kernels."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def _corners(shape, pts):
    G, H, W, _ = shape
    P = pts.shape[1]
    f = pts - 0.5
    base = np.floor(f)
    frac = f - base
    x0 = base[..., 0].astype(np.int64)
    y0 = base[..., 1].astype(np.int64)
    lx = frac[..., 0]
    ly = frac[..., 1]
    xs = np.stack([x0, x0 + 1, x0, x0 + 1], axis=-1)
    ys = np.stack([y0, y0, y0 + 1, y0 + 1], axis=-1)
    ws = np.stack([(1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx], axis=-1)
    valid = (xs >= 0) & (xs < W) & (ys >= 0) & (ys < H)
    g = np.arange(G).reshape(G, 1, 1)
    flat = np.where(valid, (g * H + ys) * W + xs, 0)
    ws = np.where(valid, ws, 0.0)
    return flat.reshape(G, P, 4), ws, valid, lx, ly


def gather(value: np.ndarray, pts: np.ndarray) -> np.ndarray:
    G, H, W, C = value.shape
    flat, ws, _, _, _ = _corners(value.shape, pts)
    rows = value.reshape(G * H * W, C)[flat]  # (G, P, 4, C)
    return np.einsum("gpk,gpkc->gpc", ws, rows)


def scatter(value: np.ndarray, pts: np.ndarray, gout: np.ndarray, want_pts: bool):
    G, H, W, C = value.shape
    P = pts.shape[1]
    flat, ws, valid, lx, ly = _corners(value.shape, pts)
    cols = np.broadcast_to(np.arange(G * P).reshape(G, P, 1), flat.shape)
    mat = sp.csr_matrix(
        (ws.ravel(), (flat.ravel(), cols.ravel())), shape=(G * H * W, G * P)
    )
    gval = np.asarray(mat @ gout.reshape(G * P, C)).reshape(G, H, W, C)
    gpts = np.zeros((G, P, 2))
    if want_pts:
        rows = value.reshape(G * H * W, C)[flat] * valid[..., None]
        v00, v01, v10, v11 = (rows[:, :, k, :] for k in range(4))
        lx = lx[..., None]
        ly = ly[..., None]
        dx = (1 - ly) * (v01 - v00) + ly * (v11 - v10)
        dy = (1 - lx) * (v10 - v00) + lx * (v11 - v01)
        gpts[..., 0] = np.sum(dx * gout, axis=-1)
        gpts[..., 1] = np.sum(dy * gout, axis=-1)
    return gval, gpts
