"""Backward warping, flow composition, occlusion checks, and flow estimation.

Every flow here follows one convention: a flow field lives on the grid of the
*target* image and ``warped(p) = source(p + flow(p))``. Tensors are
``N x C x H x W`` (flows ``N x 2 x H x W``, channel 0 = horizontal);
the public helpers also accept single numpy frames ``H x W x C`` / ``H x W x 2``
and return numpy in that case.
"""

from __future__ import annotations

import cv2
import numpy as np
import torch
from scipy import ndimage

from .errors import ConfigError, DimensionError

CATMULL_ROM_A = -0.5


def cubic_kernel(x, a=CATMULL_ROM_A):
    ax = x.abs()
    ax2 = ax * ax
    ax3 = ax2 * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return torch.where(ax <= 1, near, torch.where(ax < 2, far, torch.zeros_like(ax)))


def _to_tensor(x, is_flow=False):
    if isinstance(x, torch.Tensor):
        return x, False
    arr = np.asarray(x)
    if arr.ndim == 2:
        arr = arr[..., None]
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]
    return t.to(torch.float64 if arr.dtype == np.float64 else torch.float32), True


def _to_numpy(t, dtype):
    return t[0].permute(1, 2, 0).detach().cpu().numpy().astype(dtype, copy=False)


def _warp_tensor(img, flow, clamp):
    n, c, h, w = img.shape
    if flow.shape[0] != n or flow.shape[1] != 2 or flow.shape[2:] != img.shape[2:]:
        raise DimensionError(f"flow {tuple(flow.shape)} does not match frame {tuple(img.shape)}")
    flow = flow.to(img.dtype)
    xs = torch.arange(w, dtype=img.dtype, device=img.device).view(1, 1, w) + flow[:, 0]
    ys = torch.arange(h, dtype=img.dtype, device=img.device).view(1, h, 1) + flow[:, 1]
    x0 = torch.floor(xs)
    y0 = torch.floor(ys)
    tx = xs - x0
    ty = ys - y0
    x0 = x0.long()
    y0 = y0.long()
    flat = img.reshape(n, c, h * w)
    out = torch.zeros_like(img)
    for m in range(4):
        wy = cubic_kernel(ty - (m - 1))
        iy = (y0 + (m - 1)).clamp(0, h - 1)
        for k in range(4):
            wx = cubic_kernel(tx - (k - 1))
            ix = (x0 + (k - 1)).clamp(0, w - 1)
            idx = (iy * w + ix).view(n, 1, h * w).expand(n, c, h * w)
            sample = flat.gather(2, idx).view(n, c, h, w)
            out = out + (wy * wx).unsqueeze(1) * sample
    if clamp:
        out = out.clamp(0.0, 1.0)
    return out


def backward_warp(frame, flow, clamp=True):
    """Sample ``frame`` at ``p + flow(p)`` with Catmull-Rom bicubic weights.

    Out-of-range taps replicate the border. ``clamp`` keeps the result in
    [0, 1]; turn it off when warping flow fields or other unbounded data.
    """
    img, was_np = _to_tensor(frame)
    fl, _ = _to_tensor(flow)
    out = _warp_tensor(img, fl.to(img.dtype), clamp)
    return _to_numpy(out, np.asarray(frame).dtype) if was_np else out


def compose_flows(flow_ab, flow_bc):
    """Chain two flows: on grid a sampling b, then on grid b sampling c."""
    return flow_ab + backward_warp(flow_bc, flow_ab, clamp=False)


def occlusion_mask(flow_fwd, flow_bwd, alpha=0.01, beta=0.5):
    """Forward-backward consistency check on the grid of ``flow_bwd``.

    ``flow_bwd`` is the flow that will be used for warping (on the target grid,
    sampling the source); ``flow_fwd`` is its reverse (on the source grid,
    sampling the target). A pixel is visible iff its source ``p + b`` lies
    inside the frame and ``|b + W(f, b)|^2 <= alpha * (|b|^2 + |W(f, b)|^2) + beta``.
    """
    b, was_np = _to_tensor(flow_bwd)
    f, _ = _to_tensor(flow_fwd)
    if f.shape != b.shape:
        raise DimensionError(f"flow shapes differ: {tuple(f.shape)} vs {tuple(b.shape)}")
    f = f.to(b.dtype)
    fw = _warp_tensor(f, b, clamp=False)
    lhs = ((b + fw) ** 2).sum(1, keepdim=True)
    rhs = alpha * ((b**2).sum(1, keepdim=True) + (fw**2).sum(1, keepdim=True)) + beta
    h, w = b.shape[-2:]
    ys, xs = torch.meshgrid(torch.arange(h, dtype=b.dtype), torch.arange(w, dtype=b.dtype), indexing="ij")
    sx, sy = xs + b[:, 0:1], ys + b[:, 1:2]
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    mask = ((lhs <= rhs) & inside).to(b.dtype)
    if was_np:
        return mask[0, 0].cpu().numpy().astype(np.uint8)
    return mask


def motion_weight(flow, sigma_m, visibility=None):
    """``exp(-|flow| / sigma_m) * visibility``, one weight per pixel."""
    if not sigma_m > 0:
        raise ConfigError(f"sigma_m must be positive, got {sigma_m}")
    fl, was_np = _to_tensor(flow)
    w = torch.exp(-torch.linalg.vector_norm(fl, dim=1, keepdim=True) / sigma_m)
    if visibility is not None:
        vis, _ = _to_tensor(visibility)
        if vis.shape[-2:] != w.shape[-2:]:
            raise DimensionError("visibility does not match flow")
        w = w * vis.to(w.dtype)
    if was_np:
        return w[0, 0].cpu().numpy()
    return w


# ---------------------------------------------------------------------------
# Coarse-to-fine Lucas-Kanade
# ---------------------------------------------------------------------------


def _gray(img):
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=-1) if img.ndim == 3 else img


def _pyramid(img, levels):
    pyr = [img]
    for _ in range(levels - 1):
        prev = ndimage.gaussian_filter(pyr[-1], 1.0, mode="nearest")
        h, w = prev.shape
        if min(h, w) < 8:
            break
        pyr.append(cv2.resize(prev, (w // 2, h // 2), interpolation=cv2.INTER_AREA))
    return pyr


def _lk_refine(src, dst, flow, iters, window, min_eig):
    h, w = dst.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    gdy, gdx = np.gradient(dst)
    for _ in range(iters):
        qy, qx = yy + flow[..., 1], xx + flow[..., 0]
        warped = ndimage.map_coordinates(src, [qy, qx], order=3, mode="nearest")
        # samples taken from the replicated border carry no motion evidence
        valid = ((qx >= 0) & (qx <= w - 1) & (qy >= 0) & (qy <= h - 1)).astype(np.float64)
        gy, gx = np.gradient(warped)
        ix = 0.5 * (gx + gdx)
        iy = 0.5 * (gy + gdy)
        it = warped - dst
        sxx = ndimage.gaussian_filter(valid * ix * ix, window)
        sxy = ndimage.gaussian_filter(valid * ix * iy, window)
        syy = ndimage.gaussian_filter(valid * iy * iy, window)
        sxt = ndimage.gaussian_filter(valid * ix * it, window)
        syt = ndimage.gaussian_filter(valid * iy * it, window)
        det = sxx * syy - sxy * sxy
        tr = sxx + syy
        lam_min = 0.5 * (tr - np.sqrt(np.maximum(tr * tr - 4 * det, 0.0)))
        ok = lam_min > min_eig
        safe = np.where(ok, det, 1.0)
        du = np.where(ok, (-syy * sxt + sxy * syt) / safe, 0.0)
        dv = np.where(ok, (sxy * sxt - sxx * syt) / safe, 0.0)
        flow[..., 0] += np.clip(du, -1.0, 1.0)
        flow[..., 1] += np.clip(dv, -1.0, 1.0)
    return flow


def estimate_flow(src, dst, levels=3, iters=5, window=2.0, min_eig=1e-7):
    """Backward flow on ``dst``'s grid such that ``dst(p) ~ src(p + flow(p))``.

    Pyramidal Lucas-Kanade on the channel mean. Pixels whose structure tensor
    is degenerate receive no update, so constant images give exactly zero flow.
    """
    if levels < 1:
        raise ConfigError(f"levels must be >= 1, got {levels}")
    a, b = _gray(src), _gray(dst)
    if a.shape != b.shape:
        raise DimensionError(f"frame shapes differ: {a.shape} vs {b.shape}")
    pa, pb = _pyramid(a, levels), _pyramid(b, levels)
    flow = np.zeros(pb[-1].shape + (2,))
    for lvl in range(len(pb) - 1, -1, -1):
        h, w = pb[lvl].shape
        if flow.shape[:2] != (h, w):
            sy, sx = h / flow.shape[0], w / flow.shape[1]
            flow = cv2.resize(flow, (w, h), interpolation=cv2.INTER_LINEAR)
            flow[..., 0] *= sx
            flow[..., 1] *= sy
        flow = _lk_refine(pa[lvl], pb[lvl], flow, iters, window, min_eig)
        flow[..., 0] = ndimage.median_filter(flow[..., 0], size=3, mode="nearest")
        flow[..., 1] = ndimage.median_filter(flow[..., 1], size=3, mode="nearest")
    return flow.astype(np.float32)
