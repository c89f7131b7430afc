"""Fidelity and temporal-consistency metrics, temporal profiles, and per-clip reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import VideoClip, write_png8
from .errors import ContractError, DimensionError
from .flow import backward_warp, estimate_flow

INF_SENTINEL = "+inf"


def _frames(clip):
    return clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)


def quantize8(x):
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def _pair_abs_diff(a, b):
    return float(np.mean(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


def e_warp_pairs(clip, flows):
    """Per-pair mean |W(frame_t, flow_t) - frame_{t+1}|; ``flows[t]`` lives on frame t+1."""
    frames = _frames(clip)
    if len(flows) != len(frames) - 1:
        raise ContractError(f"need {len(frames) - 1} flows for {len(frames)} frames, got {len(flows)}")
    return [_pair_abs_diff(backward_warp(frames[t].astype(np.float64), np.asarray(flows[t], np.float64)), frames[t + 1])
            for t in range(len(flows))]


def e_warp(clip, flows) -> float:
    pairs = e_warp_pairs(clip, flows)
    return float(np.mean(pairs)) if pairs else 0.0


def e_tc_pairs(clip):
    frames = _frames(clip)
    if len(frames) < 2:
        raise ContractError("temporal consistency needs at least 2 frames")
    return [_pair_abs_diff(frames[t], frames[t + 1]) for t in range(len(frames) - 1)]


def e_tc(clip) -> float:
    return float(np.mean(e_tc_pairs(clip)))


def estimate_clip_flows(clip):
    """Flows in the ``e_warp`` layout (on frame t+1, sampling frame t) estimated from the clip itself."""
    frames = _frames(clip)
    return [estimate_flow(frames[t], frames[t + 1]) for t in range(len(frames) - 1)]


def _check_shapes(a, b):
    if np.shape(a) != np.shape(b):
        raise DimensionError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def psnr(a, b) -> float:
    """PSNR on the [0, 1] range; identical inputs give ``inf``."""
    _check_shapes(a, b)
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, k1=0.01, k2=0.03) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5) averaged over channels."""
    _check_shapes(a, b)
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = _gaussian_window()
    c1, c2 = k1**2, k2**2
    vals = []
    for c in range(a.shape[-1]):
        x, y = a[..., c], b[..., c]

        def filt(z):
            return ndimage.convolve(z, win, mode="reflect")

        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


def temporal_profile(clip, y: int) -> np.ndarray:
    """Stack scanline ``y`` of every frame: row r is frame r's row y."""
    frames = _frames(clip)
    if not 0 <= y < frames.shape[1]:
        raise ContractError(f"scanline {y} outside [0, {frames.shape[1]})")
    return frames[:, y].copy()


def _enc(v):
    return INF_SENTINEL if v == math.inf else v


def _dec(v):
    return math.inf if v == INF_SENTINEL else v


@dataclass
class MetricReport:
    clip_id: str
    psnr: float
    ssim: float
    e_warp: float
    e_tc: float
    psnr_per_frame: list = field(default_factory=list)
    ssim_per_frame: list = field(default_factory=list)
    e_warp_per_pair: list = field(default_factory=list)
    e_tc_per_pair: list = field(default_factory=list)
    e_warp_gt: float | None = None
    e_warp_gt_per_pair: list | None = None
    flow_source: str = "estimated"

    def __post_init__(self):
        if self.e_warp < 0 or self.e_tc < 0:
            raise ContractError("warping and consistency errors must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["psnr"] = _enc(self.psnr)
        d["psnr_per_frame"] = [_enc(v) for v in self.psnr_per_frame]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["psnr"] = _dec(d["psnr"])
        d["psnr_per_frame"] = [_dec(v) for v in d.get("psnr_per_frame", [])]
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def evaluate_clip(sr_clip, gt_clip, flows=None, gt_flows=None, quantize=False, clip_id=None) -> MetricReport:
    """Score ``sr_clip`` against ``gt_clip``.

    ``flows`` drive ``e_warp`` (estimated from the SR clip when omitted);
    ``gt_flows``, when given, additionally yield ``e_warp_gt``.
    """
    sr = np.asarray(_frames(sr_clip), np.float64)
    gt = np.asarray(_frames(gt_clip), np.float64)
    if sr.shape != gt.shape:
        raise ContractError(f"SR clip {sr.shape} does not match ground truth {gt.shape}")
    if quantize:
        sr, gt = quantize8(sr), quantize8(gt)
    source = "given"
    if flows is None:
        flows = estimate_clip_flows(sr)
        source = "estimated"
    p = [psnr(s, g) for s, g in zip(sr, gt)]
    s = [ssim(a, b) for a, b in zip(sr, gt)]
    ew = e_warp_pairs(sr, flows)
    et = e_tc_pairs(sr)
    ewg = e_warp_pairs(sr, gt_flows) if gt_flows is not None else None
    cid = clip_id or getattr(sr_clip, "id", None) or getattr(gt_clip, "id", "clip")
    return MetricReport(
        clip_id=str(cid),
        psnr=float(np.mean(p)),
        ssim=float(np.mean(s)),
        e_warp=float(np.mean(ew)),
        e_tc=float(np.mean(et)),
        psnr_per_frame=p,
        ssim_per_frame=s,
        e_warp_per_pair=ew,
        e_tc_per_pair=et,
        e_warp_gt=float(np.mean(ewg)) if ewg is not None else None,
        e_warp_gt_per_pair=ewg,
        flow_source=source,
    )


SUMMARY_FIELDS = ["clip_id", "psnr", "ssim", "e_warp", "e_tc", "e_warp_gt", "flow_source"]


def write_report(report: MetricReport, path):
    Path(path).write_text(report.to_json())


def mean_metrics(reports):
    out = {k: _enc(float(np.mean([getattr(r, k) for r in reports]))) for k in ("psnr", "ssim", "e_warp", "e_tc")}
    gts = [r.e_warp_gt for r in reports if r.e_warp_gt is not None]
    out["e_warp_gt"] = float(np.mean(gts)) if gts else None
    return out


def write_summary(reports, path):
    """One CSV row per clip."""
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        for r in reports:
            d = r.to_dict()
            w.writerow({k: d[k] for k in SUMMARY_FIELDS})


def save_profile(clip, y, path):
    prof = temporal_profile(clip, y)
    write_png8(path, prof)
    return prof
