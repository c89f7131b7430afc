"""Non-adversarial objectives: Charbonnier, flow-guided temporal terms, region-aware TV."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from .errors import ConfigError, ContractError, DimensionError
from .flow import backward_warp, compose_flows, motion_weight, occlusion_mask


@dataclass
class LossConfig:
    eps: float = 1e-3
    sigma_m: float = 8.0
    gamma: float = 0.8
    window_D: int = 2
    tau: float = 0.05
    occlusion_alpha: float = 0.01
    occlusion_beta: float = 0.5
    lambda_rec: float = 1.0
    lambda_temp: float = 0.5
    lambda_tv: float = 0.05
    lambda_adv_latent: float = 0.1
    lambda_adv_pixel: float = 0.05

    def validate(self):
        if not self.eps > 0:
            raise ConfigError("eps must be > 0")
        if not self.sigma_m > 0:
            raise ConfigError("sigma_m must be > 0")
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.window_D < 1:
            raise ConfigError("window_D must be >= 1")
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        for name in ("lambda_rec", "lambda_temp", "lambda_tv", "lambda_adv_latent", "lambda_adv_pixel"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        return self

    def weights(self):
        return {
            "rec": self.lambda_rec,
            "temp": self.lambda_temp,
            "tv": self.lambda_tv,
            "adv_latent": self.lambda_adv_latent,
            "adv_pixel": self.lambda_adv_pixel,
        }

    def to_dict(self):
        return asdict(self)


@dataclass
class LossReport:
    terms: dict
    weights: dict
    total: float
    extra: dict

    @classmethod
    def build(cls, terms, weights, extra=None):
        terms = {k: float(v) for k, v in terms.items()}
        total = 0.0
        for k, v in terms.items():
            total += weights.get(k, 0.0) * v
        return cls(terms, dict(weights), total, {k: float(v) for k, v in (extra or {}).items()})

    def is_finite(self):
        return all(math.isfinite(v) for v in self.terms.values()) and math.isfinite(self.total)

    def flat(self):
        out = {f"loss_{k}": v for k, v in self.terms.items()}
        out.update({f"loss_{k}": v for k, v in self.extra.items()})
        out["loss_total"] = self.total
        return out


def _same_shape(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def charbonnier(x: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    return torch.sqrt(x * x + eps * eps).mean()


def reconstruction_loss(sr, gt, eps=1e-3):
    _same_shape(sr, gt)
    return charbonnier(sr - gt, eps)


def temporal_loss(sr_t, sr_t1, flow_t1_to_t, weights, eps=1e-3):
    """Weighted Charbonnier between ``sr_t`` and ``sr_t1`` warped onto ``sr_t``'s grid.

    ``flow_t1_to_t`` lives on frame t and samples frame t+1; ``weights`` is an
    ``N x 1 x H x W`` map (see :func:`temporal_weights`).
    """
    _same_shape(sr_t, sr_t1)
    if flow_t1_to_t.shape[-2:] != sr_t.shape[-2:] or weights.shape[-2:] != sr_t.shape[-2:]:
        raise DimensionError("flow/weights do not match frames")
    residual = sr_t - backward_warp(sr_t1, flow_t1_to_t)
    return (weights * torch.sqrt(residual * residual + eps * eps)).mean()


def temporal_weights(flow, reverse_flow=None, sigma_m=8.0, alpha=0.01, beta=0.5):
    """Motion decay times forward-backward visibility (all visible without ``reverse_flow``)."""
    vis = None if reverse_flow is None else occlusion_mask(reverse_flow, flow, alpha, beta)
    return motion_weight(flow, sigma_m, vis)


def chain_flows(flows):
    out = flows[0]
    for f in flows[1:]:
        out = compose_flows(out, f)
    return out


def multi_frame_temporal_loss(
    sr_frames,
    flows_next,
    gamma=0.8,
    D=2,
    eps=1e-3,
    sigma_m=8.0,
    flows_prev=None,
    alpha=0.01,
    beta=0.5,
    weights=None,
):
    """Decayed sum of temporal terms between the last frame and the D frames before it.

    ``sr_frames[-1]`` is the current frame t. ``flows_next[i]`` lives on
    ``sr_frames[i]`` and samples ``sr_frames[i+1]``; ``flows_prev[i]`` is its
    reverse, used only for the occlusion check. Longer-range flows are chained.
    ``weights`` overrides the per-distance weight maps (index d-1).
    """
    if not 0 < gamma < 1:
        raise ConfigError("gamma must lie in (0, 1)")
    if D < 1 or len(sr_frames) < D + 1:
        raise ContractError(f"need at least D+1={D + 1} frames, got {len(sr_frames)}")
    if len(flows_next) != len(sr_frames) - 1:
        raise ContractError("flows_next must have one flow per adjacent frame pair")
    t = len(sr_frames) - 1
    total = 0.0
    for d in range(1, D + 1):
        fwd = chain_flows(flows_next[t - d : t])
        if weights is not None:
            w = weights[d - 1]
        else:
            rev = None
            if flows_prev is not None:
                rev = chain_flows(flows_prev[t - d : t][::-1])
            w = temporal_weights(fwd, rev, sigma_m, alpha, beta)
        total = total + gamma ** (d - 1) * temporal_loss(sr_frames[t - d], sr_frames[t], fwd, w, eps)
    return total


def _forward_diff(x):
    dx = torch.zeros_like(x)
    dy = torch.zeros_like(x)
    dx[..., :, :-1] = x[..., :, 1:] - x[..., :, :-1]
    dy[..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]
    return dx, dy


def region_aware_weights(gt, tau):
    gx, gy = _forward_diff(gt)
    mag = torch.sqrt(gx * gx + gy * gy).mean(dim=1, keepdim=True)
    return torch.exp(-mag / tau)


def region_aware_tv(sr, gt, tau=0.05):
    """TV of ``sr`` weighted by ``exp(-|grad gt| / tau)``; mean over all elements.

    Forward differences with a replicated last row/column (zero difference there).
    """
    if not tau > 0:
        raise ConfigError("tau must be > 0")
    _same_shape(sr, gt)
    w = region_aware_weights(gt.detach(), tau)
    dx, dy = _forward_diff(sr)
    return (w * (dx.abs() + dy.abs())).mean()


def total_variation(x):
    dx, dy = _forward_diff(x)
    return (dx.abs() + dy.abs()).mean()
