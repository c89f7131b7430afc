"""One-step generator: flow-aligned window -> pixel unshuffle -> UNet trunk -> sub-pixel head.

The pruned configuration has no cross-attention, no timestep embedding and a
single bottleneck residual block. The reference configuration switches those
back on so the parameter saving can be measured on identical widths.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractError, DimensionError
from .flow import backward_warp


@dataclass
class ModelConfig:
    context_radius: int = 2
    upscale_factor: int = 4
    unshuffle_factor: int = 2
    in_channels: int = 3
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 4)
    num_res_blocks_per_level: int = 1
    bottleneck_blocks: int = 1
    use_cross_attention: bool = False
    use_timestep_embedding: bool = False
    num_groups: int = 8
    context_dim: int = 64
    num_heads: int = 4

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)

    def validate(self):
        if self.context_radius < 0:
            raise ConfigError("context_radius must be >= 0")
        if self.upscale_factor < 1 or self.unshuffle_factor < 1:
            raise ConfigError("upscale_factor and unshuffle_factor must be >= 1")
        if self.in_channels not in (1, 3):
            raise ConfigError("in_channels must be 1 or 3")
        if self.base_channels < 1 or not self.channel_multipliers or min(self.channel_multipliers) < 1:
            raise ConfigError("channel widths must be positive")
        if self.bottleneck_blocks < 1 or self.num_res_blocks_per_level < 1:
            raise ConfigError("need at least one residual block per level and in the bottleneck")
        return self

    @property
    def window(self):
        return 2 * self.context_radius + 1

    @property
    def input_channels(self):
        return self.window * self.in_channels * self.unshuffle_factor**2

    @property
    def spatial_multiple(self):
        """LR sizes must be divisible by this for the trunk to round-trip."""
        return self.unshuffle_factor * 2 ** (len(self.channel_multipliers) - 1)

    def to_dict(self):
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def pruned_preset(**overrides) -> ModelConfig:
    cfg = ModelConfig(**overrides)
    if cfg.use_cross_attention or cfg.use_timestep_embedding or cfg.bottleneck_blocks != 1:
        raise ConfigError("the pruned preset has no attention, no timestep embedding and one bottleneck block")
    return cfg.validate()


def reference_preset(**overrides) -> ModelConfig:
    base = dict(use_cross_attention=True, use_timestep_embedding=True, bottleneck_blocks=4)
    base.update(overrides)
    return ModelConfig(**base).validate()


# ---------------------------------------------------------------------------
# Pixel (un)shuffle
# ---------------------------------------------------------------------------


def pixel_unshuffle(x, u: int):
    """Space-to-depth. Numpy ``H x W x C`` -> ``H/u x W/u x C*u*u``; tensors are NCHW.

    Output channel ``c*u*u + i*u + j`` holds input channel ``c`` at offset (i, j)
    inside each ``u x u`` block.
    """
    if isinstance(x, torch.Tensor):
        if x.shape[-1] % u or x.shape[-2] % u:
            raise DimensionError(f"spatial size {tuple(x.shape[-2:])} not divisible by {u}")
        return F.pixel_unshuffle(x, u)
    h, w, c = x.shape
    if h % u or w % u:
        raise DimensionError(f"frame size {h}x{w} not divisible by {u}")
    return x.reshape(h // u, u, w // u, u, c).transpose(0, 2, 4, 1, 3).reshape(h // u, w // u, c * u * u)


def pixel_shuffle(x, u: int):
    """Exact inverse of :func:`pixel_unshuffle`."""
    if isinstance(x, torch.Tensor):
        if x.shape[-3] % (u * u):
            raise DimensionError(f"channel count {x.shape[-3]} not divisible by {u * u}")
        return F.pixel_shuffle(x, u)
    h, w, cu = x.shape
    if cu % (u * u):
        raise DimensionError(f"channel count {cu} not divisible by {u * u}")
    c = cu // (u * u)
    return x.reshape(h, w, c, u, u).transpose(0, 3, 1, 4, 2).reshape(h * u, w * u, c)


def build_input(window, flows, cfg: ModelConfig) -> torch.Tensor:
    """Align a ``2k+1`` LR window on its centre frame and unshuffle it.

    ``window`` holds NCHW tensors in temporal order. ``flows`` holds the ``2k``
    flows for the non-centre frames in the same order, each on the centre grid
    and sampling its neighbour.
    """
    k = cfg.context_radius
    if len(window) != 2 * k + 1:
        raise ContractError(f"window must hold {2 * k + 1} frames, got {len(window)}")
    if len(flows) != 2 * k:
        raise ContractError(f"need {2 * k} flows for the neighbours, got {len(flows)}")
    aligned = []
    neighbours = iter(flows)
    for i, frame in enumerate(window):
        aligned.append(frame if i == k else backward_warp(frame, next(neighbours)))
    return pixel_unshuffle(torch.cat(aligned, dim=1), cfg.unshuffle_factor)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


def _groups(ch, wanted):
    g = min(wanted, ch)
    while ch % g:
        g -= 1
    return g


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, groups, temb_dim=None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch, groups), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_emb_proj = nn.Linear(temb_dim, out_ch) if temb_dim else None
        self.norm2 = nn.GroupNorm(_groups(out_ch, groups), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.time_emb_proj is not None:
            h = h + self.time_emb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttnBlock(nn.Module):
    """Self-attention, cross-attention on an external context, and a GEGLU feed-forward."""

    def __init__(self, ch, context_dim, heads, groups):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch, groups), ch)
        self.proj_in = nn.Conv2d(ch, ch, 1)
        self.attn_self = nn.MultiheadAttention(ch, _groups(ch, heads), batch_first=True)
        self.attn_cross = nn.MultiheadAttention(ch, _groups(ch, heads), kdim=context_dim, vdim=context_dim, batch_first=True)
        self.ln1 = nn.LayerNorm(ch)
        self.ln2 = nn.LayerNorm(ch)
        self.ln3 = nn.LayerNorm(ch)
        self.ff_in = nn.Linear(ch, 8 * ch)
        self.ff_out = nn.Linear(4 * ch, ch)
        self.proj_out = nn.Conv2d(ch, ch, 1)

    def forward(self, x, context):
        n, c, h, w = x.shape
        t = self.proj_in(self.norm(x)).flatten(2).transpose(1, 2)
        q = self.ln1(t)
        t = t + self.attn_self(q, q, q, need_weights=False)[0]
        t = t + self.attn_cross(self.ln2(t), context, context, need_weights=False)[0]
        a, g = self.ff_in(self.ln3(t)).chunk(2, dim=-1)
        t = t + self.ff_out(a * F.gelu(g))
        return x + self.proj_out(t.transpose(1, 2).reshape(n, c, h, w))


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        g = cfg.num_groups
        base = cfg.base_channels
        widths = [base * m for m in cfg.channel_multipliers]
        temb_dim = 4 * base if cfg.use_timestep_embedding else None
        if temb_dim:
            self.time_embed = nn.Sequential(nn.Linear(base, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))

        def attn(ch):
            return CrossAttnBlock(ch, cfg.context_dim, cfg.num_heads, g) if cfg.use_cross_attention else None

        frame_ch = cfg.in_channels * cfg.unshuffle_factor**2
        self.stem = nn.Conv2d(cfg.input_channels, base, 3, padding=1)
        single = nn.Conv2d(frame_ch, base, 3, padding=1)
        with torch.no_grad():
            self.stem.weight.copy_(expand_input_stem(single.weight, cfg.context_radius))
            self.stem.bias.copy_(single.bias)

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        ch = base
        for i, w in enumerate(widths):
            for _ in range(cfg.num_res_blocks_per_level):
                self.down_blocks.append(ResBlock(ch, w, g, temb_dim))
                self.down_attn.append(attn(w) or nn.Identity())
                ch = w
            if i < len(widths) - 1:
                self.downsamplers.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid_blocks = nn.ModuleList([ResBlock(ch, ch, g, temb_dim) for _ in range(cfg.bottleneck_blocks)])
        self.mid_attn = nn.ModuleList(
            [attn(ch) or nn.Identity() for _ in range(cfg.bottleneck_blocks - 1)]
        )

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for i in reversed(range(len(widths))):
            w = widths[i]
            if i < len(widths) - 1:
                self.upsamplers.append(nn.Conv2d(ch, ch, 3, padding=1))
            for r in range(cfg.num_res_blocks_per_level):
                in_ch = ch + w if r == 0 else w
                self.up_blocks.append(ResBlock(in_ch, w, g, temb_dim))
                self.up_attn.append(attn(w) or nn.Identity())
                ch = w

        out_scale = cfg.upscale_factor * cfg.unshuffle_factor
        self.head_norm = nn.GroupNorm(_groups(ch, g), ch)
        self.head = nn.Conv2d(ch, cfg.in_channels * out_scale**2, 3, padding=1)
        # start from the bicubic-upsampled centre frame
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def param_count(self):
        return sum(p.numel() for p in self.parameters())

    def center_frame(self, x):
        cfg = self.config
        c = cfg.in_channels * cfg.unshuffle_factor**2
        k = cfg.context_radius
        return F.pixel_shuffle(x[:, k * c : (k + 1) * c], cfg.unshuffle_factor)

    def _run(self, block, h, temb=None, context=None):
        if isinstance(block, CrossAttnBlock):
            return block(h, context)
        if isinstance(block, ResBlock):
            return block(h, temb)
        return block(h)

    def forward(self, x, timestep=None, context=None):
        cfg = self.config
        n = x.shape[0]
        temb = None
        if cfg.use_timestep_embedding:
            if timestep is None:
                timestep = torch.zeros(n, dtype=x.dtype, device=x.device)
            temb = self.time_embed(timestep_embedding(timestep, cfg.base_channels))
        if cfg.use_cross_attention and context is None:
            context = torch.zeros(n, 1, cfg.context_dim, dtype=x.dtype, device=x.device)

        h = self.stem(x)
        skips = []
        nres = cfg.num_res_blocks_per_level
        levels = len(cfg.channel_multipliers)
        for i in range(levels):
            for r in range(nres):
                j = i * nres + r
                h = self._run(self.down_blocks[j], h, temb)
                h = self._run(self.down_attn[j], h, context=context)
            skips.append(h)
            if i < levels - 1:
                h = self.downsamplers[i](h)
        for j, block in enumerate(self.mid_blocks):
            h = block(h, temb)
            if j < len(self.mid_attn):
                h = self._run(self.mid_attn[j], h, context=context)
        for step, i in enumerate(reversed(range(levels))):
            if i < levels - 1:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamplers[step - 1](h)
            for r in range(nres):
                j = step * nres + r
                if r == 0:
                    h = torch.cat([h, skips[i]], dim=1)
                h = self._run(self.up_blocks[j], h, temb)
                h = self._run(self.up_attn[j], h, context=context)

        out = F.pixel_shuffle(self.head(F.silu(self.head_norm(h))), cfg.upscale_factor * cfg.unshuffle_factor)
        base = F.interpolate(self.center_frame(x), scale_factor=cfg.upscale_factor, mode="bicubic", align_corners=False)
        return (out + base).clamp(0.0, 1.0)


def expand_input_stem(weight: torch.Tensor, context_radius: int) -> torch.Tensor:
    """Replicate single-frame stem weights across the window, scaled by 1/(2k+1)."""
    copies = 2 * context_radius + 1
    return weight.repeat(1, copies, 1, 1) / copies


def generator_forward(model: Generator, x: torch.Tensor) -> torch.Tensor:
    if x.shape[1] != model.config.input_channels:
        raise ConfigError(f"input has {x.shape[1]} channels, model expects {model.config.input_channels}")
    m = model.config.spatial_multiple // model.config.unshuffle_factor
    if x.shape[-1] % m or x.shape[-2] % m:
        raise DimensionError(f"input size {tuple(x.shape[-2:])} must be divisible by {m}")
    return model(x)


def param_count(cfg: ModelConfig) -> int:
    return Generator(cfg).param_count


def reduction_ratio(pruned: ModelConfig, reference: ModelConfig) -> float:
    return 1.0 - param_count(pruned) / param_count(reference)


def save_generator(model: Generator, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), d / "generator.pt")
    (d / "config.json").write_text(json.dumps(model.config.to_dict(), indent=2, sort_keys=True))


def load_generator(directory) -> Generator:
    d = Path(directory)
    cfg = ModelConfig.from_dict(json.loads((d / "config.json").read_text()))
    model = Generator(cfg)
    model.load_state_dict(torch.load(d / "generator.pt", weights_only=True))
    return model
