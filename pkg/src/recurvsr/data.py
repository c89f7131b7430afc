"""Synthetic video scenes, LR degradation, and clip/flow persistence.

Frames are float32 ``H x W x C`` arrays in [0, 1]; a clip stacks them into a
``T x H x W x C`` array. Flow fields are ``H x W x 2`` arrays of (u, v) pixel
displacements with the backward convention used throughout the package:
``warped(p) = source(p + flow(p))``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from .errors import ClipIOError, ConfigError, DimensionError

PATTERNS = ("checker", "sinusoid-texture", "textured-sprites")
FLO_MAGIC = 202021.25


@dataclass
class VideoClip:
    frames: np.ndarray  # T x H x W x C, float32 in [0, 1]
    fps: float = 30.0
    id: str = "clip"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim == 3:
            frames = frames[..., None]
        if frames.ndim != 4 or frames.shape[0] < 1:
            raise DimensionError(f"clip frames must be T x H x W x C with T >= 1, got {frames.shape}")
        if frames.shape[-1] not in (1, 3):
            raise DimensionError(f"channels must be 1 or 3, got {frames.shape[-1]}")
        if not self.fps > 0:
            raise ConfigError(f"fps must be positive, got {self.fps}")
        self.frames = frames.astype(np.float32, copy=False)

    def __len__(self):
        return self.frames.shape[0]

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]

    @property
    def channels(self):
        return self.frames.shape[3]


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


@dataclass
class Sprite:
    """Axis-aligned textured rectangle; top-left at (x, y) in frame 0."""

    x: float
    y: float
    w: float
    h: float
    vx: float = 0.0
    vy: float = 0.0


@dataclass
class SceneSpec:
    """Piecewise-rigid scene: a background, sprites, then opaque occluders on top.

    Layers are drawn in that order, so later entries win the z-test.
    """

    pattern: str = "textured-sprites"
    sprites: list = field(default_factory=list)
    occluders: list = field(default_factory=list)
    background_velocity: tuple = (0.0, 0.0)
    num_frames: int = 7
    height: int = 128
    width: int = 128
    channels: int = 3
    fps: float = 30.0
    seed: int = 0
    # > 1 coarsens every texture: larger checker cells, lower sinusoid frequencies
    texture_scale: float = 1.0

    def __post_init__(self):
        self.sprites = [s if isinstance(s, Sprite) else Sprite(**s) for s in self.sprites]
        self.occluders = [s if isinstance(s, Sprite) else Sprite(**s) for s in self.occluders]
        self.background_velocity = tuple(float(v) for v in self.background_velocity)

    def validate(self):
        if self.pattern not in PATTERNS:
            raise ConfigError(f"unknown pattern {self.pattern!r}; expected one of {PATTERNS}")
        if self.num_frames < 1 or self.height < 1 or self.width < 1:
            raise ConfigError(
                f"scene needs positive num_frames/height/width, got "
                f"{self.num_frames}/{self.height}/{self.width}"
            )
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if not (math.isfinite(self.texture_scale) and self.texture_scale > 0):
            raise ConfigError(f"texture_scale must be positive, got {self.texture_scale}")
        for obj in self.sprites + self.occluders:
            vals = (obj.x, obj.y, obj.w, obj.h, obj.vx, obj.vy)
            if not all(math.isfinite(v) for v in vals):
                raise ConfigError(f"non-finite geometry/motion in {obj}")
            if obj.w <= 0 or obj.h <= 0:
                raise ConfigError(f"object size must be positive: {obj}")
        if not all(math.isfinite(v) for v in self.background_velocity):
            raise ConfigError("non-finite background velocity")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _sin_texture(rng, channels, freq_range, n_waves=3, scale=1.0):
    return {
        "kind": "sin",
        "amp": rng.uniform(0.05, 0.38 / n_waves, size=(channels, n_waves)),
        "fx": rng.uniform(*freq_range, size=(channels, n_waves)) * rng.choice([-1, 1], size=(channels, n_waves)) / scale,
        "fy": rng.uniform(*freq_range, size=(channels, n_waves)) * rng.choice([-1, 1], size=(channels, n_waves)) / scale,
        "phase": rng.uniform(0, 2 * np.pi, size=(channels, n_waves)),
        "offset": rng.uniform(0.4, 0.6, size=channels),
    }


def _checker_texture(rng, channels, cell_range, scale=1.0):
    c0 = rng.uniform(0.05, 0.45, size=channels)
    c1 = rng.uniform(0.55, 0.95, size=channels)
    return {"kind": "checker", "cell": float(rng.integers(*cell_range)) * scale, "c0": c0, "c1": c1}


def _eval_texture(tex, x, y):
    """Evaluate a texture at local coordinates; returns (..., C)."""
    if tex["kind"] == "checker":
        parity = (np.floor(x / tex["cell"]) + np.floor(y / tex["cell"])) % 2
        return np.where(parity[..., None] > 0, tex["c1"], tex["c0"])
    arg = 2 * np.pi * (tex["fx"] * x[..., None, None] + tex["fy"] * y[..., None, None]) + tex["phase"]
    return tex["offset"] + (tex["amp"] * np.sin(arg)).sum(-1)


def _scene_textures(spec: SceneSpec):
    rng = np.random.default_rng(spec.seed)
    c, k = spec.channels, spec.texture_scale
    if spec.pattern == "checker":
        bg = _checker_texture(rng, c, (8, 17), k)
    else:
        bg = _sin_texture(rng, c, (0.01, 0.06), scale=k)
    sprites = []
    for i, _ in enumerate(spec.sprites):
        if spec.pattern == "checker" or (spec.pattern == "textured-sprites" and i % 2 == 1):
            sprites.append(_checker_texture(rng, c, (3, 7), k))
        else:
            sprites.append(_sin_texture(rng, c, (0.04, 0.1), scale=k))
    occluders = [_sin_texture(rng, c, (0.02, 0.08), scale=k) for _ in spec.occluders]
    return bg, sprites, occluders


def _layers(spec: SceneSpec):
    """Objects indexed by layer id, background first (z-order)."""
    bg = Sprite(0.0, 0.0, math.inf, math.inf, *spec.background_velocity)
    return [bg] + list(spec.sprites) + list(spec.occluders)


@dataclass
class SceneRender:
    frames: np.ndarray  # T x H x W x C
    layer_ids: np.ndarray  # T x H x W, topmost layer per pixel
    flows_prev: list  # [i]: on frame i+1, samples frame i
    vis_prev: list  # [i]: pixels of frame i+1 visible in frame i
    flows_next: list  # [i]: on frame i, samples frame i+1
    vis_next: list  # [i]: pixels of frame i visible in frame i+1


def _layer_map(objs, t, xx, yy):
    ids = np.zeros(xx.shape, dtype=np.int32)
    for lid, obj in enumerate(objs[1:], start=1):
        x0 = obj.x + obj.vx * t
        y0 = obj.y + obj.vy * t
        inside = (xx >= x0) & (xx < x0 + obj.w) & (yy >= y0) & (yy < y0 + obj.h)
        ids[inside] = lid
    return ids


def _flow_and_visibility(ids_here, ids_there, velocities, sign):
    """Flow on the grid of ``ids_here`` pointing into the other frame, plus visibility."""
    h, w = ids_here.shape
    vel = velocities[ids_here]  # H x W x 2
    flow = sign * vel
    yy, xx = np.mgrid[0:h, 0:w]
    qx = xx + flow[..., 0]
    qy = yy + flow[..., 1]
    inb = (qx >= 0) & (qx <= w - 1) & (qy >= 0) & (qy <= h - 1)
    qxi = np.clip(np.rint(qx), 0, w - 1).astype(int)
    qyi = np.clip(np.rint(qy), 0, h - 1).astype(int)
    vis = inb & (ids_there[qyi, qxi] == ids_here)
    return flow.astype(np.float32), vis.astype(np.uint8)


def render_scene(spec: SceneSpec) -> SceneRender:
    """Rasterize a scene with point sampling at pixel centers.

    Ground-truth flow and visibility come from the same z-ordered layer maps,
    so they are exact for integer velocities.
    """
    spec.validate()
    objs = _layers(spec)
    bg_tex, sprite_tex, occ_tex = _scene_textures(spec)
    textures = [bg_tex] + sprite_tex + occ_tex
    velocities = np.array([[o.vx, o.vy] for o in objs], dtype=np.float64)

    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    frames = np.empty((spec.num_frames, h, w, spec.channels), dtype=np.float32)
    ids = np.empty((spec.num_frames, h, w), dtype=np.int32)
    for t in range(spec.num_frames):
        ids[t] = _layer_map(objs, t, xx, yy)
        img = np.empty((h, w, spec.channels))
        for lid, (obj, tex) in enumerate(zip(objs, textures)):
            sel = ids[t] == lid
            if not sel.any():
                continue
            lx = xx[sel] - (obj.vx * t + (obj.x if lid else 0.0))
            ly = yy[sel] - (obj.vy * t + (obj.y if lid else 0.0))
            img[sel] = _eval_texture(tex, lx, ly)
        frames[t] = np.clip(img, 0.0, 1.0)

    flows_prev, vis_prev, flows_next, vis_next = [], [], [], []
    for t in range(spec.num_frames - 1):
        f, v = _flow_and_visibility(ids[t + 1], ids[t], velocities, -1.0)
        flows_prev.append(f)
        vis_prev.append(v)
        f, v = _flow_and_visibility(ids[t], ids[t + 1], velocities, 1.0)
        flows_next.append(f)
        vis_next.append(v)
    return SceneRender(frames, ids, flows_prev, vis_prev, flows_next, vis_next)


def generate_synthetic_clip(spec: SceneSpec):
    """Render a scene; returns ``(clip, gt_flows, gt_visibility)``.

    ``gt_flows[i]`` lives on frame i+1 and points into frame i, so
    ``backward_warp(frame_i, gt_flows[i])`` reproduces frame i+1 wherever
    ``gt_visibility[i]`` is 1.
    """
    r = render_scene(spec)
    clip = VideoClip(r.frames, fps=spec.fps, id=f"scene_{spec.seed}")
    return clip, r.flows_prev, r.vis_prev


@dataclass
class SceneSampler:
    """Distribution over scenes used by dataset generation."""

    height: int = 128
    width: int = 128
    num_frames: int = 16
    fps: float = 30.0
    patterns: tuple = PATTERNS
    num_sprites: tuple = (1, 3)
    num_occluders: tuple = (0, 1)
    sprite_size: tuple = (24, 56)
    max_speed: float = 8.0
    # Velocities are drawn on this grid so LR motion stays integral.
    velocity_quantum: float = 4.0
    background_speed: float = 0.0
    texture_scale: float = 1.0

    def validate(self):
        if self.height < 1 or self.width < 1 or self.num_frames < 1:
            raise ConfigError("sampler needs positive height/width/num_frames")
        for name in ("num_sprites", "num_occluders", "sprite_size"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"{name} range must satisfy 0 <= lo <= hi")
        if self.velocity_quantum <= 0:
            raise ConfigError("velocity_quantum must be positive")

    def _velocity(self, rng, max_speed):
        steps = int(max_speed // self.velocity_quantum)
        if steps == 0:
            return 0.0, 0.0
        vx, vy = rng.integers(-steps, steps + 1, size=2) * self.velocity_quantum
        return float(vx), float(vy)

    def sample(self, seed: int) -> SceneSpec:
        self.validate()
        rng = np.random.default_rng(seed)
        pattern = str(rng.choice(list(self.patterns)))

        def obj():
            w, h = rng.integers(self.sprite_size[0], self.sprite_size[1] + 1, size=2)
            vx, vy = self._velocity(rng, self.max_speed)
            # centre the trajectory on a random on-screen position
            x = rng.uniform(0, max(self.width - w, 1)) - vx * (self.num_frames - 1) / 2
            y = rng.uniform(0, max(self.height - h, 1)) - vy * (self.num_frames - 1) / 2
            return Sprite(float(np.round(x)), float(np.round(y)), float(w), float(h), vx, vy)

        sprites = [obj() for _ in range(rng.integers(self.num_sprites[0], self.num_sprites[1] + 1))]
        occluders = [obj() for _ in range(rng.integers(self.num_occluders[0], self.num_occluders[1] + 1))]
        bg_v = self._velocity(rng, self.background_speed)
        return SceneSpec(
            pattern=pattern,
            sprites=sprites,
            occluders=occluders,
            background_velocity=bg_v,
            num_frames=self.num_frames,
            height=self.height,
            width=self.width,
            fps=self.fps,
            seed=int(rng.integers(0, 2**31 - 1)),
            texture_scale=self.texture_scale,
        )


# ---------------------------------------------------------------------------
# Degradation
# ---------------------------------------------------------------------------


@dataclass
class DegradationConfig:
    blur_sigma_range: tuple = (0.4, 1.6)
    downscale_factor: int = 4
    noise_sigma_range: tuple = (0.0, 0.05)
    jpeg_quality_range: tuple = (50, 95)
    seed: int = 0

    def validate(self):
        for name in ("blur_sigma_range", "noise_sigma_range", "jpeg_quality_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} must be well-ordered, got {(lo, hi)}")
        if self.blur_sigma_range[0] < 0 or self.noise_sigma_range[0] < 0:
            raise ConfigError("sigma ranges must be non-negative")
        if not 1 <= self.jpeg_quality_range[0] <= self.jpeg_quality_range[1] <= 100:
            raise ConfigError("jpeg quality must lie in [1, 100]")
        if int(self.downscale_factor) != self.downscale_factor or self.downscale_factor < 1:
            raise ConfigError(f"downscale_factor must be a positive integer, got {self.downscale_factor}")


@dataclass
class DegradationParams:
    blur_sigma: float
    noise_sigma: float
    jpeg_quality: int


_JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)
_JPEG_CHROMA = np.full((8, 8), 99.0)
_JPEG_CHROMA[:4, :4] = [[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]]


def _quant_table(base, quality):
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((base * scale + 50.0) / 100.0), 1, 255)


def _dct_quantize_plane(plane, table):
    h, w = plane.shape
    ph, pw = (-h) % 8, (-w) % 8
    p = np.pad(plane, ((0, ph), (0, pw)), mode="edge")
    H, W = p.shape
    blocks = p.reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
    coef = sfft.dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / table) * table
    out = sfft.idctn(coef, axes=(-2, -1), norm="ortho")
    return out.transpose(0, 2, 1, 3).reshape(H, W)[:h, :w]


def jpeg_like(frame: np.ndarray, quality: int) -> np.ndarray:
    """8x8 block DCT quantization with IJG-scaled tables; quality 100 is a no-op."""
    if quality >= 100:
        return frame
    x = frame.astype(np.float64) * 255.0
    if x.shape[-1] == 3:
        r, g, b = x[..., 0], x[..., 1], x[..., 2]
        y = 0.299 * r + 0.587 * g + 0.114 * b
        cb = -0.168736 * r - 0.331264 * g + 0.5 * b
        cr = 0.5 * r - 0.418688 * g - 0.081312 * b
        y = _dct_quantize_plane(y - 128.0, _quant_table(_JPEG_LUMA, quality)) + 128.0
        cb = _dct_quantize_plane(cb, _quant_table(_JPEG_CHROMA, quality))
        cr = _dct_quantize_plane(cr, _quant_table(_JPEG_CHROMA, quality))
        out = np.stack([y + 1.402 * cr, y - 0.344136 * cb - 0.714136 * cr, y + 1.772 * cb], axis=-1)
    else:
        out = _dct_quantize_plane(x[..., 0] - 128.0, _quant_table(_JPEG_LUMA, quality))[..., None] + 128.0
    return np.clip(out / 255.0, 0.0, 1.0).astype(np.float32)


def sample_degradation(cfg: DegradationConfig, rng: np.random.Generator) -> DegradationParams:
    return DegradationParams(
        blur_sigma=float(rng.uniform(*cfg.blur_sigma_range)),
        noise_sigma=float(rng.uniform(*cfg.noise_sigma_range)),
        jpeg_quality=int(rng.integers(cfg.jpeg_quality_range[0], cfg.jpeg_quality_range[1] + 1)),
    )


def degrade_frame(frame, params: DegradationParams, factor: int, rng: np.random.Generator):
    x = frame.astype(np.float32)
    if params.blur_sigma > 0:
        x = ndimage.gaussian_filter(x, sigma=(params.blur_sigma, params.blur_sigma, 0), mode="reflect")
    if factor > 1:
        h, w = x.shape[:2]
        x = cv2.resize(x, (w // factor, h // factor), interpolation=cv2.INTER_CUBIC)
        if x.ndim == 2:
            x = x[..., None]
        x = np.clip(x, 0.0, 1.0)
    if params.noise_sigma > 0:
        x = np.clip(x + rng.normal(0.0, params.noise_sigma, size=x.shape).astype(np.float32), 0.0, 1.0)
    return jpeg_like(x, params.jpeg_quality)


def degrade_clip(hr: VideoClip, cfg: DegradationConfig) -> VideoClip:
    """Blur -> bicubic downsample -> Gaussian noise -> DCT quantization.

    One parameter draw per clip; only the noise realization changes per frame.
    """
    cfg.validate()
    s = int(cfg.downscale_factor)
    if hr.height % s or hr.width % s:
        raise DimensionError(f"clip size {hr.height}x{hr.width} not divisible by downscale factor {s}")
    rng = np.random.default_rng(cfg.seed)
    params = sample_degradation(cfg, rng)
    lr = np.stack([degrade_frame(f, params, s, rng) for f in hr.frames])
    meta = dict(hr.meta, degradation=asdict(params), downscale_factor=s)
    return VideoClip(lr, fps=hr.fps, id=hr.id, meta=meta)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _write_png16(path, frame):
    q = np.rint(np.clip(frame, 0.0, 1.0) * 65535.0).astype(np.uint16)
    if q.shape[-1] == 3:
        q = q[..., ::-1]
    else:
        q = q[..., 0]
    if not cv2.imwrite(str(path), np.ascontiguousarray(q)):
        raise ClipIOError(f"could not write {path}")


def _read_png16(path, index):
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ClipIOError(f"missing or unreadable frame {index}: {path}", frame_index=index)
    if img.dtype != np.uint16:
        raise ClipIOError(f"frame {index} is not a 16-bit PNG: {path}", frame_index=index)
    if img.ndim == 2:
        img = img[..., None]
    else:
        img = img[..., ::-1]
    return img.astype(np.float32) / 65535.0


def save_clip(clip: VideoClip, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        _write_png16(d / f"frame_{i:05d}.png", frame)
    manifest = {
        "id": clip.id,
        "fps": clip.fps,
        "num_frames": len(clip),
        "height": clip.height,
        "width": clip.width,
        "channels": clip.channels,
        "bit_depth": 16,
        "frames": [f"frame_{i:05d}.png" for i in range(len(clip))],
        "meta": clip.meta,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_clip(directory) -> VideoClip:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.is_file():
        raise ClipIOError(f"no manifest.json in {d}")
    try:
        m = json.loads(mpath.read_text())
        n = int(m["num_frames"])
        shape = (int(m["height"]), int(m["width"]), int(m["channels"]))
        names = m.get("frames") or [f"frame_{i:05d}.png" for i in range(n)]
    except (ValueError, KeyError, TypeError) as exc:
        raise ClipIOError(f"corrupt manifest in {d}: {exc}") from exc
    if n < 1 or len(names) != n:
        raise ClipIOError(f"manifest in {d} lists {len(names)} frames but num_frames={n}")
    frames = []
    for i, name in enumerate(names):
        f = _read_png16(d / name, i)
        if f.shape != shape:
            raise ClipIOError(f"frame {i} has shape {f.shape}, manifest says {shape}", frame_index=i)
        frames.append(f)
    return VideoClip(np.stack(frames), fps=float(m["fps"]), id=str(m.get("id", d.name)), meta=m.get("meta", {}))


def write_flo(path, flow: np.ndarray):
    """Middlebury .flo: magic, int32 width, int32 height, interleaved float32 (u, v)."""
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise DimensionError(f"flow must be H x W x 2, got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], dtype="<f4").tofile(f)
        np.array([w, h], dtype="<i4").tofile(f)
        flow.tofile(f)


def read_flo(path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            magic = np.fromfile(f, "<f4", count=1)
            if magic.size != 1 or magic[0] != np.float32(FLO_MAGIC):
                raise ClipIOError(f"bad .flo magic in {path}")
            wh = np.fromfile(f, "<i4", count=2)
            if wh.size != 2 or (wh <= 0).any():
                raise ClipIOError(f"bad .flo header in {path}")
            w, h = int(wh[0]), int(wh[1])
            data = np.fromfile(f, "<f4", count=2 * w * h)
    except FileNotFoundError as exc:
        raise ClipIOError(f"missing flow file {path}") from exc
    if data.size != 2 * w * h:
        raise ClipIOError(f"truncated .flo file {path}")
    return data.reshape(h, w, 2).astype(np.float32)


def _write_mask(path, mask):
    if not cv2.imwrite(str(path), (np.asarray(mask) > 0).astype(np.uint8) * 255):
        raise ClipIOError(f"could not write {path}")


def _read_mask(path, index):
    m = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if m is None:
        raise ClipIOError(f"missing visibility mask {index}: {path}", frame_index=index)
    return (m > 127).astype(np.uint8)


def downsample_flow(flow: np.ndarray, factor: int) -> np.ndarray:
    """Block-average an HR flow to LR resolution and rescale to LR pixels."""
    if factor == 1:
        return flow.astype(np.float32)
    h, w = flow.shape[:2]
    if h % factor or w % factor:
        raise DimensionError(f"flow size {h}x{w} not divisible by {factor}")
    f = flow.reshape(h // factor, factor, w // factor, factor, 2).mean(axis=(1, 3))
    return (f / factor).astype(np.float32)


@dataclass
class TrainingClip:
    """Everything one dataset clip directory holds."""

    hr: VideoClip
    lr: VideoClip
    flows_prev: list
    flows_next: list
    vis_prev: list
    vis_next: list

    @property
    def scale(self):
        return self.hr.height // self.lr.height

    def lr_flows(self):
        s = self.scale
        return ([downsample_flow(f, s) for f in self.flows_prev], [downsample_flow(f, s) for f in self.flows_next])


def save_training_clip(directory, render: SceneRender, hr: VideoClip, lr: VideoClip, scene: SceneSpec | None = None):
    d = Path(directory)
    save_clip(hr, d / "hr")
    save_clip(lr, d / "lr")
    for sub in ("flow_prev", "flow_next", "vis_prev", "vis_next"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    for i in range(len(render.flows_prev)):
        write_flo(d / "flow_prev" / f"flow_{i:05d}.flo", render.flows_prev[i])
        write_flo(d / "flow_next" / f"flow_{i:05d}.flo", render.flows_next[i])
        _write_mask(d / "vis_prev" / f"vis_{i:05d}.png", render.vis_prev[i])
        _write_mask(d / "vis_next" / f"vis_{i:05d}.png", render.vis_next[i])
    if scene is not None:
        (d / "scene.json").write_text(json.dumps(scene.to_dict(), indent=2, sort_keys=True))
    return d


def load_flows(directory, count):
    d = Path(directory)
    return [read_flo(d / f"flow_{i:05d}.flo") for i in range(count)]


def load_training_clip(directory) -> TrainingClip:
    d = Path(directory)
    hr = load_clip(d / "hr")
    lr = load_clip(d / "lr")
    if len(hr) != len(lr):
        raise ClipIOError(f"{d}: hr has {len(hr)} frames but lr has {len(lr)}")
    n = len(hr) - 1
    return TrainingClip(
        hr=hr,
        lr=lr,
        flows_prev=load_flows(d / "flow_prev", n),
        flows_next=load_flows(d / "flow_next", n),
        vis_prev=[_read_mask(d / "vis_prev" / f"vis_{i:05d}.png", i) for i in range(n)],
        vis_next=[_read_mask(d / "vis_next" / f"vis_{i:05d}.png", i) for i in range(n)],
    )


def list_clip_dirs(root):
    root = Path(root)
    return sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("clip_"))


def write_png8(path, image):
    img = np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8)
    if img.ndim == 3 and img.shape[-1] == 3:
        img = img[..., ::-1]
    elif img.ndim == 3:
        img = img[..., 0]
    os.makedirs(Path(path).parent, exist_ok=True)
    if not cv2.imwrite(str(path), np.ascontiguousarray(img)):
        raise ClipIOError(f"could not write {path}")


def clip_seeds(seed: int, count: int):
    """Independent ``(scene_seed, degradation_seed)`` pairs, one per clip."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [tuple(int(v) for v in c.generate_state(2) % (2**31 - 1)) for c in children]


def build_training_clip(directory, scene: SceneSpec, degradation: DegradationConfig, clip_id=None):
    """Render ``scene``, degrade it, and write a complete dataset clip directory."""
    render = render_scene(scene)
    hr = VideoClip(render.frames, fps=scene.fps, id=clip_id or f"scene_{scene.seed}")
    lr = degrade_clip(hr, degradation)
    return save_training_clip(directory, render, hr, lr, scene)


def _build_one(args):
    directory, scene, degradation, clip_id = args
    build_training_clip(directory, scene, degradation, clip_id)
    return str(directory)


def generate_dataset(out_dir, count: int, seed: int, sampler: SceneSampler | None = None,
                     degradation: DegradationConfig | None = None, scenes=None, jobs: int = 1):
    """Write ``count`` clips ``clip_000 ...`` under ``out_dir``; identical for any ``jobs``.

    Scenes come from ``sampler`` unless an explicit ``scenes`` list is given,
    in which case it is cycled.
    """
    sampler = sampler or SceneSampler()
    degradation = degradation or DegradationConfig()
    degradation.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = []
    for i, (scene_seed, deg_seed) in enumerate(clip_seeds(seed, count)):
        if scenes:
            scene = SceneSpec.from_dict(dict(scenes[i % len(scenes)].to_dict(), seed=scene_seed))
        else:
            scene = sampler.sample(scene_seed)
        scene.validate()
        deg = replace(degradation, seed=deg_seed)
        tasks.append((out / f"clip_{i:03d}", scene, deg, f"clip_{i:03d}"))
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_build_one, tasks))
    return [_build_one(t) for t in tasks]
