"""Recurrent buffer rollout, alternating generator/discriminator updates, and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import adversarial as adv
from .backbone import Generator, ModelConfig, build_input
from .data import TrainingClip, list_clip_dirs, load_training_clip
from .errors import ConfigError, ContractError, TrainingError
from .flow import estimate_flow
from .losses import (
    LossConfig,
    LossReport,
    chain_flows,
    multi_frame_temporal_loss,
    reconstruction_loss,
    region_aware_tv,
)

log = logging.getLogger(__name__)

LR_TAG = "LR"
SR_TAG = "SR-downsampled"


@dataclass
class TrainConfig:
    lr: float = 2e-5
    disc_lr: float | None = None
    lr_halving_period_epochs: int = 50
    total_epochs: int = 200
    batch_size: int = 2
    extra_frames: int = 2
    anchor_policy: str = "last"
    alternation_ratio: int = 1
    seed: int = 0
    recurrent: bool = True
    use_temporal_loss: bool = True
    use_latent_disc: bool = True
    use_pixel_disc: bool = True
    train_latent_adapters: bool = True
    second_sweep: bool = False
    grad_clip: float | None = 1.0
    max_steps_per_epoch: int | None = None
    ckpt_every_epochs: int = 50
    lora_rank: int = 4
    lora_scale: float = 1.0
    sigma_min: float = 0.02
    sigma_max: float = 1.0
    latent_prior_dir: str | None = None
    ae_steps: int = 4000
    denoiser_steps: int = 1000
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.lr_halving_period_epochs < 1 or self.total_epochs < 0:
            raise ConfigError("lr_halving_period_epochs must be >= 1 and total_epochs >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.alternation_ratio != 1:
            raise ConfigError("only 1:1 generator/discriminator alternation is supported")
        if self.anchor_policy != "last":
            raise ConfigError(f"unknown anchor_policy {self.anchor_policy!r}")
        if self.extra_frames < 0:
            raise ConfigError("extra_frames must be >= 0")
        self.loss.validate()
        self.model.validate()
        if self.use_temporal_loss and self.anchor_index - self.loss.window_D < 0:
            raise ConfigError("window too short for the temporal consistency window D")
        return self

    @property
    def k(self):
        return self.model.context_radius

    @property
    def window_length(self):
        return 2 * self.k + 1 + self.extra_frames

    @property
    def anchor_index(self):
        """Last frame whose full context lies inside the loaded window."""
        return self.window_length - self.k - 1

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("loss", "model")}
        return {"train": d, "loss": self.loss.to_dict(), "model": self.model.to_dict()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        train = dict(d.get("train", {}))
        unknown = set(train) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        try:
            loss = LossConfig(**d.get("loss", {}))
            model = ModelConfig(**d.get("model", {}))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(loss=loss, model=model, **train)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr * 0.5 ** (epoch // cfg.lr_halving_period_epochs)


# ---------------------------------------------------------------------------
# Rollout
# ---------------------------------------------------------------------------


@dataclass
class FrameBuffer:
    slots: list
    origin_tags: list

    @classmethod
    def from_frames(cls, frames):
        return cls([f.clone() for f in frames], [LR_TAG] * len(frames))

    def write(self, t, frame):
        if frame.shape != self.slots[t].shape:
            raise ContractError(f"buffer slot {t} expects {tuple(self.slots[t].shape)}, got {tuple(frame.shape)}")
        self.slots[t] = frame
        self.origin_tags[t] = SR_TAG


def area_downsample(sr, lr_shape):
    factor = sr.shape[-1] // lr_shape[-1]
    return F.avg_pool2d(sr, factor) if factor > 1 else sr


def _zero_flow(like):
    return like.new_zeros(like.shape[0], 2, *like.shape[2:])


def flow_to(t, j, flows_next, flows_prev, like):
    """Flow on frame t sampling frame j, chained from adjacent-frame flows."""
    if j == t:
        return _zero_flow(like)
    if j > t:
        return chain_flows(flows_next[t:j])
    return chain_flows(flows_prev[j:t][::-1])


def window_flows(t, k, n, flows_next, flows_prev, like):
    """Flows aligning each non-centre window slot (edge-replicated) onto frame t."""
    return [flow_to(t, min(max(t + i, 0), n - 1), flows_next, flows_prev, like)
            for i in range(-k, k + 1) if i != 0]


def window_frames(slots, t, k):
    n = len(slots)
    return [slots[min(max(t + i, 0), n - 1)] for i in range(-k, k + 1)]


def recurrent_rollout(G, frames, flows_next, flows_prev, k, anchor, model_cfg=None, recurrent=True,
                      need_context=True, second_sweep=False):
    """Sweep t = k..anchor, feeding each prediction back into the buffer.

    ``frames`` is a list of LR ``N x C x h x w`` tensors. ``flows_next[i]`` lives
    on frame i and samples frame i+1, ``flows_prev[i]`` the reverse. ``G`` maps
    an input stack to an SR frame. Context steps run without gradient; only the
    anchor prediction carries it. Returns ``(sr_anchor, sr_context, buffer)``
    where ``sr_context`` maps t -> SR frame for t < anchor.
    """
    n = len(frames)
    if n < 2 * k + 1:
        raise ContractError(f"clip of {n} frames is shorter than the {2 * k + 1}-frame window")
    if not k <= anchor <= n - k - 1:
        raise ContractError(f"anchor {anchor} outside [{k}, {n - k - 1}]")
    cfg = model_cfg if model_cfg is not None else getattr(G, "config", None)
    if cfg is None:
        cfg = ModelConfig(context_radius=k)
    buf = FrameBuffer.from_frames(frames)
    context = {}
    ts = range(k, anchor + 1) if (recurrent or need_context) else [anchor]
    sweeps = 2 if (second_sweep and recurrent) else 1
    sr_anchor = None
    for sweep in range(sweeps):
        for t in ts:
            x = build_input(window_frames(buf.slots, t, k), window_flows(t, k, n, flows_next, flows_prev, frames[0]), cfg)
            last = t == anchor and sweep == sweeps - 1
            if last:
                sr = G(x)
                sr_anchor = sr
            else:
                with torch.no_grad():
                    sr = G(x)
                if t < anchor:
                    context[t] = sr
            if recurrent:
                buf.write(t, area_downsample(sr.detach(), frames[t].shape))
    return sr_anchor, context, buf


def infer_clip(G, lr_frames, flows_next=None, flows_prev=None, recurrent=True):
    """Sliding-window SR over a whole clip; edge frames use replicated windows.

    ``lr_frames`` is ``T x h x w x C`` numpy. Without flows, they are estimated
    from the LR frames. Returns ``T x H x W x C`` float32 numpy.
    """
    G.eval()
    cfg = G.config
    k = cfg.context_radius
    frames = [torch.from_numpy(np.ascontiguousarray(f.transpose(2, 0, 1)))[None].float() for f in lr_frames]
    n = len(frames)
    if flows_next is None:
        flows_next = [estimate_flow(lr_frames[i + 1], lr_frames[i]) for i in range(n - 1)]
        flows_prev = [estimate_flow(lr_frames[i], lr_frames[i + 1]) for i in range(n - 1)]

    def as_t(f):
        return f if isinstance(f, torch.Tensor) else torch.from_numpy(np.ascontiguousarray(f.transpose(2, 0, 1)))[None].float()

    fn = [as_t(f) for f in flows_next]
    fp = [as_t(f) for f in flows_prev]
    buf = FrameBuffer.from_frames(frames)
    out = []
    with torch.no_grad():
        for t in range(n):
            sr = G(build_input(window_frames(buf.slots, t, k), window_flows(t, k, n, fn, fp, frames[0]), cfg))
            if recurrent:
                buf.write(t, area_downsample(sr, frames[t].shape))
            out.append(sr[0].permute(1, 2, 0).numpy())
    return np.stack(out).astype(np.float32)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def _chw(a):
    return torch.from_numpy(np.ascontiguousarray(np.asarray(a).transpose(2, 0, 1))).float()


@dataclass
class Batch:
    lr: torch.Tensor  # B x T x C x h x w
    lr_flows_next: torch.Tensor  # B x (T-1) x 2 x h x w
    lr_flows_prev: torch.Tensor
    gt: torch.Tensor  # B x C x H x W, anchor frame
    hr_flows_next: torch.Tensor  # B x D x 2 x H x W, pairs (a-D .. a-1) -> next
    hr_flows_prev: torch.Tensor

    def frames(self):
        return [self.lr[:, t] for t in range(self.lr.shape[1])]

    def flows(self):
        return ([self.lr_flows_next[:, i] for i in range(self.lr_flows_next.shape[1])],
                [self.lr_flows_prev[:, i] for i in range(self.lr_flows_prev.shape[1])])


class WindowDataset:
    """Training clips held in memory as tensors, sampled as fixed-length windows."""

    def __init__(self, clips, window_length, anchor, D):
        self.window_length = window_length
        self.anchor = anchor
        self.D = D
        self.items = []
        for tc in clips:
            if len(tc.lr) < window_length:
                raise ContractError(f"clip {tc.hr.id} has {len(tc.lr)} frames, window needs {window_length}")
            lp, ln = tc.lr_flows()
            self.items.append({
                "lr": torch.stack([_chw(f) for f in tc.lr.frames]),
                "hr": torch.stack([_chw(f) for f in tc.hr.frames]),
                "lr_next": torch.stack([_chw(f) for f in ln]),
                "lr_prev": torch.stack([_chw(f) for f in lp]),
                "hr_next": torch.stack([_chw(f) for f in tc.flows_next]),
                "hr_prev": torch.stack([_chw(f) for f in tc.flows_prev]),
            })

    @classmethod
    def from_dirs(cls, dirs, window_length, anchor, D):
        clip_dirs = []
        for d in dirs:
            d = Path(d)
            clip_dirs.extend(list_clip_dirs(d) if not (d / "hr").is_dir() else [d])
        if not clip_dirs:
            raise ContractError(f"no clip directories found in {[str(d) for d in dirs]}")
        return cls([load_training_clip(p) for p in clip_dirs], window_length, anchor, D)

    def __len__(self):
        return len(self.items)

    def hr_frames(self):
        return torch.cat([it["hr"] for it in self.items])

    def sample(self, index, start):
        it = self.items[index]
        T, a, D = self.window_length, self.anchor, self.D
        s = start
        return {
            "lr": it["lr"][s : s + T],
            "lr_next": it["lr_next"][s : s + T - 1],
            "lr_prev": it["lr_prev"][s : s + T - 1],
            "gt": it["hr"][s + a],
            "hr_next": it["hr_next"][s + a - D : s + a],
            "hr_prev": it["hr_prev"][s + a - D : s + a],
        }

    def epoch_batches(self, rng: np.random.Generator, batch_size):
        order = rng.permutation(len(self.items))
        batches = []
        for b in range(len(order) // batch_size):
            samples = []
            for idx in order[b * batch_size : (b + 1) * batch_size]:
                n = self.items[idx]["lr"].shape[0]
                start = int(rng.integers(0, n - self.window_length + 1))
                samples.append(self.sample(int(idx), start))
            batches.append(collate(samples))
        return batches


def collate(samples):
    return Batch(
        lr=torch.stack([s["lr"] for s in samples]),
        lr_flows_next=torch.stack([s["lr_next"] for s in samples]),
        lr_flows_prev=torch.stack([s["lr_prev"] for s in samples]),
        gt=torch.stack([s["gt"] for s in samples]),
        hr_flows_next=torch.stack([s["hr_next"] for s in samples]),
        hr_flows_prev=torch.stack([s["hr_prev"] for s in samples]),
    )


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    generator: Generator
    latent_disc: adv.LatentDiscriminator | None
    pixel_disc: adv.PixelDiscriminator | None
    gen_opt: torch.optim.Optimizer
    disc_opt: torch.optim.Optimizer | None
    epoch: int = 0
    step: int = 0
    updates: dict = field(default_factory=lambda: {"generator": 0, "pixel_disc": 0, "latent_disc": 0})
    torch_rng: torch.Generator = field(default_factory=torch.Generator)
    np_rng: np.random.Generator = field(default_factory=np.random.default_rng)

    def disc_parameters(self):
        params = []
        if self.pixel_disc is not None:
            params += self.pixel_disc.trainable_parameters()
        if self.latent_disc is not None:
            params += self.latent_disc.adapter_parameters()
        return params


def init_state(cfg: TrainConfig, latent_prior=None) -> TrainState:
    """Fresh generator/discriminators/optimizers, all seeded from ``cfg.seed``.

    ``latent_prior`` is ``(autoencoder, denoiser)``; required when the latent
    discriminator is enabled.
    """
    cfg.validate()
    torch.manual_seed(cfg.seed)
    G = Generator(cfg.model)
    latent = None
    if cfg.use_latent_disc:
        if latent_prior is None:
            raise ConfigError("latent discriminator enabled but no latent prior given")
        ae, den = latent_prior
        latent = adv.LatentDiscriminator(ae, den, cfg.lora_rank, cfg.lora_scale, cfg.sigma_min, cfg.sigma_max,
                                         train_adapters=cfg.train_latent_adapters, seed=cfg.seed)
    pixel = adv.PixelDiscriminator(cfg.model.in_channels, seed=cfg.seed + 7) if cfg.use_pixel_disc else None
    betas = (0.9, 0.999)
    gen_opt = torch.optim.Adam(G.parameters(), lr=cfg.lr, betas=betas, weight_decay=0.0)
    state = TrainState(cfg, G, latent, pixel, gen_opt, None)
    dparams = state.disc_parameters()
    if dparams:
        state.disc_opt = torch.optim.Adam(dparams, lr=cfg.disc_lr or cfg.lr, betas=betas, weight_decay=0.0)
    state.torch_rng = torch.Generator().manual_seed(cfg.seed)
    state.np_rng = np.random.default_rng(cfg.seed)
    return state


def _check(name, value, step):
    if not math.isfinite(float(value.detach())):
        raise TrainingError(f"non-finite {name} loss at step {step}", term=name, step=step)


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def train_step(state: TrainState, batch: Batch, lr=None):
    """One generator update (phase A) followed by one discriminator update (phase B)."""
    cfg = state.config
    lc = cfg.loss
    G = state.generator
    G.train()
    if lr is not None:
        _set_lr(state.gen_opt, lr)
        if state.disc_opt is not None:
            _set_lr(state.disc_opt, lr if cfg.disc_lr is None else cfg.disc_lr * lr / cfg.lr)
    k, a, D = cfg.k, cfg.anchor_index, lc.window_D
    frames = batch.frames()
    fn, fp = batch.flows()
    use_temp = cfg.use_temporal_loss and lc.lambda_temp > 0
    for p in state.disc_parameters():
        p.requires_grad_(False)

    # phase A: generator
    sr, context, _ = recurrent_rollout(G, frames, fn, fp, k, a, cfg.model, recurrent=cfg.recurrent,
                                       need_context=use_temp, second_sweep=cfg.second_sweep)
    gt = batch.gt
    terms = {"rec": reconstruction_loss(sr, gt, lc.eps)}
    zero = sr.new_zeros(())
    if use_temp:
        seq = [context[a - d] for d in range(D, 0, -1)] + [sr]
        hn = [batch.hr_flows_next[:, i] for i in range(D)]
        hp = [batch.hr_flows_prev[:, i] for i in range(D)]
        terms["temp"] = multi_frame_temporal_loss(seq, hn, lc.gamma, D, lc.eps, lc.sigma_m, hp,
                                                  lc.occlusion_alpha, lc.occlusion_beta)
    else:
        terms["temp"] = zero
    terms["tv"] = region_aware_tv(sr, gt, lc.tau) if lc.lambda_tv > 0 else zero
    if state.latent_disc is not None and lc.lambda_adv_latent > 0:
        ld = state.latent_disc
        z_gen = ld.encode(sr)
        with torch.no_grad():
            z_real = ld.encode(gt)
        sigma, noise = ld.draw(z_gen, state.torch_rng)
        terms["adv_latent"] = adv.latent_adv_loss(ld, z_gen, z_real, sigma, noise)
    else:
        terms["adv_latent"] = zero
    if state.pixel_disc is not None and lc.lambda_adv_pixel > 0:
        terms["adv_pixel"] = adv.pixel_gen_loss(state.pixel_disc, sr)
    else:
        terms["adv_pixel"] = zero
    weights = lc.weights()
    if not use_temp:
        weights["temp"] = 0.0
    for name, v in terms.items():
        _check(name, v, state.step)
    total = sum(weights[n] * v for n, v in terms.items())
    state.gen_opt.zero_grad(set_to_none=True)
    total.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(G.parameters(), cfg.grad_clip)
    state.gen_opt.step()
    state.updates["generator"] += 1

    # phase B: discriminators, on a detached prediction
    extra = {}
    fake = sr.detach()
    if state.disc_opt is not None:
        for p in state.disc_parameters():
            p.requires_grad_(True)
        state.disc_opt.zero_grad(set_to_none=True)
        d_total = fake.new_zeros(())
        if state.pixel_disc is not None:
            d_pix = adv.pixel_disc_loss(state.pixel_disc, gt, fake)
            _check("d_pixel", d_pix, state.step)
            d_total = d_total + d_pix
            extra["d_pixel"] = d_pix
        if state.latent_disc is not None and state.latent_disc.adapter_parameters():
            ld = state.latent_disc
            z_real = ld.encode(gt)
            sigma, noise = ld.draw(z_real, state.torch_rng)
            d_lat = adv.dsm_loss(ld, z_real, sigma, noise)
            _check("d_latent", d_lat, state.step)
            d_total = d_total + d_lat
            extra["d_latent"] = d_lat
        d_total.backward()
        state.disc_opt.step()
        if state.pixel_disc is not None:
            state.updates["pixel_disc"] += 1
        if state.latent_disc is not None and state.latent_disc.adapter_parameters():
            state.updates["latent_disc"] += 1
        for p in state.disc_parameters():
            p.requires_grad_(False)
    state.step += 1
    report = LossReport.build({n: v.detach() for n, v in terms.items()}, weights,
                              {n: v.detach() for n, v in extra.items()})
    return state, report


# ---------------------------------------------------------------------------
# Checkpoints and the loop
# ---------------------------------------------------------------------------


def _np_state(rng):
    return json.loads(json.dumps(rng.bit_generator.state, default=int))


def save_checkpoint(state: TrainState, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    payload = {
        "generator": state.generator.state_dict(),
        "gen_opt": state.gen_opt.state_dict(),
        "latent_disc": state.latent_disc.state_dict() if state.latent_disc is not None else None,
        "pixel_disc": state.pixel_disc.state_dict() if state.pixel_disc is not None else None,
        "disc_opt": state.disc_opt.state_dict() if state.disc_opt is not None else None,
        "torch_rng": state.torch_rng.get_state(),
        "np_rng": _np_state(state.np_rng),
        "epoch": state.epoch,
        "step": state.step,
        "updates": dict(state.updates),
    }
    torch.save(payload, d / "state.pt")
    (d / "config.json").write_text(json.dumps(state.config.to_dict(), indent=2, sort_keys=True))
    return d


def load_checkpoint(directory, latent_prior=None) -> TrainState:
    d = Path(directory)
    cfg = TrainConfig.from_dict(json.loads((d / "config.json").read_text()))
    state = init_state(cfg, latent_prior)
    payload = torch.load(d / "state.pt", weights_only=False)
    state.generator.load_state_dict(payload["generator"])
    state.gen_opt.load_state_dict(payload["gen_opt"])
    if state.latent_disc is not None:
        state.latent_disc.load_state_dict(payload["latent_disc"])
    if state.pixel_disc is not None:
        state.pixel_disc.load_state_dict(payload["pixel_disc"])
    if state.disc_opt is not None:
        state.disc_opt.load_state_dict(payload["disc_opt"])
    state.torch_rng.set_state(payload["torch_rng"])
    state.np_rng.bit_generator.state = payload["np_rng"]
    state.epoch = payload["epoch"]
    state.step = payload["step"]
    state.updates = payload["updates"]
    return state


def load_generator_from_checkpoint(directory) -> Generator:
    d = Path(directory)
    cfg = TrainConfig.from_dict(json.loads((d / "config.json").read_text()))
    G = Generator(cfg.model)
    G.load_state_dict(torch.load(d / "state.pt", weights_only=False)["generator"])
    return G.eval()


def latest_checkpoint(out_dir):
    ckpts = sorted(Path(out_dir).glob("ckpt_epoch_*"))
    return ckpts[-1] if ckpts else None


def prepare_latent_prior(cfg: TrainConfig, dataset: WindowDataset, out_dir):
    """Load the prior named in the config, or pretrain one on the training HR frames."""
    if cfg.latent_prior_dir:
        ae, den, meta = adv.load_latent_prior(cfg.latent_prior_dir)
        return (ae, den), meta
    frames = dataset.hr_frames()
    ae, ae_meta = adv.pretrain_latent_encoder(frames, steps=cfg.ae_steps, seed=cfg.seed)
    den, den_meta = adv.pretrain_denoiser(ae, frames, steps=cfg.denoiser_steps, seed=cfg.seed,
                                          sigma_min=cfg.sigma_min, sigma_max=cfg.sigma_max)
    meta = adv.prior_metadata(ae_meta, den_meta)
    adv.save_latent_prior(Path(out_dir) / "latent_prior", ae, den, meta)
    return (ae, den), meta


def _write_jsonl(path, record):
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def train(cfg: TrainConfig, data_dirs, out_dir, resume=None):
    """Run (or resume) training; returns the final checkpoint directory.

    Writes ``config.json``, a ``metrics.jsonl`` log (header line then one
    record per step) and ``ckpt_epoch_%04d`` directories under ``out_dir``.
    """
    cfg.validate()
    torch.use_deterministic_algorithms(True)
    out = Path(out_dir)
    dataset = WindowDataset.from_dirs(data_dirs, cfg.window_length, cfg.anchor_index, cfg.loss.window_D)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    prior = None
    if resume is not None:
        ckpt = Path(resume)
        if ckpt.is_dir() and not (ckpt / "state.pt").exists():
            ckpt = latest_checkpoint(ckpt)
        if ckpt is None:
            raise ContractError(f"no checkpoint found at {resume}")
        saved = TrainConfig.from_dict(json.loads((ckpt / "config.json").read_text()))
        if saved.use_latent_disc:
            prior_dir = saved.latent_prior_dir or (ckpt.parent / "latent_prior")
            ae, den, _ = adv.load_latent_prior(prior_dir)
            prior = (ae, den)
        state = load_checkpoint(ckpt, prior)
        cfg = state.config
        if state.epoch >= cfg.total_epochs:
            log.info("run already finished at epoch %d", state.epoch)
            return ckpt
    else:
        if cfg.use_latent_disc:
            prior, _ = prepare_latent_prior(cfg, dataset, out)
        state = init_state(cfg, prior)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        metrics_path.write_text("")
        _write_jsonl(metrics_path, {"type": "header", "config": cfg.to_dict(), "num_clips": len(dataset)})
        save_checkpoint(state, out / f"ckpt_epoch_{0:04d}")

    last = latest_checkpoint(out)
    while state.epoch < cfg.total_epochs:
        lr = lr_at(state.epoch, cfg)
        batches = dataset.epoch_batches(state.np_rng, cfg.batch_size)
        if cfg.max_steps_per_epoch:
            batches = batches[: cfg.max_steps_per_epoch]
        for batch in batches:
            state, report = train_step(state, batch, lr)
            rec = {"type": "step", "step": state.step, "epoch": state.epoch, "lr": lr}
            rec.update(report.flat())
            _write_jsonl(metrics_path, rec)
        state.epoch += 1
        if state.epoch % cfg.ckpt_every_epochs == 0 or state.epoch == cfg.total_epochs:
            last = save_checkpoint(state, out / f"ckpt_epoch_{state.epoch:04d}")
    return last
