"""Dual-space adversarial stack.

Latent side: a small convolutional autoencoder supplies the latent space, an
x0-predicting denoiser acts as the frozen score prior, and low-rank adapters on
both are the only trainable discriminator weights. Pixel side: a frozen random
feature stem with a trainable patch classifier, trained with hinge loss.
"""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError, TrainingError


# ---------------------------------------------------------------------------
# Low-rank adapters
# ---------------------------------------------------------------------------


class LoRAConv2d(nn.Module):
    """Frozen convolution plus ``scale * B @ A``; B starts at zero."""

    def __init__(self, base: nn.Conv2d, rank: int, scale: float = 1.0, generator=None):
        super().__init__()
        fan_out = base.out_channels
        fan_in = base.in_channels // base.groups * base.kernel_size[0] * base.kernel_size[1]
        if rank < 1 or rank >= min(fan_in, fan_out):
            raise ConfigError(f"rank {rank} invalid for a {fan_out}x{fan_in} layer (need 1 <= r < {min(fan_in, fan_out)})")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scale = scale
        a = torch.randn(rank, fan_in, generator=generator, dtype=base.weight.dtype) / math.sqrt(fan_in)
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(torch.zeros(fan_out, rank, dtype=base.weight.dtype))
        self.enabled = True

    def effective_weight(self):
        w = self.base.weight
        if not self.enabled:
            return w
        return w + self.scale * (self.lora_B @ self.lora_A).view_as(w)

    def forward(self, x):
        b = self.base
        return F.conv2d(x, self.effective_weight(), b.bias, b.stride, b.padding, b.dilation, b.groups)


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, scale: float = 1.0, generator=None):
        super().__init__()
        fan_out, fan_in = base.weight.shape
        if rank < 1 or rank >= min(fan_in, fan_out):
            raise ConfigError(f"rank {rank} invalid for a {fan_out}x{fan_in} layer")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scale = scale
        self.lora_A = nn.Parameter(torch.randn(rank, fan_in, generator=generator, dtype=base.weight.dtype) / math.sqrt(fan_in))
        self.lora_B = nn.Parameter(torch.zeros(fan_out, rank, dtype=base.weight.dtype))
        self.enabled = True

    def forward(self, x):
        w = self.base.weight
        if self.enabled:
            w = w + self.scale * (self.lora_B @ self.lora_A)
        return F.linear(x, w, self.base.bias)


def apply_lora(layer, rank=4, scale=1.0, generator=None):
    if isinstance(layer, nn.Conv2d):
        return LoRAConv2d(layer, rank, scale, generator)
    if isinstance(layer, nn.Linear):
        return LoRALinear(layer, rank, scale, generator)
    raise ConfigError(f"cannot attach an adapter to {type(layer).__name__}")


def _fans(layer):
    if isinstance(layer, nn.Conv2d):
        return layer.in_channels // layer.groups * layer.kernel_size[0] * layer.kernel_size[1], layer.out_channels
    return layer.in_features, layer.out_features


def attach_lora(model: nn.Module, rank=4, scale=1.0, seed=0):
    """Freeze ``model`` and wrap each conv/linear layer with an adapter.

    The rank is capped per layer at ``min(fan_in, fan_out) - 1``; layers too
    narrow for any adapter stay plain and frozen.
    """
    for p in model.parameters():
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(seed)
    for name, child in list(model.named_children()):
        if isinstance(child, (nn.Conv2d, nn.Linear)):
            r = min(rank, min(_fans(child)) - 1)
            if r >= 1:
                setattr(model, name, apply_lora(child, r, scale, gen))
        elif not isinstance(child, (LoRAConv2d, LoRALinear)):
            attach_lora(child, rank, scale, seed=int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
    return model


def lora_parameters(model: nn.Module):
    return [p for n, p in model.named_parameters() if "lora_" in n]


def set_lora_enabled(model: nn.Module, enabled: bool):
    for m in model.modules():
        if isinstance(m, (LoRAConv2d, LoRALinear)):
            m.enabled = enabled


# ---------------------------------------------------------------------------
# Latent space
# ---------------------------------------------------------------------------


class _ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class LatentAutoencoder(nn.Module):
    """4-layer conv encoder (4x down, 4 latent channels) with a residual decoder.

    Only the encoder is used by the latent discriminator; the decoder exists to
    make pretraining a reconstruction task.
    """

    def __init__(self, channels=3, latent_channels=4, width=32):
        super().__init__()
        self.downsample_factor = 4
        self.latent_channels = latent_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(channels, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * width, 2 * width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * width, latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, 2 * width, 3, padding=1),
            _ResBlock(2 * width),
            _ResBlock(2 * width),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1),
            _ResBlock(2 * width),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * width, width, 3, padding=1),
            _ResBlock(width),
            nn.SiLU(),
            nn.Conv2d(width, channels, 3, padding=1),
        )

    def encode(self, x):
        return self.encoder(2.0 * x - 1.0)

    def decode(self, z):
        return 0.5 * (self.decoder(z) + 1.0)

    def forward(self, x):
        return self.decode(self.encode(x))


class LatentDenoiser(nn.Module):
    """x0-prediction ``D(x, sigma)`` with EDM-style input/skip/output scaling.

    ``log sigma`` enters as an extra constant feature map.
    """

    def __init__(self, latent_channels=4, width=64, blocks=3, sigma_data=1.0):
        super().__init__()
        self.conv_in = nn.Conv2d(latent_channels + 1, width, 3, padding=1)
        self.blocks = nn.Sequential(*[_ResBlock(width) for _ in range(blocks)])
        self.conv_out = nn.Conv2d(width, latent_channels, 3, padding=1)
        self.register_buffer("sigma_data", torch.tensor(float(sigma_data)))

    def forward(self, x, sigma):
        sigma = _sigma_like(sigma, x)
        sd = self.sigma_data.to(x.dtype)
        c_in = 1.0 / torch.sqrt(sigma**2 + sd**2)
        c_skip = sd**2 / (sigma**2 + sd**2)
        c_out = sigma * sd / torch.sqrt(sigma**2 + sd**2)
        noise_map = torch.log(sigma).expand(x.shape[0], 1, *x.shape[2:])
        h = self.conv_in(torch.cat([c_in * x, noise_map], dim=1))
        h = self.conv_out(F.silu(self.blocks(h)))
        return c_skip * x + c_out * h


def _sigma_like(sigma, x):
    if not isinstance(sigma, torch.Tensor):
        sigma = torch.tensor(float(sigma), dtype=x.dtype, device=x.device)
    sigma = sigma.to(x.dtype)
    if sigma.dim() == 0:
        sigma = sigma.expand(x.shape[0])
    return sigma.view(-1, 1, 1, 1)


def latent_score(disc, z, sigma, noise):
    """``(D(z + sigma * noise, sigma) - z) / sigma^2``."""
    if noise.shape != z.shape:
        raise DimensionError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(z.shape)}")
    s = _sigma_like(sigma, z)
    if not bool((s > 0).all()):
        raise ConfigError("sigma must be positive")
    return (disc(z + s * noise, s.view(-1)) - z) / (s * s)


def latent_adv_loss(disc, z_gen, z_real, sigma, noise):
    """Mean squared difference of scores at a shared (sigma, noise) draw.

    Only ``z_gen`` receives gradient.
    """
    if z_gen.shape != z_real.shape:
        raise DimensionError(f"latent shapes differ: {tuple(z_gen.shape)} vs {tuple(z_real.shape)}")
    s_gen = latent_score(disc, z_gen, sigma, noise)
    s_real = latent_score(disc, z_real.detach(), sigma, noise).detach()
    return ((s_gen - s_real) ** 2).mean()


def sample_sigma(n, sigma_min=0.02, sigma_max=1.0, generator=None, dtype=torch.float32):
    """Log-uniform noise levels."""
    u = torch.rand(n, generator=generator, dtype=dtype)
    return torch.exp(math.log(sigma_min) + u * (math.log(sigma_max) - math.log(sigma_min)))


def dsm_loss(disc, z, sigma, noise):
    """Denoising score matching in x0 form: ``|D(z + sigma*noise, sigma) - z|^2``."""
    s = _sigma_like(sigma, z)
    return ((disc(z + s * noise, s.view(-1)) - z) ** 2).mean()


class LatentDiscriminator(nn.Module):
    """Encoder + denoiser prior with adapters; base weights are frozen."""

    def __init__(self, autoencoder: LatentAutoencoder, denoiser: LatentDenoiser, rank=4, scale=1.0,
                 sigma_min=0.02, sigma_max=1.0, train_adapters=True, seed=0):
        super().__init__()
        self.encoder = attach_lora(copy.deepcopy(autoencoder.encoder), rank, scale, seed=seed)
        self.denoiser = attach_lora(copy.deepcopy(denoiser), rank, scale, seed=seed + 1)
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.train_adapters = train_adapters
        if not train_adapters:
            for p in lora_parameters(self):
                p.requires_grad_(False)

    def encode(self, img):
        return self.encoder(2.0 * img - 1.0)

    def forward(self, x, sigma):
        return self.denoiser(x, sigma)

    def adapter_parameters(self):
        return lora_parameters(self) if self.train_adapters else []

    def draw(self, z, generator=None):
        sigma = sample_sigma(z.shape[0], self.sigma_min, self.sigma_max, generator, z.dtype)
        noise = torch.randn(z.shape, generator=generator, dtype=z.dtype)
        return sigma, noise


# ---------------------------------------------------------------------------
# Pixel space
# ---------------------------------------------------------------------------


class PixelDiscriminator(nn.Module):
    """Frozen random 3-layer feature stem feeding a trainable patch classifier."""

    def __init__(self, channels=3, width=32, seed=0):
        super().__init__()
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.features = nn.Sequential(
            nn.Conv2d(channels, width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.head = nn.Sequential(
            nn.Conv2d(2 * width, 2 * width, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 1, 3, padding=1),
        )
        torch.random.set_rng_state(gen_state)
        for p in self.features.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        return self.head(self.features(2.0 * x - 1.0))

    def trainable_parameters(self):
        return list(self.head.parameters())


def pixel_disc_loss(disc, real, fake):
    """Hinge loss; ``fake`` is detached."""
    return F.relu(1.0 - disc(real)).mean() + F.relu(1.0 + disc(fake.detach())).mean()


def pixel_gen_loss(disc, fake):
    return -disc(fake).mean()


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


def _as_nchw(frames):
    if isinstance(frames, torch.Tensor):
        return frames.float()
    arr = np.asarray(frames, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def _random_crops(x, n, size, gen):
    N, _, H, W = x.shape
    idx = torch.randint(0, N, (n,), generator=gen)
    ys = torch.randint(0, H - size + 1, (n,), generator=gen)
    xs = torch.randint(0, W - size + 1, (n,), generator=gen)
    return torch.stack([x[i, :, y : y + size, xx : xx + size] for i, y, xx in zip(idx.tolist(), ys.tolist(), xs.tolist())])


def psnr_tensor(a, b):
    mse = float(((a - b) ** 2).mean())
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def pretrain_latent_encoder(frames, steps=4000, seed=0, held_out=None, batch=16, crop=32, lr=2e-3, width=32):
    """Fit the autoencoder on random crops; returns ``(model, metadata)``.

    ``held_out`` frames (default: the last tenth of ``frames``) give the
    reported reconstruction PSNR.
    """
    x = _as_nchw(frames)
    if x.shape[0] == 0:
        raise ConfigError("empty pretraining dataset")
    if held_out is None:
        n_hold = max(1, x.shape[0] // 10)
        held = x[-n_hold:]
        x = x[:-n_hold] if x.shape[0] > n_hold else x
    else:
        held = _as_nchw(held_out)
    torch.manual_seed(seed)
    model = LatentAutoencoder(x.shape[1], width=width)
    meta = {"steps": int(steps), "seed": int(seed), "width": int(width), "channels": int(x.shape[1]),
            "untrained": steps == 0}
    if steps > 0:
        gen = torch.Generator().manual_seed(seed)
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
        crop = min(crop, x.shape[-1], x.shape[-2])
        losses = []
        for step in range(steps):
            xb = _random_crops(x, batch, crop, gen)
            loss = F.mse_loss(model(xb), xb)
            if not torch.isfinite(loss):
                raise TrainingError(f"autoencoder loss diverged at step {step}", term="autoencoder", step=step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(float(loss.detach()))
        meta["first_loss"] = losses[0]
        meta["final_loss"] = float(np.mean(losses[-20:]))
    with torch.no_grad():
        meta["heldout_psnr"] = psnr_tensor(model(held).clamp(0, 1), held)
    model.eval()
    return model, meta


def pretrain_denoiser(autoencoder: LatentAutoencoder, frames, steps=2000, seed=0, batch=16, lr=1e-3,
                      sigma_min=0.02, sigma_max=1.0, width=64):
    """Denoising score matching on encoder latents; returns ``(model, metadata)``."""
    x = _as_nchw(frames)
    with torch.no_grad():
        z = torch.cat([autoencoder.encode(x[i : i + 16]) for i in range(0, x.shape[0], 16)])
    torch.manual_seed(seed)
    model = LatentDenoiser(z.shape[1], width=width, sigma_data=float(z.std()))
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    meta = {"steps": int(steps), "seed": int(seed), "width": int(width), "sigma_data": float(z.std())}
    losses = []
    for step in range(steps):
        idx = torch.randint(0, z.shape[0], (batch,), generator=gen)
        zb = z[idx]
        sigma = sample_sigma(batch, sigma_min, sigma_max, gen)
        noise = torch.randn(zb.shape, generator=gen)
        loss = dsm_loss(model, zb, sigma, noise)
        if not torch.isfinite(loss):
            raise TrainingError(f"denoiser loss diverged at step {step}", term="dsm", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    if losses:
        meta["first_loss"] = losses[0]
        meta["final_loss"] = float(np.mean(losses[-20:]))
    model.eval()
    return model, meta


def prior_metadata(ae_meta, den_meta):
    """Metadata layout read back by :func:`load_latent_prior`."""
    return {
        "channels": ae_meta["channels"],
        "ae_width": ae_meta["width"],
        "denoiser_width": den_meta["width"],
        "heldout_psnr": ae_meta["heldout_psnr"],
        "autoencoder": ae_meta,
        "denoiser": den_meta,
    }


def save_latent_prior(directory, autoencoder, denoiser, meta):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    torch.save(autoencoder.state_dict(), d / "autoencoder.pt")
    torch.save(denoiser.state_dict(), d / "denoiser.pt")
    (d / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_latent_prior(directory):
    d = Path(directory)
    meta = json.loads((d / "metadata.json").read_text())
    ae = LatentAutoencoder(meta.get("channels", 3), width=meta.get("ae_width", 32))
    ae.load_state_dict(torch.load(d / "autoencoder.pt", weights_only=True))
    den = LatentDenoiser(ae.latent_channels, width=meta.get("denoiser_width", 64))
    den.load_state_dict(torch.load(d / "denoiser.pt", weights_only=True))
    return ae.eval(), den.eval(), meta
