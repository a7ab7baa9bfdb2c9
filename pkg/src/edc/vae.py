"""Convolutional VAE mapping images to compact latents and back.

The encoder returns the posterior mean at inference so the transmitted
code is deterministic; sampling happens only inside the training loss.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint, train_meta
from .errors import ShapeError, TrainingError
from .nets import ResBlock, group_norm, state_to_tensors, tensors_to_state, to_batch

_LOGVAR_RANGE = 20.0


@dataclass
class VaeTrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-3
    beta_kl: float = 1e-6
    base_channels: int = 16
    latent_channels: int = 4
    factor: int = 4
    seed: int = 0


class ConvVae(nn.Module):
    """Stride-2 conv encoder/decoder pair with residual blocks.

    The number of stride-2 stages is log2(factor), so spatial dims shrink
    by exactly ``factor``.
    """

    def __init__(self, base_channels=16, latent_channels=4, factor=4):
        super().__init__()
        if factor not in (2, 4, 8):
            raise ValueError(f"factor must be one of 2, 4, 8, got {factor}")
        self.factor = factor
        self.latent_channels = latent_channels
        self.base_channels = base_channels
        levels = int(math.log2(factor))

        ch = base_channels
        enc = [nn.Conv2d(3, ch, 3, padding=1)]
        for _ in range(levels):
            enc.append(nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1))
            ch *= 2
            enc.append(ResBlock(ch))
        enc += [ResBlock(ch), group_norm(ch), nn.SiLU(),
                nn.Conv2d(ch, 2 * latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(latent_channels, ch, 3, padding=1), ResBlock(ch)]
        for _ in range(levels):
            dec.append(nn.ConvTranspose2d(ch, ch // 2, 4, stride=2, padding=1))
            ch //= 2
            dec.append(ResBlock(ch))
        dec += [group_norm(ch), nn.SiLU(), nn.Conv2d(ch, 3, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    def encode(self, x):
        mu, logvar = self.encoder(x).chunk(2, dim=1)
        return mu, logvar.clamp(-_LOGVAR_RANGE, _LOGVAR_RANGE)

    def decode(self, z):
        return self.decoder(z)


@dataclass
class VaeParams:
    model: ConvVae
    factor: int
    latent_channels: int
    beta_kl: float
    latent_std: np.ndarray = None  # per-channel, measured post-training
    meta: dict = field(default_factory=dict)

    def save(self, path):
        meta = dict(self.meta)
        meta.update(
            kind="vae",
            factor=self.factor,
            latent_channels=self.latent_channels,
            base_channels=self.model.base_channels,
            beta_kl=self.beta_kl,
            latent_std=None if self.latent_std is None else [float(s) for s in self.latent_std],
        )
        save_checkpoint(path, meta, state_to_tensors(self.model))

    @classmethod
    def load(cls, path):
        meta, tensors = load_checkpoint(path)
        if meta.get("kind") != "vae":
            raise ValueError(f"{path}: checkpoint kind {meta.get('kind')!r} is not 'vae'")
        model = ConvVae(meta["base_channels"], meta["latent_channels"], meta["factor"])
        tensors_to_state(model, tensors)
        model.eval()
        std = meta.get("latent_std")
        return cls(
            model=model, factor=meta["factor"], latent_channels=meta["latent_channels"],
            beta_kl=meta["beta_kl"],
            latent_std=None if std is None else np.asarray(std, dtype=np.float64),
            meta=meta,
        )


def vae_encode(img, params):
    """Posterior mean latent of an (H, W, 3) image, shape (C, H/f, W/f)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {img.shape}")
    f = params.factor
    if img.shape[0] % f or img.shape[1] % f:
        raise ShapeError(f"image dims {img.shape[:2]} not divisible by factor {f}")
    params.model.eval()
    with torch.no_grad():
        mu, _ = params.model.encode(to_batch(img.transpose(2, 0, 1)))
    return mu[0].numpy().astype(np.float64)


def vae_decode(z, params):
    """Decode a (C, h, w) latent to an (f*h, f*w, 3) image in [0, 1]."""
    z = np.asarray(z)
    if z.ndim != 3 or z.shape[0] != params.latent_channels:
        raise ShapeError(
            f"expected ({params.latent_channels}, h, w) latent, got {z.shape}"
        )
    params.model.eval()
    with torch.no_grad():
        out = params.model.decode(to_batch(z))
    img = out[0].numpy().transpose(1, 2, 0).astype(np.float64)
    return np.clip(img, 0.0, 1.0)


def kl_divergence(mu, logvar):
    """KL(N(mu, diag exp(logvar)) || N(0, I)), summed over latent dims,
    averaged over the batch. Non-negative by construction."""
    return torch.mean(torch.sum(-0.5 * (1 + logvar - mu.pow(2) - logvar.exp()), dim=(1, 2, 3)))


def vae_loss(model, batch, beta_kl, noise=None):
    """Reconstruction MSE plus beta-weighted KL.

    ``noise`` fixes the reparameterization draw, making the loss
    deterministic for gradient checks. Returns (total, mse, kl).
    """
    mu, logvar = model.encode(batch)
    if noise is None:
        noise = torch.randn_like(mu)
    z = mu + torch.exp(0.5 * logvar) * noise
    recon = model.decode(z)
    mse = torch.mean((recon - batch) ** 2)
    kl = kl_divergence(mu, logvar)
    if beta_kl == 0:
        return mse, mse, kl
    return mse + beta_kl * kl, mse, kl


def train_vae(dataset, config=None):
    """Fit the VAE on a sequence of (H, W, 3) images in [0, 1].

    Returns (VaeParams, history) where history holds one record per
    epoch. Raises TrainingError when the loss goes non-finite, naming
    the step.
    """
    config = config or VaeTrainConfig()
    images = np.asarray(dataset, dtype=np.float32)
    if images.size == 0:
        raise ValueError("training dataset is empty")
    if images.ndim != 4 or images.shape[3] != 3:
        raise ShapeError(f"expected (N, H, W, 3) images, got {images.shape}")
    if images.shape[1] % config.factor or images.shape[2] % config.factor:
        raise ShapeError(
            f"image dims {images.shape[1:3]} not divisible by factor {config.factor}"
        )

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = ConvVae(config.base_channels, config.latent_channels, config.factor)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    data = torch.from_numpy(images.transpose(0, 3, 1, 2))

    n = len(images)
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for start in range(0, n, config.batch_size):
            batch = data[order[start : start + config.batch_size]]
            total, mse, kl = vae_loss(model, batch, config.beta_kl)
            if not torch.isfinite(total):
                raise TrainingError(f"non-finite VAE loss at step {step} (epoch {epoch})")
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += [total.item(), mse.item(), kl.item()]
            batches += 1
            step += 1
        history.append({
            "epoch": epoch,
            "loss": sums[0] / batches,
            "mse": sums[1] / batches,
            "kl": sums[2] / batches,
        })

    model.eval()
    with torch.no_grad():
        mus = []
        for start in range(0, n, config.batch_size):
            mu, _ = model.encode(data[start : start + config.batch_size])
            mus.append(mu)
        latents = torch.cat(mus)
        latent_std = latents.std(dim=(0, 2, 3), unbiased=False).numpy().astype(np.float64)

    params = VaeParams(
        model=model, factor=config.factor, latent_channels=config.latent_channels,
        beta_kl=config.beta_kl, latent_std=latent_std,
        meta=train_meta(config, history),
    )
    return params, history
