"""Edge-conditioned DDPM over the latent space.

The forward process is the standard closed-form Gaussian corruption
z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps. The noise-prediction
network takes the noisy latent concatenated with the conditioning edge
map (resized to latent resolution) plus a timestep embedding, and is
trained to regress eps under squared error. Ancestral reverse steps
implement both quantization-noise denoising (from a matched timestep)
and, with known-region clamping, loss concealment.

Latents at this interface are raw codec latents; the trainer measures
their scale and the samplers normalize internally so the unit-variance
noise model applies regardless of how the VAE spreads its code.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint, train_meta
from .errors import ShapeError, TrainingError
from .nets import ResBlock, group_norm, state_to_tensors, tensors_to_state, timestep_embedding, to_batch


@dataclass
class NoiseSchedule:
    """Per-timestep beta with derived alpha and cumulative alpha-bar.
    Timesteps are 1-indexed: t in [1, T] reads table entry t-1."""

    beta: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.beta.ndim != 1 or self.beta.size == 0:
            raise ValueError("beta must be a non-empty 1-D array")
        if np.any(self.beta <= 0) or np.any(self.beta >= 1):
            raise ValueError("all beta values must lie in (0, 1)")
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)

    @property
    def T(self):
        return len(self.beta)

    @classmethod
    def linear(cls, T=200, beta_start=1e-4, beta_end=0.02):
        return cls(np.linspace(beta_start, beta_end, T))


def forward_diffuse(z0, t, eps, sched):
    """Closed-form q(z_t | z_0) sample: sqrt(abar_t) z0 + sqrt(1-abar_t) eps."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [1, {sched.T}]")
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    ab = sched.alpha_bar[t - 1]
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def match_timestep(step, z_std, sched):
    """Timestep whose injected noise level first covers the quantization
    noise.

    Uniform quantization with bin width ``step`` has noise std
    step/sqrt(12); relative to latents of scale ``z_std`` the matched t
    is the smallest one with sqrt(1 - abar_t) >= (step/sqrt(12))/z_std.
    Saturates at T (with a warning) when the schedule never reaches that
    level.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    if z_std <= 0:
        raise ValueError(f"z_std must be positive, got {z_std}")
    target = (step / math.sqrt(12.0)) / z_std
    noise_levels = np.sqrt(1.0 - sched.alpha_bar)
    if target > noise_levels[-1]:
        warnings.warn(
            f"quantization noise {target:.4f} exceeds the schedule's maximum "
            f"noise level {noise_levels[-1]:.4f}; saturating at t={sched.T}"
        )
        return sched.T
    return int(np.searchsorted(noise_levels, target, side="left")) + 1


class EpsilonNet(nn.Module):
    """Small two-resolution U-Net predicting the corruption noise from
    (z_t, t, conditioning channels)."""

    def __init__(self, latent_channels=4, cond_channels=1, base_channels=32, emb_dim=64):
        super().__init__()
        b = base_channels
        self.latent_channels = latent_channels
        self.cond_channels = cond_channels
        self.base_channels = base_channels
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.proj_hi = nn.Linear(emb_dim, b)
        self.proj_lo = nn.Linear(emb_dim, 2 * b)
        self.stem = nn.Conv2d(latent_channels + cond_channels, b, 3, padding=1)
        self.res_hi = ResBlock(b)
        self.down = nn.Conv2d(b, 2 * b, 3, stride=2, padding=1)
        self.res_lo1 = ResBlock(2 * b)
        self.res_lo2 = ResBlock(2 * b)
        self.up = nn.ConvTranspose2d(2 * b, b, 4, stride=2, padding=1)
        self.fuse = nn.Conv2d(2 * b, b, 3, padding=1)
        self.res_out = ResBlock(b)
        self.head = nn.Sequential(group_norm(b), nn.SiLU(), nn.Conv2d(b, latent_channels, 3, padding=1))

    def forward(self, z, t, cond):
        emb = self.time_mlp(timestep_embedding(t, self.emb_dim))
        h = self.stem(torch.cat([z, cond], dim=1))
        h = h + self.proj_hi(emb)[:, :, None, None]
        h = self.res_hi(h)
        d = self.down(h)
        d = d + self.proj_lo(emb)[:, :, None, None]
        d = self.res_lo2(self.res_lo1(d))
        u = self.fuse(torch.cat([self.up(d), h], dim=1))
        return self.head(self.res_out(u))


@dataclass
class DiffusionParams:
    model: EpsilonNet
    schedule: NoiseSchedule
    cond_channels: int = 1
    latent_scale: float = 1.0  # measured std of the training latents
    meta: dict = field(default_factory=dict)

    def save(self, path):
        meta = dict(self.meta)
        meta.update(
            kind="cds",
            cond_channels=self.cond_channels,
            latent_scale=self.latent_scale,
            latent_channels=self.model.latent_channels,
            base_channels=self.model.base_channels,
            emb_dim=self.model.emb_dim,
        )
        tensors = state_to_tensors(self.model)
        tensors["schedule.beta"] = self.schedule.beta
        save_checkpoint(path, meta, tensors)

    @classmethod
    def load(cls, path):
        meta, tensors = load_checkpoint(path)
        if meta.get("kind") != "cds":
            raise ValueError(f"{path}: checkpoint kind {meta.get('kind')!r} is not 'cds'")
        schedule = NoiseSchedule(tensors.pop("schedule.beta"))
        model = EpsilonNet(
            meta["latent_channels"], meta["cond_channels"],
            meta["base_channels"], meta["emb_dim"],
        )
        tensors_to_state(model, tensors)
        model.eval()
        return cls(model=model, schedule=schedule, cond_channels=meta["cond_channels"],
                   latent_scale=meta["latent_scale"], meta=meta)


def cond_to_latent(cc, lat_hw):
    """Resize an (H, W) conditioning map to latent resolution, returning
    a (1, 1, h, w) tensor."""
    t = torch.from_numpy(np.ascontiguousarray(cc, dtype=np.float32))[None, None]
    if t.shape[2:] != tuple(lat_hw):
        t = F.interpolate(t, size=tuple(lat_hw), mode="bilinear", align_corners=False)
    return t


def eps_loss(model, z0n, t, cond, eps, sched):
    """Squared-error noise regression on a batch, differentiable.

    ``z0n`` is already in model (normalized) space; ``t`` is a 1-indexed
    int64 tensor; ``cond`` has the conditioning channels at latent
    resolution.
    """
    ab = torch.from_numpy(sched.alpha_bar).to(torch.float32)[t - 1][:, None, None, None]
    zt = torch.sqrt(ab) * z0n + torch.sqrt(1.0 - ab) * eps
    pred = model(zt, t, cond)
    return torch.mean((eps - pred) ** 2)


def diffusion_loss(z0, cc, params, rng):
    """One Monte-Carlo draw of the training objective on a single latent.

    Samples t uniform in [1, T] and standard normal noise from ``rng``,
    then returns mean squared error between the drawn noise and the
    network prediction, as a float.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.ndim != 3 or z0.shape[0] != params.model.latent_channels:
        raise ShapeError(f"expected ({params.model.latent_channels}, h, w) latent, got {z0.shape}")
    sched = params.schedule
    t = int(rng.integers(1, sched.T + 1))
    eps = rng.standard_normal(z0.shape)
    z0n = to_batch(z0 / params.latent_scale)
    cond = cond_to_latent(cc, z0.shape[1:])
    params.model.eval()
    with torch.no_grad():
        loss = eps_loss(
            params.model, z0n, torch.tensor([t], dtype=torch.int64), cond,
            to_batch(eps), sched,
        )
    return float(loss)


def _ancestral_steps(model, x, t_start, cond, sched, rng):
    beta = torch.from_numpy(sched.beta).to(torch.float32)
    alpha = torch.from_numpy(sched.alpha).to(torch.float32)
    alpha_bar = torch.from_numpy(sched.alpha_bar).to(torch.float32)
    for t in range(t_start, 0, -1):
        eps_hat = model(x, torch.tensor([t], dtype=torch.int64), cond)
        mean = (x - beta[t - 1] / torch.sqrt(1.0 - alpha_bar[t - 1]) * eps_hat) / torch.sqrt(alpha[t - 1])
        if t > 1:
            noise = torch.from_numpy(rng.standard_normal(x.shape).astype(np.float32))
            x = mean + torch.sqrt(beta[t - 1]) * noise
        else:
            x = mean
    return x


def denoise_from(zt, t_start, cc, params, rng):
    """Ancestral reverse diffusion from ``t_start`` down to 0.

    The received latent is treated as the state at ``t_start``;
    ``t_start`` = 0 returns the input unchanged. Conditioning ``cc`` is
    an (H, W) edge map. Deterministic for a fixed ``rng``.
    """
    sched = params.schedule
    if not 0 <= t_start <= sched.T:
        raise ValueError(f"t_start {t_start} outside [0, {sched.T}]")
    zt = np.asarray(zt, dtype=np.float64)
    if zt.ndim != 3 or zt.shape[0] != params.model.latent_channels:
        raise ShapeError(f"expected ({params.model.latent_channels}, h, w) latent, got {zt.shape}")
    if t_start == 0:
        return zt.copy()
    cond = cond_to_latent(cc, zt.shape[1:])
    params.model.eval()
    with torch.no_grad():
        x = _ancestral_steps(
            params.model, to_batch(zt / params.latent_scale), t_start, cond, sched, rng
        )
    return x[0].numpy().astype(np.float64) * params.latent_scale


@dataclass
class CdsTrainConfig:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    base_channels: int = 32
    cond_channels: int = 1
    cond_dropout: float = 0.1
    seed: int = 0


def train_cds(dataset, config=None):
    """Train the edge-conditioned noise predictor.

    ``dataset`` is a sequence of (clean latent (C, h, w), edge map
    (H, W)) pairs from the frozen VAE and the Canny extractor. The
    trainer measures the latent scale, normalizes, and occasionally
    zeroes the conditioning (``cond_dropout``) so the model also
    supports unconditioned denoising. Returns (DiffusionParams,
    history).
    """
    config = config or CdsTrainConfig()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    latents = np.stack([p[0] for p in dataset]).astype(np.float32)
    lat_hw = latents.shape[2:]
    conds = np.stack([
        cond_to_latent(p[1], lat_hw)[0].numpy() for p in dataset
    ]).astype(np.float32)
    scale = float(latents.std())
    if scale <= 0:
        raise TrainingError("training latents are constant; cannot set a scale")
    z = torch.from_numpy(latents / scale)
    c = torch.from_numpy(conds)

    sched = NoiseSchedule.linear(config.T, config.beta_start, config.beta_end)
    model = EpsilonNet(z.shape[1], config.cond_channels, config.base_channels)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)

    n = len(dataset)
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            zb = z[idx]
            cb = c[idx].clone()
            drop = rng.random(len(idx)) < config.cond_dropout
            if drop.any():
                cb[torch.from_numpy(drop)] = 0.0
            t = torch.from_numpy(rng.integers(1, sched.T + 1, size=len(idx)))
            eps = torch.from_numpy(rng.standard_normal(zb.shape).astype(np.float32))
            loss = eps_loss(model, zb, t, cb, eps, sched)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite diffusion loss at step {step} (epoch {epoch})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
            step += 1
        history.append({"epoch": epoch, "loss": total / batches})

    model.eval()
    params = DiffusionParams(
        model=model, schedule=sched, cond_channels=config.cond_channels,
        latent_scale=scale, meta=train_meta(config, history),
    )
    return params, history
