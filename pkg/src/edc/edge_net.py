"""Edge estimation network: a conditional GAN that maps the received
(dequantized) latent, resized to image resolution, to an edge map.

Training follows the usual paired image-translation recipe: an
encoder-decoder generator with skip connections and dropout as its
stochastic input, against a patch discriminator conditioned on the
generator input. The generator objective is the adversarial loss plus a
weighted L1 term toward the Canny target; the discriminator gets the
adversarial loss alone.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint, train_meta
from .errors import ShapeError, TrainingError
from .imaging import save_image
from .nets import group_norm, state_to_tensors, tensors_to_state, to_batch


@dataclass
class EenTrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 2e-4
    lambda_l1: float = 1.0
    base_channels: int = 32
    factor: int = 4
    dropout: float = 0.5
    seed: int = 0


class EdgeGenerator(nn.Module):
    """U-Net generator, latent channels in, one sigmoid edge channel out.

    Dropout in the decoder is the stochastic input; it is active only in
    train mode, so inference is deterministic.
    """

    def __init__(self, in_channels=4, base_channels=32, dropout=0.5):
        super().__init__()
        b = base_channels
        self.in_channels = in_channels
        self.base_channels = base_channels
        self.down1 = nn.Conv2d(in_channels, b, 4, stride=2, padding=1)
        self.down2 = nn.Sequential(
            nn.LeakyReLU(0.2), nn.Conv2d(b, 2 * b, 4, stride=2, padding=1), group_norm(2 * b)
        )
        self.down3 = nn.Sequential(
            nn.LeakyReLU(0.2), nn.Conv2d(2 * b, 4 * b, 4, stride=2, padding=1), group_norm(4 * b)
        )
        self.up3 = nn.Sequential(
            nn.ReLU(), nn.ConvTranspose2d(4 * b, 2 * b, 4, stride=2, padding=1),
            group_norm(2 * b), nn.Dropout(dropout),
        )
        self.up2 = nn.Sequential(
            nn.ReLU(), nn.ConvTranspose2d(4 * b, b, 4, stride=2, padding=1),
            group_norm(b), nn.Dropout(dropout),
        )
        self.up1 = nn.Sequential(nn.ReLU(), nn.ConvTranspose2d(2 * b, 1, 4, stride=2, padding=1))

    def forward(self, x):
        d1 = self.down1(x)
        d2 = self.down2(d1)
        d3 = self.down3(d2)
        u3 = self.up3(d3)
        u2 = self.up2(torch.cat([u3, d2], dim=1))
        u1 = self.up1(torch.cat([u2, d1], dim=1))
        return torch.sigmoid(u1)


class PatchDiscriminator(nn.Module):
    """70x70 receptive-field patch discriminator conditioned on the
    generator input; emits a logit map."""

    def __init__(self, in_channels=4, base_channels=32):
        super().__init__()
        b = base_channels
        self.net = nn.Sequential(
            nn.Conv2d(in_channels + 1, b, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(b, 2 * b, 4, stride=2, padding=1),
            group_norm(2 * b),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * b, 4 * b, 4, stride=2, padding=1),
            group_norm(4 * b),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * b, 4 * b, 4, stride=1, padding=1),
            group_norm(4 * b),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * b, 1, 4, stride=1, padding=1),
        )

    def forward(self, x, edge):
        if x.shape[2] < 24 or x.shape[3] < 24:
            raise ShapeError(
                f"patch discriminator needs inputs of at least 24x24, got {tuple(x.shape[2:])}"
            )
        return self.net(torch.cat([x, edge], dim=1))


@dataclass
class EenParams:
    generator: EdgeGenerator
    discriminator: PatchDiscriminator
    lambda_l1: float
    factor: int
    meta: dict = field(default_factory=dict)

    def save(self, path):
        meta = dict(self.meta)
        meta.update(
            kind="een",
            lambda_l1=self.lambda_l1,
            factor=self.factor,
            in_channels=self.generator.in_channels,
            base_channels=self.generator.base_channels,
        )
        tensors = state_to_tensors(self.generator, "g.")
        tensors.update(state_to_tensors(self.discriminator, "d."))
        save_checkpoint(path, meta, tensors)

    @classmethod
    def load(cls, path):
        meta, tensors = load_checkpoint(path)
        if meta.get("kind") != "een":
            raise ValueError(f"{path}: checkpoint kind {meta.get('kind')!r} is not 'een'")
        gen = EdgeGenerator(meta["in_channels"], meta["base_channels"])
        disc = PatchDiscriminator(meta["in_channels"], meta["base_channels"])
        tensors_to_state(gen, tensors, "g.")
        tensors_to_state(disc, tensors, "d.")
        gen.eval()
        disc.eval()
        return cls(generator=gen, discriminator=disc, lambda_l1=meta["lambda_l1"],
                   factor=meta["factor"], meta=meta)


def resize_latent(z, factor):
    """Bilinear upsample of a latent batch to image resolution."""
    return F.interpolate(z, scale_factor=factor, mode="bilinear", align_corners=False)


def estimate_edges(zprime, params):
    """Edge map in [0, 1] estimated from a (C, h, w) received latent.
    Output is (f*h, f*w). Deterministic: dropout is inactive."""
    zprime = np.asarray(zprime)
    if zprime.ndim != 3 or zprime.shape[0] != params.generator.in_channels:
        raise ShapeError(
            f"expected ({params.generator.in_channels}, h, w) latent, got {zprime.shape}"
        )
    params.generator.eval()
    with torch.no_grad():
        x = resize_latent(to_batch(zprime), params.factor)
        out = params.generator(x)
    return out[0, 0].numpy().astype(np.float64)


def een_losses(x, y, params):
    """Generator/discriminator losses for one batch.

    ``x`` is the resized latent batch (B, C, H, W) and ``y`` the target
    edge batch (B, 1, H, W). Returns torch scalars
    (l_g, l_d, l_l1, l_adv) with l_g = l_adv + lambda_l1 * l_l1 and l_d
    the (non-saturating) adversarial discriminator loss.
    """
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise ShapeError(f"input batch {tuple(x.shape)} does not match target {tuple(y.shape)}")
    generator, discriminator, lambda_l1 = params.generator, params.discriminator, params.lambda_l1
    fake = generator(x)
    l_l1 = torch.mean(torch.abs(y - fake))
    logits_fake = discriminator(x, fake)
    l_adv = F.binary_cross_entropy_with_logits(logits_fake, torch.ones_like(logits_fake))
    l_g = l_adv + lambda_l1 * l_l1
    logits_real = discriminator(x, y)
    logits_fake_d = discriminator(x, fake.detach())
    l_d = 0.5 * (
        F.binary_cross_entropy_with_logits(logits_real, torch.ones_like(logits_real))
        + F.binary_cross_entropy_with_logits(logits_fake_d, torch.zeros_like(logits_fake_d))
    )
    return l_g, l_d, l_l1, l_adv


def _latent_rgb(x):
    # First three channels of a resized latent, min-max scaled for dumps.
    rgb = x[:3].transpose(1, 2, 0) if x.shape[0] >= 3 else np.repeat(x[:1], 3, 0).transpose(1, 2, 0)
    lo, hi = rgb.min(), rgb.max()
    return (rgb - lo) / (hi - lo) if hi > lo else np.zeros_like(rgb)


def train_een(pairs, config=None, val_pairs=None, dump_dir=None):
    """Adversarial training on (received latent, Canny target) pairs.

    Alternates one discriminator step and one generator step per batch.
    Returns (EenParams, history); history records per-epoch losses, the
    discriminator's patch accuracy, and validation L1 when ``val_pairs``
    is given. ``dump_dir`` enables per-epoch side-by-side PNG dumps of
    input latent, estimate, and target for the first validation pair.
    """
    config = config or EenTrainConfig()
    if len(pairs) == 0:
        raise ValueError("training dataset is empty")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    latents = torch.from_numpy(np.stack([p[0] for p in pairs]).astype(np.float32))
    edges = torch.from_numpy(np.stack([p[1] for p in pairs]).astype(np.float32))[:, None]
    in_channels = latents.shape[1]
    gen = EdgeGenerator(in_channels, config.base_channels, config.dropout)
    disc = PatchDiscriminator(in_channels, config.base_channels)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr, betas=(0.5, 0.999))

    if val_pairs:
        val_x = resize_latent(
            torch.from_numpy(np.stack([p[0] for p in val_pairs]).astype(np.float32)),
            config.factor,
        )
        val_y = torch.from_numpy(np.stack([p[1] for p in val_pairs]).astype(np.float32))[:, None]

    n = len(pairs)
    history = []
    step = 0
    for epoch in range(config.epochs):
        gen.train()
        disc.train()
        order = rng.permutation(n)
        sums = np.zeros(5)
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x = resize_latent(latents[idx], config.factor)
            y = edges[idx]

            fake = gen(x)
            logits_real = disc(x, y)
            logits_fake = disc(x, fake.detach())
            l_d = 0.5 * (
                F.binary_cross_entropy_with_logits(logits_real, torch.ones_like(logits_real))
                + F.binary_cross_entropy_with_logits(logits_fake, torch.zeros_like(logits_fake))
            )
            opt_d.zero_grad()
            l_d.backward()
            opt_d.step()
            d_acc = 0.5 * (
                (logits_real > 0).float().mean().item()
                + (logits_fake <= 0).float().mean().item()
            )

            logits_fake_g = disc(x, fake)
            l_adv = F.binary_cross_entropy_with_logits(
                logits_fake_g, torch.ones_like(logits_fake_g)
            )
            l_l1 = torch.mean(torch.abs(y - fake))
            l_g = l_adv + config.lambda_l1 * l_l1
            if not (torch.isfinite(l_g) and torch.isfinite(l_d)):
                raise TrainingError(f"non-finite EEN loss at step {step} (epoch {epoch})")
            opt_g.zero_grad()
            l_g.backward()
            opt_g.step()

            sums += [l_g.item(), l_d.item(), l_l1.item(), l_adv.item(), d_acc]
            batches += 1
            step += 1

        record = {
            "epoch": epoch,
            "l_g": sums[0] / batches, "l_d": sums[1] / batches,
            "l_l1": sums[2] / batches, "l_adv": sums[3] / batches,
            "d_acc": sums[4] / batches,
        }
        if val_pairs:
            gen.eval()
            with torch.no_grad():
                val_est = gen(val_x)
                record["val_l1"] = torch.mean(torch.abs(val_y - val_est)).item()
            if dump_dir is not None:
                panel = np.concatenate(
                    [
                        _latent_rgb(val_x[0].numpy()),
                        np.repeat(val_est[0, 0].numpy()[:, :, None], 3, axis=2),
                        np.repeat(val_y[0, 0].numpy()[:, :, None], 3, axis=2),
                    ],
                    axis=1,
                )
                save_image(panel, f"{dump_dir}/een_val_epoch{epoch:03d}.png")
        history.append(record)

    gen.eval()
    disc.eval()
    params = EenParams(
        generator=gen, discriminator=disc, lambda_l1=config.lambda_l1,
        factor=config.factor, meta=train_meta(config, history),
    )
    return params, history
