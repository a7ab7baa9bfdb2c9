"""Receiver-side concealment of lost latent regions and the full
receive pipeline.

Lost cells are regenerated by reverse diffusion with known-region
clamping: at every step the received cells are re-noised to the current
step's level with the closed-form forward process while the lost cells
keep the sampled values, so the generated content stays consistent with
the transmitted latent. No retransmission is involved.
"""

import numpy as np
import torch

from .bitstream import Bitstream, dequantize, unpack
from .channel import extract_mask
from .diffusion import cond_to_latent, denoise_from, match_timestep
from .edge_net import estimate_edges
from .errors import DegenerateInputError, ShapeError
from .vae import vae_decode


def complement_latent(zprime, mask, cc, params, t_start=None, rng=None):
    """Inpaint lost latent cells by mask-clamped ancestral sampling.

    ``mask`` is (h, w) with 1 = received. Received cells are returned
    bit-identical to ``zprime``; lost cells are generated from t_start
    (default: the full schedule) down to 0, guided by the conditioning
    edge map ``cc``. Deterministic for a fixed ``rng``.
    """
    sched = params.schedule
    if t_start is None:
        t_start = sched.T
    if not 0 <= t_start <= sched.T:
        raise ValueError(f"t_start {t_start} outside [0, {sched.T}]")
    zprime = np.asarray(zprime, dtype=np.float64)
    mask = np.asarray(mask)
    if zprime.ndim != 3 or zprime.shape[0] != params.model.latent_channels:
        raise ShapeError(f"expected ({params.model.latent_channels}, h, w) latent, got {zprime.shape}")
    if mask.shape != zprime.shape[1:]:
        raise ShapeError(f"mask {mask.shape} does not match latent grid {zprime.shape[1:]}")
    if not (mask > 0).any():
        raise DegenerateInputError("all latent cells lost; nothing to condition on")
    rng = np.random.default_rng() if rng is None else rng

    scale = params.latent_scale
    zn = torch.from_numpy((zprime / scale).astype(np.float32))[None]
    known = torch.from_numpy((mask > 0).astype(np.float32))[None, None]
    cond = cond_to_latent(cc, zprime.shape[1:])
    beta = torch.from_numpy(sched.beta).to(torch.float32)
    alpha = torch.from_numpy(sched.alpha).to(torch.float32)
    alpha_bar = torch.from_numpy(sched.alpha_bar).to(torch.float32)

    def q_sample(t):
        # Forward-noise the received latent to level t (t >= 1).
        eps = torch.from_numpy(rng.standard_normal(zn.shape).astype(np.float32))
        ab = alpha_bar[t - 1]
        return torch.sqrt(ab) * zn + torch.sqrt(1.0 - ab) * eps

    params.model.eval()
    with torch.no_grad():
        x = q_sample(t_start) if t_start >= 1 else zn.clone()
        for t in range(t_start, 0, -1):
            eps_hat = params.model(x, torch.tensor([t], dtype=torch.int64), cond)
            mean = (x - beta[t - 1] / torch.sqrt(1.0 - alpha_bar[t - 1]) * eps_hat) / torch.sqrt(alpha[t - 1])
            if t > 1:
                noise = torch.from_numpy(rng.standard_normal(x.shape).astype(np.float32))
                x = mean + torch.sqrt(beta[t - 1]) * noise
            else:
                x = mean
            x_known = q_sample(t - 1) if t - 1 >= 1 else zn
            x = known * x_known + (1.0 - known) * x

    out = x[0].numpy().astype(np.float64) * scale
    keep = mask > 0
    out[:, keep] = zprime[:, keep]
    return out


def reconstruct(stream, vae_params, een_params, diff_params, rng=None, *,
                edge_conditioning=True, denoise=True, complement=True,
                inpaint_t_start=None, t_star=None):
    """Full receiver: unpack, dequantize, estimate edges, denoise or
    conceal, and decode to an image.

    ``stream`` is container bytes or a parsed Bitstream. When the side
    channel carries a mask with losses and ``complement`` is on, lost
    regions are inpainted from ``inpaint_t_start`` (default: full
    schedule); otherwise the dequantized latent is denoised from the
    timestep matched to the quantization step (``t_star`` overrides).
    The ablation switches: ``edge_conditioning`` off feeds an all-zero
    edge map; ``denoise`` off decodes the dequantized latent directly.
    """
    bs = Bitstream.from_bytes(stream) if isinstance(stream, (bytes, bytearray)) else stream
    q, meta = unpack(bs)
    zprime = dequantize(q)
    mask = extract_mask(bs)

    if not denoise:
        return vae_decode(zprime, vae_params)

    if edge_conditioning:
        cc = estimate_edges(zprime, een_params)
    else:
        cc = np.zeros((meta["height"], meta["width"]), dtype=np.float64)

    rng = np.random.default_rng() if rng is None else rng
    lost = mask is not None and not (mask > 0).all()
    if lost and complement:
        z0 = complement_latent(zprime, mask, cc, diff_params, inpaint_t_start, rng)
    else:
        if t_star is None:
            t_star = match_timestep(meta["step"], diff_params.latent_scale, diff_params.schedule)
        z0 = denoise_from(zprime, t_star, cc, diff_params, rng)
    return vae_decode(z0, vae_params)
