"""Image quality metrics and the rate-distortion experiment runner.

PSNR uses MAX = 1 for images in [0, 1]; identical inputs yield
math.inf, which is serialized as null and plotted capped at 100 dB.
SSIM is the standard single-scale measure with an 11x11 Gaussian window
(sigma 1.5, K1 = 0.01, K2 = 0.03) computed on the plain (unweighted)
RGB mean, averaging the valid-region similarity map. Foreground
variants restrict both to a supplied binary mask.
"""

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .bitstream import bits_per_pixel, pack, quantize
from .complement import reconstruct
from .errors import ShapeError
from .vae import vae_encode

PSNR_PLOT_CAP = 100.0

_ARMS = ("full", "no_edge", "no_denoise")


def _as_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """Peak signal-to-noise ratio in dB with MAX = 1.

    Returns math.inf for identical images.
    """
    a, b = _as_pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _ssim_window(sigma=1.5, size=11):
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k2d = np.outer(k, k)
    return k2d / k2d.sum()


def ssim_map(a, b):
    """Valid-region SSIM map of two images, shape (H-10, W-10)."""
    a, b = _as_pair(a, b)
    if min(a.shape[:2]) < 11:
        raise ShapeError(f"images must be at least 11x11 for SSIM, got {a.shape[:2]}")
    x = a.mean(axis=2) if a.ndim == 3 else a
    y = b.mean(axis=2) if b.ndim == 3 else b
    w = _ssim_window()

    def win_mean(img):
        v = np.lib.stride_tricks.sliding_window_view(img, (11, 11))
        return np.einsum("ijkl,kl->ij", v, w)

    mu_x = win_mean(x)
    mu_y = win_mean(y)
    var_x = win_mean(x * x) - mu_x * mu_x
    var_y = win_mean(y * y) - mu_y * mu_y
    cov = win_mean(x * y) - mu_x * mu_y
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    return ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )


def ssim(a, b):
    """Mean of the valid-region SSIM map."""
    return float(ssim_map(a, b).mean())


def masked_metrics(a, b, mask):
    """(f_psnr, f_ssim) restricted to mask == 1.

    f_psnr uses the MSE over foreground pixels only; f_ssim averages
    the SSIM map over foreground positions inside the valid window
    region. Raises ValueError on an empty mask.
    """
    a, b = _as_pair(a, b)
    mask = np.asarray(mask)
    if mask.shape != a.shape[:2]:
        raise ShapeError(f"mask {mask.shape} does not match images {a.shape[:2]}")
    fg = mask > 0
    if not fg.any():
        raise ValueError("foreground mask is empty")
    mse = np.mean((a[fg] - b[fg]) ** 2)
    f_psnr = math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)
    smap = ssim_map(a, b)
    fg_valid = fg[5:-5, 5:-5]
    if not fg_valid.any():
        raise ValueError("foreground mask is empty inside the SSIM window region")
    return f_psnr, float(smap[fg_valid].mean())


def center_disk_mask(h, w):
    """Synthetic foreground mask for datasets without segmentation:
    a centered disk of radius min(h, w) / 4."""
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    r = min(h, w) / 4.0
    return (((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r).astype(np.uint8)


@dataclass
class MetricsRecord:
    """One evaluated (image, step, arm) point. Infinite PSNR values are
    stored as None so the record survives JSON round trips."""

    image_id: str
    arm: str
    delta: float
    bpp: float
    psnr: float | None
    ssim: float
    f_psnr: float | None = None
    f_ssim: float | None = None
    config_hash: str = ""

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))


def _finite(value):
    return None if value is not None and math.isinf(value) else value


def evaluate_pair(original, decoded, mask=None):
    """PSNR/SSIM (and foreground variants when a mask is given),
    with infinities already mapped to None."""
    p = _finite(psnr(original, decoded))
    s = ssim(original, decoded)
    if mask is None:
        return p, s, None, None
    fp, fs = masked_metrics(original, decoded, mask)
    return p, s, _finite(fp), fs


def write_jsonl(records, path):
    with open(path, "w") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")


def read_jsonl(path):
    with open(path) as f:
        return [MetricsRecord.from_json(line) for line in f if line.strip()]


def run_rd_sweep(images, masks, deltas, vae_params, een_params, diff_params,
                 seed=0, out_dir=None, config_hash="", image_ids=None):
    """Rate-distortion sweep over quantization steps with the ablation
    ladder: full pipeline, no edge conditioning, and no denoising.

    Produces one MetricsRecord per (image, step, arm); with ``out_dir``
    also writes metrics.jsonl and an RD plot. The channel is lossless
    here; loss resilience is exercised by the simulation path.
    """
    if image_ids is None:
        image_ids = [f"img{j:04d}" for j in range(len(images))]
    records = []
    for j, img in enumerate(images):
        mask = None if masks is None else masks[j]
        z = vae_encode(img, vae_params)
        for d_idx, delta in enumerate(deltas):
            bs = pack(quantize(z, delta), img.shape[:2], vae_params.factor)
            bpp = bits_per_pixel(bs)
            for a_idx, arm in enumerate(_ARMS):
                rng = np.random.default_rng([seed, j, d_idx, a_idx])
                decoded = reconstruct(
                    bs, vae_params, een_params, diff_params, rng,
                    edge_conditioning=(arm == "full"),
                    denoise=(arm != "no_denoise"),
                )
                p, s, fp, fs = evaluate_pair(img, decoded, mask)
                records.append(MetricsRecord(
                    image_id=image_ids[j], arm=arm, delta=float(delta), bpp=bpp,
                    psnr=p, ssim=s, f_psnr=fp, f_ssim=fs, config_hash=config_hash,
                ))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_jsonl(records, out / "metrics.jsonl")
        plot_rd_curves(records, out / "rd_curve.png")
    return records


def _arm_means(records, arm):
    deltas = sorted({r.delta for r in records})
    pts = []
    for d in deltas:
        sel = [r for r in records if r.arm == arm and r.delta == d]
        if not sel:
            continue
        bpp = np.mean([r.bpp for r in sel])
        p = np.mean([PSNR_PLOT_CAP if r.psnr is None else min(r.psnr, PSNR_PLOT_CAP) for r in sel])
        s = np.mean([r.ssim for r in sel])
        pts.append((bpp, p, s))
    return pts


def plot_rd_curves(records, path):
    """Aggregate bpp versus PSNR/SSIM per arm."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_p, ax_s) = plt.subplots(1, 2, figsize=(10, 4))
    for arm in _ARMS:
        pts = _arm_means(records, arm)
        if not pts:
            continue
        bpp, p, s = zip(*pts)
        ax_p.plot(bpp, p, marker="o", label=arm)
        ax_s.plot(bpp, s, marker="o", label=arm)
    ax_p.set_xlabel("bpp")
    ax_p.set_ylabel("PSNR (dB)")
    ax_s.set_xlabel("bpp")
    ax_s.set_ylabel("SSIM")
    ax_p.legend()
    ax_s.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
