"""Shared fixtures: synthetic shape dataset and cached toy trainings.

The toy pipeline (VAE, edge estimator, conditional diffusion) trains
once per configuration and is cached under tests/_cache so repeated
runs are fast. Delete the cache directory to force retraining.
"""

import hashlib
import json
from dataclasses import asdict
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from edc.bitstream import dequantize, quantize
from edc.diffusion import CdsTrainConfig, DiffusionParams, train_cds
from edc.edge_net import EenParams, EenTrainConfig, train_een
from edc.imaging import canny_edges
from edc.vae import VaeParams, VaeTrainConfig, train_vae, vae_encode

CACHE_DIR = Path(__file__).parent / "_cache"

DATASET_SEED = 1234
N_TRAIN = 240
N_VAL = 50
EEN_TRAIN_DELTA = 0.75

VAE_CFG = VaeTrainConfig(epochs=40, batch_size=16, lr=1e-3, beta_kl=1e-6,
                         base_channels=16, latent_channels=4, factor=4, seed=0)
EEN_CFG = EenTrainConfig(epochs=120, batch_size=16, lr=2e-4, lambda_l1=25.0,
                         base_channels=32, factor=4, dropout=0.2, seed=0)
CDS_CFG = CdsTrainConfig(T=200, beta_start=1e-4, beta_end=0.02, epochs=400,
                         batch_size=32, lr=1e-3, base_channels=32,
                         cond_channels=1, cond_dropout=0.05, seed=0)

CLUSTER_SIGMA = 0.1
CLUSTER_CFG = CdsTrainConfig(T=60, beta_start=0.005, beta_end=0.3, epochs=300,
                             batch_size=128, lr=1e-3, base_channels=16,
                             cond_channels=1, cond_dropout=0.0, seed=0)


def synth_image(rng, size=64):
    """Procedural test image: smooth gradient background plus 1-3 flat
    shapes (rectangle, disk, triangle). Returns (image, foreground mask)."""
    c0 = rng.uniform(0.1, 0.9, 3)
    c1 = rng.uniform(0.1, 0.9, 3)
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    img = c0[None, None, :] + ramp[..., None] * (c1 - c0)[None, None, :]
    mask = np.zeros((size, size), np.uint8)
    yy_i, xx_i = np.mgrid[0:size, 0:size]
    # shape-size bounds scale with the image; at size 64 they evaluate
    # to (8, 28) rect sides, (5, 14) disk radii, and 60 triangle area
    rect_lo, rect_hi = max(3, size // 8), max(5, (size * 28) // 64)
    disk_lo, disk_hi = max(2, (size * 5) // 64), max(3, (size * 14) // 64)
    min_area = max(4, (size * size * 60) // 4096)
    for _ in range(int(rng.integers(1, 4))):
        kind = int(rng.integers(0, 3))
        color = rng.uniform(0.0, 1.0, 3)
        if kind == 0:
            h = int(rng.integers(rect_lo, rect_hi))
            w = int(rng.integers(rect_lo, rect_hi))
            top = int(rng.integers(2, size - h - 2))
            left = int(rng.integers(2, size - w - 2))
            sel = np.zeros((size, size), bool)
            sel[top : top + h, left : left + w] = True
        elif kind == 1:
            r = int(rng.integers(disk_lo, disk_hi))
            cy = int(rng.integers(r + 2, size - r - 2))
            cx = int(rng.integers(r + 2, size - r - 2))
            sel = (yy_i - cy) ** 2 + (xx_i - cx) ** 2 <= r * r
        else:
            while True:
                pts = rng.integers(2, size - 2, (3, 2)).astype(np.float64)
                e1, e2 = pts[1] - pts[0], pts[2] - pts[0]
                if 0.5 * abs(e1[0] * e2[1] - e1[1] * e2[0]) >= min_area:
                    break

            def half(a, b):
                return (b[0] - a[0]) * (xx_i - a[1]) - (b[1] - a[1]) * (yy_i - a[0])

            d1, d2, d3 = half(pts[0], pts[1]), half(pts[1], pts[2]), half(pts[2], pts[0])
            sel = ((d1 <= 0) & (d2 <= 0) & (d3 <= 0)) | ((d1 >= 0) & (d2 >= 0) & (d3 >= 0))
        img[sel] = color
        mask |= sel.astype(np.uint8)
    return np.clip(img, 0, 1), mask


def make_dataset(seed=DATASET_SEED, n=N_TRAIN + N_VAL, size=64):
    rng = np.random.default_rng(seed)
    pairs = [synth_image(rng, size) for _ in range(n)]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def f1_score(pred, target, threshold=0.5):
    """Edge F1 with predictions binarized at ``threshold``."""
    p = pred > threshold
    t = target > 0.5
    tp = np.sum(p & t)
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + np.sum(p & ~t) + np.sum(~p & t))


def _cache_key(*cfgs, extra=""):
    blob = json.dumps([asdict(c) for c in cfgs], sort_keys=True) + extra
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@pytest.fixture(scope="session")
def toy_data():
    images, masks = make_dataset()
    return SimpleNamespace(
        train_images=images[:N_TRAIN],
        val_images=images[N_TRAIN:],
        val_masks=masks[N_TRAIN:],
    )


@pytest.fixture(scope="session")
def toy_models(toy_data):
    """Trained toy pipeline at 64x64 (cached). Provides the VAE, the
    edge estimator, and the conditional diffusion model plus the
    held-out data."""
    key = _cache_key(VAE_CFG, EEN_CFG, CDS_CFG,
                     extra=f"{DATASET_SEED}/{N_TRAIN}/{N_VAL}/{EEN_TRAIN_DELTA}")
    root = CACHE_DIR / key
    root.mkdir(parents=True, exist_ok=True)
    vae_path, een_path, cds_path = root / "vae.ckpt", root / "een.ckpt", root / "cds.ckpt"

    if vae_path.exists():
        vae = VaeParams.load(vae_path)
    else:
        vae, _ = train_vae(toy_data.train_images, VAE_CFG)
        vae.save(vae_path)

    edges = latents = None
    if not (een_path.exists() and cds_path.exists()):
        edges = [canny_edges(im) for im in toy_data.train_images]
        latents = [vae_encode(im, vae) for im in toy_data.train_images]

    if een_path.exists():
        een = EenParams.load(een_path)
    else:
        received = [dequantize(quantize(z, EEN_TRAIN_DELTA)) for z in latents]
        val_received = [
            dequantize(quantize(vae_encode(im, vae), EEN_TRAIN_DELTA))
            for im in toy_data.val_images[:8]
        ]
        val_edges = [canny_edges(im) for im in toy_data.val_images[:8]]
        een, _ = train_een(list(zip(received, edges)), EEN_CFG,
                           val_pairs=list(zip(val_received, val_edges)))
        een.save(een_path)

    if cds_path.exists():
        cds = DiffusionParams.load(cds_path)
    else:
        cds, _ = train_cds(list(zip(latents, edges)), CDS_CFG)
        cds.save(cds_path)

    return SimpleNamespace(
        vae=vae, een=een, cds=cds,
        train_images=toy_data.train_images,
        val_images=toy_data.val_images,
        val_masks=toy_data.val_masks,
        een_delta=EEN_TRAIN_DELTA,
        paths=SimpleNamespace(vae=vae_path, een=een_path, cds=cds_path),
    )


def make_cluster_latents(n=512, sigma=CLUSTER_SIGMA, seed=42):
    """Two-cluster synthetic latents: flat (1, 4, 4) tensors at +-1 plus
    Gaussian jitter."""
    rng = np.random.default_rng(seed)
    centers = rng.integers(0, 2, n) * 2.0 - 1.0
    lats = centers[:, None, None, None] + sigma * rng.standard_normal((n, 1, 4, 4))
    return lats, centers


@pytest.fixture(scope="session")
def cluster_model():
    """Conditional diffusion model trained on the two-cluster synthetic
    latent dataset (cached), with zero conditioning maps."""
    key = _cache_key(CLUSTER_CFG, extra=f"cluster/{CLUSTER_SIGMA}")
    root = CACHE_DIR / key
    root.mkdir(parents=True, exist_ok=True)
    path = root / "cluster.ckpt"
    if path.exists():
        params = DiffusionParams.load(path)
        history = params.meta.get("history", [])
    else:
        lats, _ = make_cluster_latents()
        edges = [np.zeros((4, 4)) for _ in range(len(lats))]
        params, history = train_cds(list(zip(lats, edges)), CLUSTER_CFG)
        params.save(path)
    return SimpleNamespace(params=params, history=history, sigma=CLUSTER_SIGMA)
