"""Command-line entry points tying the modules into sender/receiver
workflows.

Exit codes: 0 ok, 2 configuration error, 3 corrupt stream, 4 training
failure.
"""

import argparse
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .bitstream import bits_per_pixel, dequantize, pack, quantize
from .channel import apply_loss, attach_mask, random_loss_mask
from .complement import reconstruct
from .config import config_hash, load_config
from .diffusion import CdsTrainConfig, DiffusionParams, train_cds
from .edge_net import EenParams, EenTrainConfig, train_een
from .errors import ConfigError, CorruptStreamError, TrainingError
from .imaging import canny_edges, load_image, load_mask, save_image
from .metrics import MetricsRecord, center_disk_mask, evaluate_pair, run_rd_sweep, write_jsonl
from .vae import VaeParams, VaeTrainConfig, train_vae, vae_encode

# rng stream tags so independent commands draw from disjoint streams
_RNG_RECON = 1
_RNG_MASK = 2
_RNG_ZEROFILL = 3


def _build_config(args):
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _require_ckpt(path, name):
    if not path:
        raise ConfigError(f"missing {name} checkpoint: set {name}_ckpt in the config")
    if not Path(path).exists():
        raise ConfigError(f"{name} checkpoint not found: {path}")
    return path


def _load_models(cfg):
    vae = VaeParams.load(_require_ckpt(cfg.vae_ckpt, "vae"))
    een = EenParams.load(_require_ckpt(cfg.een_ckpt, "een"))
    cds = DiffusionParams.load(_require_ckpt(cfg.cds_ckpt, "cds"))
    return vae, een, cds


def _load_dataset(directory, cfg):
    root = Path(directory)
    if not root.is_dir():
        raise ConfigError(f"dataset directory not found: {directory}")
    paths = sorted(p for p in root.iterdir() if p.suffix.lower() in (".png", ".ppm"))
    if not paths:
        raise ConfigError(f"no .png/.ppm images in {directory}")
    size = (cfg.resolution, cfg.resolution)
    images = [load_image(p, size) for p in paths]
    return images, [p.stem for p in paths]


def _sampler_kwargs(cfg):
    return {
        "t_star": cfg.t_star or None,
        "inpaint_t_start": cfg.inpaint_t_start or None,
    }


def cmd_compress(args):
    cfg = _build_config(args)
    vae = VaeParams.load(_require_ckpt(cfg.vae_ckpt, "vae"))
    img = load_image(args.image, (cfg.resolution, cfg.resolution))
    z = vae_encode(img, vae)
    bs = pack(quantize(z, cfg.delta), img.shape[:2], vae.factor)
    out = Path(args.out) if args.out else Path(args.image).with_suffix(".edc")
    out.write_bytes(bs.to_bytes())
    print(f"bpp={bits_per_pixel(bs):.4f}")
    print(f"wrote {out}")
    return 0


def cmd_decompress(args):
    cfg = _build_config(args)
    vae, een, cds = _load_models(cfg)
    data = Path(args.stream).read_bytes()
    rng = np.random.default_rng([cfg.seed, _RNG_RECON])
    img = reconstruct(data, vae, een, cds, rng, **_sampler_kwargs(cfg))
    out = Path(args.out) if args.out else Path(args.stream).with_suffix(".png")
    save_image(img, out)
    print(f"wrote {out}")
    return 0


def cmd_simulate(args):
    cfg = _build_config(args)
    vae, een, cds = _load_models(cfg)
    out_dir = Path(args.out) if args.out else Path("simulate_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)

    img = load_image(args.image, (cfg.resolution, cfg.resolution))
    z = vae_encode(img, vae)
    q = quantize(z, cfg.delta)
    lossy = cfg.loss_regions >= 1
    if lossy:
        mask = random_loss_mask(
            q.symbols.shape[1], q.symbols.shape[2], cfg.loss_regions,
            cfg.loss_max_frac, np.random.default_rng([cfg.seed, _RNG_MASK]),
            area_mode=cfg.loss_area_mode,
        )
        bs = attach_mask(pack(apply_loss(q, mask), img.shape[:2], vae.factor), mask)
    else:
        bs = pack(q, img.shape[:2], vae.factor)
    bpp = bits_per_pixel(bs)

    save_image(img, out_dir / "original.png")
    rng = np.random.default_rng([cfg.seed, _RNG_RECON])
    recon = reconstruct(bs, vae, een, cds, rng, **_sampler_kwargs(cfg))
    save_image(recon, out_dir / "reconstructed.png")

    records = []
    p, s, _, _ = evaluate_pair(img, recon)
    arm = "complement" if lossy else "lossless"
    records.append(MetricsRecord(
        image_id=Path(args.image).stem, arm=arm, delta=cfg.delta,
        bpp=bpp, psnr=p, ssim=s, config_hash=chash,
    ))
    if lossy:
        zf_rng = np.random.default_rng([cfg.seed, _RNG_ZEROFILL])
        zerofill = reconstruct(bs, vae, een, cds, zf_rng, complement=False,
                               **_sampler_kwargs(cfg))
        save_image(zerofill, out_dir / "zerofill.png")
        p, s, _, _ = evaluate_pair(img, zerofill)
        records.append(MetricsRecord(
            image_id=Path(args.image).stem, arm="zero_fill", delta=cfg.delta,
            bpp=bpp, psnr=p, ssim=s, config_hash=chash,
        ))
    write_jsonl(records, out_dir / "metrics.jsonl")
    for rec in records:
        print(f"{rec.arm}: psnr={rec.psnr if rec.psnr is not None else 'inf'} "
              f"ssim={rec.ssim:.4f} bpp={rec.bpp:.4f}")
    return 0


def cmd_train(args):
    cfg = _build_config(args)
    images, _ = _load_dataset(args.dataset, cfg)
    chash = config_hash(cfg)
    out = Path(args.out) if args.out else Path(f"{args.stage}.ckpt")

    if args.stage == "vae":
        params, history = train_vae(images, VaeTrainConfig(
            epochs=cfg.vae_epochs, batch_size=cfg.vae_batch, lr=cfg.vae_lr,
            beta_kl=cfg.vae_beta_kl, base_channels=cfg.vae_base,
            latent_channels=cfg.latent_channels, factor=cfg.factor, seed=cfg.seed,
        ))
    else:
        vae = VaeParams.load(_require_ckpt(cfg.vae_ckpt, "vae"))
        edges = [canny_edges(im, cfg.canny_sigma, cfg.canny_low, cfg.canny_high)
                 for im in images]
        if args.stage == "een":
            pairs = []
            for im, edge in zip(images, edges):
                z = vae_encode(im, vae)
                zprime = dequantize(quantize(z, cfg.delta))
                pairs.append((zprime, edge))
            params, history = train_een(pairs, EenTrainConfig(
                epochs=cfg.een_epochs, batch_size=cfg.een_batch, lr=cfg.een_lr,
                lambda_l1=cfg.een_lambda_l1, base_channels=cfg.een_base,
                factor=cfg.factor, seed=cfg.seed,
            ))
        else:
            pairs = [(vae_encode(im, vae), edge) for im, edge in zip(images, edges)]
            params, history = train_cds(pairs, CdsTrainConfig(
                T=cfg.schedule_steps, beta_start=cfg.beta_start, beta_end=cfg.beta_end,
                epochs=cfg.cds_epochs, batch_size=cfg.cds_batch, lr=cfg.cds_lr,
                base_channels=cfg.cds_base, cond_channels=1,
                cond_dropout=cfg.cds_cond_dropout, seed=cfg.seed,
            ))
    params.meta["config_hash"] = chash
    params.meta["config"] = asdict(cfg)
    params.save(out)
    print(f"final loss={history[-1].get('loss', history[-1].get('l_g')):.6f}")
    print(f"wrote {out}")
    return 0


def cmd_evaluate(args):
    cfg = _build_config(args)
    vae, een, cds = _load_models(cfg)
    images, ids = _load_dataset(args.dataset, cfg)
    masks_dir = Path(args.dataset) / "masks"
    masks = []
    for image_id, img in zip(ids, images):
        mask_path = masks_dir / f"{image_id}.png"
        if mask_path.exists():
            masks.append(load_mask(mask_path, img.shape[:2]))
        else:
            masks.append(center_disk_mask(*img.shape[:2]))
    out_dir = Path(args.out) if args.out else Path("evaluate_out")
    records = run_rd_sweep(
        images, masks, cfg.deltas, vae, een, cds,
        seed=cfg.seed, out_dir=out_dir, config_hash=config_hash(cfg), image_ids=ids,
    )
    print(f"wrote {len(records)} records to {out_dir / 'metrics.jsonl'}")
    return 0


def _add_common(parser):
    parser.add_argument("--config", default=None, help="TOML config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="output file or directory")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key")


def build_parser():
    parser = argparse.ArgumentParser(prog="edc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="encode an image to a bitstream file")
    p.add_argument("image")
    _add_common(p)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="decode a bitstream file to a PNG")
    p.add_argument("stream")
    _add_common(p)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("simulate", help="run the lossy-channel loop on one image")
    p.add_argument("image")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a pipeline stage")
    p.add_argument("stage", choices=["vae", "een", "cds"])
    p.add_argument("dataset")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="rate-distortion sweep over a dataset")
    p.add_argument("dataset")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except CorruptStreamError as e:
        print(f"error: corrupt stream: {e}", file=sys.stderr)
        return 3
    except TrainingError as e:
        print(f"error: training failed: {e}", file=sys.stderr)
        return 4
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
