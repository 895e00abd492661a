"""Command-line entry point wiring data, training, sampling, and evaluation.

Every invocation resolves its options from built-in defaults, then an
optional TOML config file, then explicit flags (flags win), and executes
inside a fresh timestamped run directory containing the resolved RunConfig
(``runconfig.toml``), a ``meta.json``, and the command outputs.  Re-invoking
a command with a recorded RunConfig reproduces the output payloads
byte-for-byte (directory names and meta timestamps aside).

Exit codes: 0 success, 1 runtime failure, 2 usage errors (unknown flags,
missing files).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import traceback
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib

import torch

from . import __version__
from .autoencoder import LossWeights, VAEConfig
from .datapipe import (
    ToyShapesConfig,
    build_reference_batch,
    load_images,
    load_manifest,
    preprocess,
    load_image,
    save_png,
    write_toy_dataset,
)
from .denoiser import UNetConfig
from .harness import (
    TrainConfig,
    channel_study,
    eval_generation,
    eval_reconstruction,
    load_pipeline,
    steps_sweep,
    train_phase1,
    train_phase2,
    vae_from_checkpoint,
)
from .checkpoints import load_checkpoint
from .metrics import ConvFeatures, PixelFeatures, PRConfig, fid, improved_precision_recall
from .sampler import SamplerConfig

OUT_ENV = "LATENTGEN_OUT"


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot emit {type(value).__name__} to TOML")


def emit_toml(table: dict, prefix: str = "") -> str:
    """Minimal TOML writer for the nested str/num/bool/list dicts we record."""
    lines = []
    subtables = []
    for key in sorted(table):
        value = table[key]
        if isinstance(value, dict):
            subtables.append(key)
        elif value is not None:
            lines.append(f"{key} = {_toml_value(value)}")
    for key in subtables:
        name = f"{prefix}.{key}" if prefix else key
        lines.append(f"\n[{name}]")
        lines.append(emit_toml(table[key], name))
    return "\n".join(lines).strip() + "\n"


def _load_config_file(path: str | None, parser: argparse.ArgumentParser) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        parser.error(f"config file not found: {p}")
    with open(p, "rb") as fh:
        data = tomllib.load(fh)
    return data.get("options", data)


class _Resolver:
    """Defaults < config file < explicit flags."""

    def __init__(self, args: argparse.Namespace, file_cfg: dict):
        self.args = vars(args)
        self.file_cfg = file_cfg
        self.resolved: dict = {}

    def get(self, name: str, default=None):
        key = name.replace("-", "_")
        value = self.args.get(key)
        if value is None:
            value = self.file_cfg.get(name, default)
        self.resolved[name] = value
        return value


def _make_run_dir(out_root: str | None, command: str) -> Path:
    root = Path(out_root or os.environ.get(OUT_ENV, "runs"))
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run_dir = root / f"{command}-{stamp}"
    suffix = 0
    while run_dir.exists():
        suffix += 1
        run_dir = root / f"{command}-{stamp}-{suffix}"
    run_dir.mkdir(parents=True)
    return run_dir


def _write_run_records(run_dir: Path, command: str, resolved: dict) -> None:
    payload = {"command": command, "options": {k: v for k, v in resolved.items()
                                               if v is not None}}
    (run_dir / "runconfig.toml").write_text(
        f'command = "{command}"\n\n[options]\n' + emit_toml(payload["options"])
    )
    meta = {"command": command, "version": __version__, "created_at": time.time()}
    (run_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True))


def _require_file(parser: argparse.ArgumentParser, path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        parser.error(f"{what} not found: {p}")
    return p


def _load_manifest_images(parser, manifest_path, size: int):
    mpath = _require_file(parser, manifest_path, "manifest")
    manifest = load_manifest(mpath)
    return manifest, *load_images(manifest, size, root=mpath.parent)


def _reference_images(parser, manifest_path, size: int, n: int, seed: int):
    mpath = _require_file(parser, manifest_path, "manifest")
    manifest = load_manifest(mpath)
    ref = build_reference_batch(manifest, n, seed)
    sub = type(manifest)(rows=ref.items, name=manifest.name,
                         channels=manifest.channels, native_size=manifest.native_size)
    images, labels = load_images(sub, size, root=mpath.parent)
    return ref, images, labels


def _extractor(name: str, in_channels: int):
    if name == "pixels":
        return PixelFeatures()
    if name == "conv":
        return ConvFeatures(in_channels=in_channels)
    raise ValueError(f"unknown extractor {name!r} (expected conv or pixels)")


def _load_dir_images(parser, dir_path, size: int) -> torch.Tensor:
    d = Path(dir_path)
    if not d.is_dir():
        parser.error(f"image directory not found: {d}")
    paths = sorted(d.rglob("*.png"))
    if not paths:
        parser.error(f"no PNG files under {d}")
    return torch.stack([preprocess(load_image(p), size) for p in paths])


def _int_list(text: str) -> list[int]:
    return [int(v) for v in str(text).split(",") if v != ""]


# ---------------------------------------------------------------------------
# subcommand implementations


def _cmd_gen_toy(parser, args) -> int:
    r = _Resolver(args, _load_config_file(args.config, parser))
    n = r.get("n-per-class", 1000)
    size = r.get("size", 32)
    noise = r.get("noise-level", 0.03)
    seed = r.get("seed", 0)
    run_dir = _make_run_dir(args.out, "gen-toy")
    _write_run_records(run_dir, "gen-toy", r.resolved)
    cfg = ToyShapesConfig(size=size, noise_level=noise, seed=seed)
    manifest_path = write_toy_dataset(cfg, n, run_dir / "data")
    print(f"wrote {2 * n} images; manifest: {manifest_path}")
    return 0


def _cmd_train_vae(parser, args) -> int:
    r = _Resolver(args, _load_config_file(args.config, parser))
    manifest = r.get("manifest")
    if manifest is None:
        parser.error("train-vae requires --manifest")
    size = r.get("size", 32)
    seed = r.get("seed", 0)
    vae_config = VAEConfig(
        in_channels=r.get("in-channels", 1),
        latent_channels=r.get("latent-channels", 8),
        base_width=r.get("base-width", 32),
    )
    # no perceptual extractor is wired at the CLI; the term skips with a notice
    weights = LossWeights(
        lambda_l1=r.get("lambda-l1", 1.0),
        lambda_perceptual=r.get("lambda-perceptual", 1.0),
        lambda_ssim=r.get("lambda-ssim", 1.0),
        lambda_adv=r.get("lambda-adv", 0.1),
        lambda_kl=r.get("lambda-kl", 1e-6),
    )
    train_cfg = TrainConfig(
        phase=1,
        steps=r.get("steps", 2000),
        batch_size=r.get("batch-size", 16),
        lr=r.get("lr"),
        seed=seed,
        loss_weights=weights,
        disc_warmup=r.get("disc-warmup", 500),
        disc_width=r.get("disc-width", 32),
        checkpoint_interval=r.get("checkpoint-interval", 0),
    )
    run_dir = _make_run_dir(args.out, "train-vae")
    _write_run_records(run_dir, "train-vae", r.resolved)
    _, images, labels = _load_manifest_images(parser, manifest, size)
    train_phase1(train_cfg, (images, labels), vae_config, out_dir=run_dir)
    print(f"checkpoint: {run_dir / 'vae.ckpt'}")
    return 0


def _cmd_train_diffusion(parser, args) -> int:
    r = _Resolver(args, _load_config_file(args.config, parser))
    manifest = r.get("manifest")
    vae_path = r.get("vae")
    if manifest is None or vae_path is None:
        parser.error("train-diffusion requires --manifest and --vae")
    _require_file(parser, vae_path, "VAE checkpoint")
    size = r.get("size", 32)
    vae_ckpt = load_checkpoint(vae_path)
    unet_config = UNetConfig(
        latent_channels=vae_ckpt.config["vae"]["latent_channels"],
        widths=tuple(_int_list(r.get("widths", "32,64"))),
        embed_dim=r.get("embed-dim", 64),
        num_classes=r.get("num-classes", 2),
    )
    train_cfg = TrainConfig(
        phase=2,
        steps=r.get("steps", 4000),
        batch_size=r.get("batch-size", 32),
        lr=r.get("lr"),
        seed=r.get("seed", 0),
        ema_decay=r.get("ema-decay"),
        vae_checkpoint=str(vae_path),
        T=r.get("t-steps", 1000),
        beta_start=r.get("beta-start", 1e-4),
        beta_end=r.get("beta-end", 0.02),
        checkpoint_interval=r.get("checkpoint-interval", 0),
    )
    run_dir = _make_run_dir(args.out, "train-diffusion")
    _write_run_records(run_dir, "train-diffusion", r.resolved)
    _, images, labels = _load_manifest_images(parser, manifest, size)
    train_phase2(train_cfg, vae_ckpt, (images, labels), unet_config, out_dir=run_dir)
    print(f"checkpoint: {run_dir / 'diffusion.ckpt'}")
    return 0


def _cmd_sample(parser, args) -> int:
    r = _Resolver(args, _load_config_file(args.config, parser))
    ckpt_path = r.get("checkpoint")
    if ckpt_path is None:
        parser.error("sample requires --checkpoint")
    _require_file(parser, ckpt_path, "checkpoint")
    label = r.get("label", 0)
    n = r.get("n", 4)
    steps = r.get("steps", SamplerConfig().steps)
    eta = r.get("eta", 0.0)
    seed = r.get("seed", 0)
    run_dir = _make_run_dir(args.out, "sample")
    _write_run_records(run_dir, "sample", r.resolved)
    pipeline = load_pipeline(ckpt_path)
    images = pipeline.generate(label, n, steps=steps, eta=eta, seed=seed)
    for i in range(n):
        save_png(images[i], run_dir / f"sample-{i:04d}.png")
    print(f"wrote {n} samples to {run_dir}")
    return 0


def _cmd_recon_eval(parser, args) -> int:
    r = _Resolver(args, _load_config_file(args.config, parser))
    ckpt_path = r.get("checkpoint")
    manifest = r.get("manifest")
    if ckpt_path is None or manifest is None:
        parser.error("recon-eval requires --checkpoint and --manifest")
    _require_file(parser, ckpt_path, "checkpoint")
    size = r.get("size", 32)
    n = r.get("ref-n", 128)
    seed = r.get("seed", 0)
    run_dir = _make_run_dir(args.out, "recon-eval")
    _write_run_records(run_dir, "recon-eval", r.resolved)
    ref, images, _ = _reference_images(parser, manifest, size, n, seed)
    vae = vae_from_checkpoint(load_checkpoint(ckpt_path))
    vae.eval()
    report = eval_reconstruction(vae, images)
    report["reference"] = ref.descriptor
    (run_dir / "reconstruction.json").write_text(json.dumps(report, sort_keys=True))
    print(json.dumps(report, sort_keys=True, indent=2))
    return 0


def _cmd_evaluate(parser, args) -> int:
    r = _Resolver(args, _load_config_file(args.config, parser))
    size = r.get("size", 32)
    seed = r.get("seed", 0)
    k = r.get("k", 3)
    extractor_name = r.get("extractor", "conv")
    gen_dir = r.get("gen-dir")
    run_dir = _make_run_dir(args.out, "evaluate")
    _write_run_records(run_dir, "evaluate", r.resolved)

    if gen_dir is not None:
        real_dir = r.get("real-dir")
        if real_dir is None:
            parser.error("evaluate with --gen-dir also requires --real-dir")
        real = _load_dir_images(parser, real_dir, size)
        gen = _load_dir_images(parser, gen_dir, size)
        extractor = _extractor(extractor_name, real.shape[1])
        real_f = extractor.extract(real)
        gen_f = extractor.extract(gen)
        fid_val = fid(real_f, gen_f)
        precision, recall = improved_precision_recall(real_f, gen_f, PRConfig(k=k))
        report = {
            "fid": fid_val, "precision": precision, "recall": recall,
            "extractor": extractor.descriptor, "n_real": int(real.shape[0]),
            "n_gen": int(gen.shape[0]),
        }
        (run_dir / "report.json").write_text(json.dumps(report, sort_keys=True))
        print(json.dumps(report, sort_keys=True, indent=2))
        return 0

    ckpt_path = r.get("checkpoint")
    manifest = r.get("manifest")
    if ckpt_path is None or manifest is None:
        parser.error("evaluate requires --checkpoint and --manifest (or --real-dir/--gen-dir)")
    _require_file(parser, ckpt_path, "checkpoint")
    n = r.get("ref-n", 128)
    steps = r.get("steps", SamplerConfig().steps)
    ref, images, labels = _reference_images(parser, manifest, size, n, seed)
    pipeline = load_pipeline(ckpt_path)
    extractor = _extractor(extractor_name, images.shape[1])
    report = eval_generation(
        pipeline, images, labels, extractor,
        SamplerConfig(steps=steps, seed=seed), PRConfig(k=k), reference=ref.descriptor,
    )
    (run_dir / "report.json").write_text(report.to_json())
    (run_dir / "report.csv").write_text(
        report.csv_header() + "\n" + report.to_csv_row() + "\n"
    )
    print(report.to_json())
    return 0


def _cmd_steps_sweep(parser, args) -> int:
    r = _Resolver(args, _load_config_file(args.config, parser))
    ckpt_path = r.get("checkpoint")
    manifest = r.get("manifest")
    if ckpt_path is None or manifest is None:
        parser.error("steps-sweep requires --checkpoint and --manifest")
    _require_file(parser, ckpt_path, "checkpoint")
    size = r.get("size", 32)
    n = r.get("ref-n", 128)
    seed = r.get("seed", 0)
    steps_list = _int_list(r.get("steps", "50,100,150,200,250"))
    seeds = _int_list(r.get("seeds", "0,1,2"))
    run_dir = _make_run_dir(args.out, "steps-sweep")
    _write_run_records(run_dir, "steps-sweep", r.resolved)
    ref, images, labels = _reference_images(parser, manifest, size, n, seed)
    pipeline = load_pipeline(ckpt_path)
    extractor = _extractor(r.get("extractor", "conv"), images.shape[1])
    result = steps_sweep(
        pipeline, steps_list, seeds, images, labels, extractor,
        out_dir=run_dir, pr_cfg=PRConfig(k=r.get("k", 3)), reference=ref.descriptor,
    )
    print(f"{len(result.rows)} rows -> {result.csv_path}")
    return 0


def _cmd_channel_study(parser, args) -> int:
    r = _Resolver(args, _load_config_file(args.config, parser))
    manifest = r.get("manifest")
    if manifest is None:
        parser.error("channel-study requires --manifest")
    size = r.get("size", 32)
    base_width = r.get("base-width", 32)
    in_channels = r.get("in-channels", 1)
    train_cfg = TrainConfig(
        phase=1,
        steps=r.get("steps", 1500),
        batch_size=r.get("batch-size", 16),
        lr=r.get("lr"),
        seed=r.get("seed", 0),
        loss_weights=LossWeights(lambda_adv=0.0, lambda_perceptual=0.0),
    )
    run_dir = _make_run_dir(args.out, "channel-study")
    _write_run_records(run_dir, "channel-study", r.resolved)
    _, images, labels = _load_manifest_images(parser, manifest, size)
    rows = channel_study(
        (images, labels),
        VAEConfig(in_channels=in_channels, latent_channels=4, base_width=base_width),
        VAEConfig(in_channels=in_channels, latent_channels=8, base_width=base_width),
        train_cfg,
        out_dir=run_dir,
    )
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser assembly


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentgen",
        description="Two-phase latent diffusion image synthesis and evaluation.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help=f"output root (default $" + OUT_ENV + " or ./runs)")
        p.add_argument("--config", help="TOML config file; explicit flags win")
        p.add_argument("--seed", type=int)
        p.add_argument("--size", type=int, help="image size (default 32)")

    p = sub.add_parser("gen-toy", help="write the procedural two-class toy dataset")
    common(p)
    p.add_argument("--n-per-class", type=int)
    p.add_argument("--noise-level", type=float)
    p.set_defaults(fn=_cmd_gen_toy)

    p = sub.add_parser("train-vae", help="phase 1: train the autoencoder")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--in-channels", type=int)
    p.add_argument("--latent-channels", type=int, choices=(4, 8))
    p.add_argument("--base-width", type=int)
    p.add_argument("--disc-warmup", type=int)
    p.add_argument("--disc-width", type=int)
    p.add_argument("--lambda-l1", type=float)
    p.add_argument("--lambda-perceptual", type=float)
    p.add_argument("--lambda-ssim", type=float)
    p.add_argument("--lambda-adv", type=float)
    p.add_argument("--lambda-kl", type=float)
    p.add_argument("--checkpoint-interval", type=int)
    p.set_defaults(fn=_cmd_train_vae)

    p = sub.add_parser("train-diffusion", help="phase 2: train the latent denoiser")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--vae", help="phase-1 checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--widths", help="UNet level widths, e.g. 32,64")
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--ema-decay", type=float)
    p.add_argument("--t-steps", type=int, help="forward process length T")
    p.add_argument("--beta-start", type=float)
    p.add_argument("--beta-end", type=float)
    p.add_argument("--checkpoint-interval", type=int)
    p.set_defaults(fn=_cmd_train_diffusion)

    p = sub.add_parser("sample", help="generate images from a diffusion checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--label", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--eta", type=float)
    p.set_defaults(fn=_cmd_sample)

    p = sub.add_parser("recon-eval", help="reconstruction MS-SSIM/MSE of a VAE")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--ref-n", type=int)
    p.set_defaults(fn=_cmd_recon_eval)

    p = sub.add_parser("evaluate", help="FID / precision / recall of a generator")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--ref-n", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--extractor", choices=("conv", "pixels"))
    p.add_argument("--real-dir", help="compare image folders instead of sampling")
    p.add_argument("--gen-dir")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("steps-sweep", help="metrics as a function of DDIM steps")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--ref-n", type=int)
    p.add_argument("--steps", help="comma list, e.g. 50,100,150,200,250")
    p.add_argument("--seeds", help="comma list, e.g. 0,1,2")
    p.add_argument("--k", type=int)
    p.add_argument("--extractor", choices=("conv", "pixels"))
    p.set_defaults(fn=_cmd_steps_sweep)

    p = sub.add_parser("channel-study", help="4- vs 8-channel VAE at one budget")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--in-channels", type=int)
    p.add_argument("--base-width", type=int)
    p.set_defaults(fn=_cmd_channel_study)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(parser, args)
    except SystemExit as exc:  # parser.error inside a command
        return int(exc.code or 0)
    except Exception:
        traceback.print_exc(file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
