"""Command-line interface: train, sample, eval, ablate, gen-data.

Exit codes: 0 success, 2 usage error, 3 configuration error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import file_digest, load_checkpoint
from .config import TrainConfig, dump_text, load_config, replace_path
from .errors import ConfigError, ContractError, DimensionError, IntegrityError, NumericError, VersionError
from .metrics import DEFAULT_EXTRACTOR, evaluate, identity_similarity
from .sampler import ABLATION_FLAGS, SampleRequest, sample, sample_stacked
from .synthfaces import export_dataset, load_png, make_dataset, read_manifest, save_png
from .trainer import fit, load_dataset, moving_average, read_loss_log

log = logging.getLogger("caidd")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4

# variant name -> config overrides; the placement rows keep every other setting of "full"
VARIANTS = {
    "full": {},
    "no_cross_attention": {"denoiser.disable_cross_attention": True},
    "no_identity": {"denoiser.disable_identity_token": True},
    "no_expert_losses": {"weights.lambda_id": 0.0, "weights.lambda_parse": 0.0, "weights.lambda_gaze": 0.0},
    "high": {"denoiser.attention_placements": ("high",)},
    "mid_high": {"denoiser.attention_placements": ("mid", "high")},
    "low_mid_high": {"denoiser.attention_placements": ("low", "mid", "high")},
}
ABLATION_COLUMNS = ("variant", "ssim", "fid", "id_similarity", "perceptual", "l_diff", "l_id")


class UsageError(Exception):
    pass


def _resolve(args) -> TrainConfig:
    if not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- train ------------------------------------------------------------------


def run_train(args) -> int:
    cfg = _resolve(args)
    out = _out(args)
    (out / "config.resolved").write_text(dump_text(cfg))
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt = fit(load_dataset(cfg), cfg, out_dir=out, resume=resume)
    print(f"trained {ckpt.step} steps -> {out / 'final.ckpt'}")
    return EXIT_OK


# -- sample -----------------------------------------------------------------


def run_sample(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.train_config
    if args.steps is not None and not 1 <= args.steps <= cfg.schedule.T:
        raise UsageError(f"--steps must lie in 1..{cfg.schedule.T}")
    overrides = {}
    for flag in args.ablate or []:
        if flag not in ABLATION_FLAGS:
            raise UsageError(f"unknown --ablate flag {flag!r}; valid: {', '.join(ABLATION_FLAGS)}")
        overrides[flag] = True
    size = cfg.denoiser.image_size
    target = _load_sized(args.target, size)
    out = _out(args)
    digest = file_digest(args.checkpoint)
    for i, src in enumerate(args.source):
        req = SampleRequest(_load_sized(src, size), target, args.seed, args.steps, overrides)
        img = sample(req, ckpt)
        stem = f"sample_{i:03d}"
        save_png(img, out / f"{stem}.png")
        record = {
            "seed": args.seed,
            "steps": args.steps or cfg.schedule.T,
            "checkpoint_sha256": digest,
            "source": str(src),
            "target": str(args.target),
            "overrides": sorted(overrides),
        }
        (out / f"{stem}.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
        print(out / f"{stem}.png")
    return EXIT_OK


def _load_sized(path, size: int) -> torch.Tensor:
    from PIL import Image

    with Image.open(path) as im:
        if im.size != (size, size):
            raise ConfigError(f"{path} is {im.size[0]}x{im.size[1]}, checkpoint expects {size}x{size}")
    return load_png(path)


# -- eval -------------------------------------------------------------------


def run_eval(args) -> int:
    report = evaluate(args.outputs, args.references, extractor_id=args.extractor, out_dir=_out(args), image_size=args.size)
    for k in sorted(report.values):
        print(f"{k}: {report.values[k]:.6f} (n={report.n_samples[k]})")
    return EXIT_OK


# -- ablate -----------------------------------------------------------------


def variant_config(base: TrainConfig, name: str) -> TrainConfig:
    if name not in VARIANTS:
        raise UsageError(f"unknown variant {name!r}; valid variants: {', '.join(VARIANTS)}")
    cfg = base
    for key, value in VARIANTS[name].items():
        cfg = replace_path(cfg, key, value)
    return cfg


def eval_variant(ckpt, data: torch.Tensor, n_eval: int, steps: int | None, out: Path) -> dict:
    """Cross-identity swaps: source i onto target i+1, seed i.

    SSIM and FID compare outputs with their targets (structure kept),
    identity similarity compares them with their sources.
    """
    n = data.shape[0]
    reqs = [SampleRequest(data[i % n], data[(i + 1) % n], seed=i, steps=steps) for i in range(n_eval)]
    outs = list(sample_stacked(reqs, ckpt))
    cfg = ckpt.train_config
    for i, img in enumerate(outs):
        save_png(img, out / f"swap_{i:03d}.png")
    report = evaluate(outs, [r.target for r in reqs], cfg.expert_config, out_dir=out)
    id_sim = float(np.mean([identity_similarity(o, r.source, cfg.expert_config) for o, r in zip(outs, reqs)]))
    return {"ssim": report.values["ssim"], "fid": report.values["fid"], "perceptual": report.values["perceptual"], "id_similarity": id_sim}


def _run_variant(job) -> dict:
    name, cfg, out, n_eval, steps = job
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(cfg)
    ckpt = fit(data, cfg, out_dir=out)
    rows = read_loss_log(out / "losses.csv")
    row = {"variant": name}
    row.update(eval_variant(ckpt, data, n_eval, steps, out))
    row["l_diff"] = moving_average([r["l_diff"] for r in rows])
    row["l_id"] = moving_average([r["l_id"] for r in rows])
    return row


def run_ablate(args) -> int:
    base = _resolve(args)
    names = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not names:
        raise UsageError("no variants requested")
    cfgs = [variant_config(base, n) for n in names]
    out = _out(args)
    (out / "config.resolved").write_text(dump_text(base))
    jobs = [(n, c, out / n, args.n_eval, args.sample_steps) for n, c in zip(names, cfgs)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs, initializer=torch.set_num_threads, initargs=(1,)) as pool:
            rows = list(pool.map(_run_variant, jobs))
    else:
        rows = [_run_variant(j) for j in jobs]
    with (out / "ablation.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r["variant"]] + [repr(float(r[c])) for c in ABLATION_COLUMNS[1:]])
    print((out / "ablation.csv").read_text(), end="")
    return EXIT_OK


# -- gen-data ---------------------------------------------------------------


def run_gen_data(args) -> int:
    if args.n < 1 or args.n_identities < 1 or args.n < args.n_identities:
        raise UsageError(f"need n >= n_identities >= 1 (got n={args.n}, n_identities={args.n_identities})")
    faces = make_dataset(args.n, args.n_identities, args.seed, args.size)
    manifest = export_dataset(faces, _out(args))
    for row in read_manifest(manifest):
        if abs(float(np.linalg.norm(row["gaze"])) - 1.0) > 1e-6:
            raise NumericError(f"{row['filename']}: gaze vector is not unit length")
    print(f"wrote {len(faces)} faces to {args.out}")
    return EXIT_OK


def dir_digest(path) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(path).iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="caidd", description="Identity-conditional diffusion face swapping at desk scale.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", required=True, help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        sp.add_argument("--out", required=True, help="output directory")

    tr = sub.add_parser("train", help="train a denoiser")
    config_args(tr)
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.set_defaults(func=run_train)

    sa = sub.add_parser("sample", help="swap source identity onto a target image")
    sa.add_argument("--checkpoint", required=True)
    sa.add_argument("--source", required=True, action="append", help="source PNG (repeatable)")
    sa.add_argument("--target", required=True)
    sa.add_argument("--steps", type=int, help="denoising steps (default: all T)")
    sa.add_argument("--seed", type=int, default=0)
    sa.add_argument("--ablate", action="append", metavar="FLAG", help=f"one of {', '.join(ABLATION_FLAGS)}")
    sa.add_argument("--out", required=True)
    sa.set_defaults(func=run_sample)

    ev = sub.add_parser("eval", help="compare generated images with references")
    ev.add_argument("--outputs", required=True, help="folder of generated PNGs")
    ev.add_argument("--references", required=True, help="folder of reference PNGs")
    ev.add_argument("--size", type=int, default=32, help="image size to load at")
    ev.add_argument("--extractor", default=DEFAULT_EXTRACTOR)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=run_eval)

    ab = sub.add_parser("ablate", help="train and evaluate a grid of variants")
    config_args(ab)
    ab.add_argument("--variants", default=",".join(VARIANTS), help=f"comma list from {', '.join(VARIANTS)}")
    ab.add_argument("--n-eval", type=int, default=8, help="swaps sampled per variant")
    ab.add_argument("--sample-steps", type=int, default=None, help="strided sampling steps (default: all T)")
    ab.add_argument("--jobs", type=int, default=1, help="variants trained in parallel")
    ab.set_defaults(func=run_ablate)

    gd = sub.add_parser("gen-data", help="render a synthetic labeled face set")
    gd.add_argument("--n", type=int, required=True)
    gd.add_argument("--n-identities", type=int, required=True)
    gd.add_argument("--seed", type=int, default=0)
    gd.add_argument("--size", type=int, default=32)
    gd.add_argument("--out", required=True)
    gd.set_defaults(func=run_gen_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ContractError, DimensionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, IntegrityError, VersionError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
