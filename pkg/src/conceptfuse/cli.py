"""Command-line entry point: ``conceptfuse <command> [flags]``.

Every run writes into its own directory under ``--output-dir``: a
``manifest.json`` (config, config hash, seeds, library versions, output
checksums), the produced images/checkpoints and plain-text reports.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .concepts import ConceptError
from .fusion import FusionError
from .pipeline.checkpoint import AdapterCheckpoint, CheckpointError, FusedCheckpoint
from .pipeline.config import ConfigError, RunConfig
from .testbed.data import BUILTIN_CONCEPTS, ConceptSpec, DatasetError

logger = logging.getLogger("conceptfuse")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class NumericalError(RuntimeError):
    pass


# ---- config flags ---------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (mirrors RunConfig keys)")
    g.add_argument("--config", help="JSON config file; explicit flags override it")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        kw = {"dest": f.name, "default": argparse.SUPPRESS}
        if isinstance(default, bool):
            g.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
        elif isinstance(default, list):
            g.add_argument(flag, type=float, nargs=2, metavar=("START", "END"), **kw)
        elif f.name == "fusion_mu":
            g.add_argument(flag, type=float, **kw)
        elif isinstance(default, int):
            g.add_argument(flag, type=int, **kw)
        elif isinstance(default, float):
            g.add_argument(flag, type=float, **kw)
        else:
            g.add_argument(flag, type=str, **kw)


def config_from_args(args: argparse.Namespace) -> RunConfig:
    data = json.loads(Path(args.config).read_text()) if getattr(args, "config", None) else {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    names = {f.name for f in dataclasses.fields(RunConfig)}
    data.update({k: v for k, v in vars(args).items() if k in names})
    return RunConfig.from_dict(data)


# ---- run directories ------------------------------------------------------------------

def _versions() -> dict[str, str]:
    out = {"python": platform.python_version(), "torch": torch.__version__, "numpy": np.__version__}
    try:
        out["package"] = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        out["package"] = "unknown"
    return out


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_dir(cfg: RunConfig, command: str, extra: dict) -> Path:
    key = hashlib.sha256(json.dumps({"cfg": cfg.to_dict(), "cmd": command, **extra}, sort_keys=True,
                                    default=str).encode()).hexdigest()[:10]
    path = Path(cfg.output_dir) / f"{command}-{key}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(path: Path, cfg: RunConfig | None, command: str, inputs: dict) -> None:
    outputs = {p.name: _sha(p) for p in sorted(path.iterdir()) if p.is_file() and p.name != "manifest.json"}
    manifest = {
        "command": command, "inputs": inputs, "versions": _versions(), "outputs": outputs,
        "config": cfg.to_dict() if cfg else None, "config_hash": cfg.digest() if cfg else None,
        "seeds": {"seed": cfg.seed, "base_seed": cfg.base_seed} if cfg else inputs.get("seed"),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _base(cfg: RunConfig):
    from .testbed.pretrain import load_or_build_base
    cache = cfg.base_cache or os.environ.get("CONCEPTFUSE_CACHE") or str(Path.home() / ".cache" / "conceptfuse")
    return load_or_build_base(cfg.base_seed, cfg.base_steps, cache)


def _save_png(img: np.ndarray, path: Path) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8), "RGB").save(path)


# ---- commands -------------------------------------------------------------------------

def cmd_make_dataset(args) -> Path:
    from .testbed.data import make_dataset
    if args.spec:
        try:
            spec = ConceptSpec.from_dict(json.loads(Path(args.spec).read_text()))
        except (json.JSONDecodeError, TypeError, KeyError) as exc:
            raise DatasetError(f"invalid concept spec: {exc}") from None
    elif args.concept in BUILTIN_CONCEPTS:
        spec = BUILTIN_CONCEPTS[args.concept]
    else:
        raise DatasetError(f"unknown builtin concept {args.concept!r}; have {sorted(BUILTIN_CONCEPTS)}")
    if args.n_images is not None:
        spec = dataclasses.replace(spec, n_images=args.n_images)
    ds = make_dataset(spec, seed=args.seed)
    out = Path(args.out)
    ds.save(out)
    write_manifest(out, None, "make-dataset", {"spec": dataclasses.asdict(spec), "seed": args.seed})
    return out


def cmd_train_single(args) -> Path:
    from .pipeline.train import train_single
    from .testbed.data import load_dataset
    cfg = config_from_args(args)
    ds = load_dataset(args.data, allow_mask_fallback=cfg.allow_mask_fallback)
    result = train_single(cfg, ds, _base(cfg))
    if not all(np.isfinite(r["total"]) for r in result.log):
        raise NumericalError("non-finite training loss")
    out = run_dir(cfg, "train-single", {"data": str(args.data)})
    result.checkpoint.save(out / "adapter.safetensors")
    keys = ["step", "total", "denoise", "w_denoise", "con", "attn"]
    lines = ["\t".join(keys)] + ["\t".join(f"{r[k]:.6e}" if k != "step" else str(r[k]) for k in keys)
                                 for r in result.log]
    (out / "loss_log.txt").write_text("\n".join(lines) + "\n")
    (out / "summary.txt").write_text(
        f"eval_loss_before\t{result.eval_before:.6e}\neval_loss_after\t{result.eval_after:.6e}\n"
        f"base_hash_before\t{result.base_hash_before}\nbase_hash_after\t{result.base_hash_after}\n")
    write_manifest(out, cfg, "train-single", {"data": str(args.data)})
    return out


def cmd_fuse(args) -> Path:
    from .fusion import format_residuals
    from .pipeline.fuse import fuse_model
    cfg = config_from_args(args)
    cks = [AdapterCheckpoint.load(p) for p in args.checkpoints]
    fused = fuse_model(cks, _base(cfg), mu=cfg.fusion_mu, n_probe_timesteps=cfg.probe_timesteps, seed=cfg.seed)
    if not all(torch.isfinite(d).all() for d in fused.deltas.values()):
        raise NumericalError("non-finite fused update")
    out = run_dir(cfg, "fuse", {"checkpoints": [_sha(Path(p)) for p in args.checkpoints]})
    fused.save(out / "fused.safetensors")
    (out / "residuals.txt").write_text(format_residuals(fused.residuals, fused.concept_names))
    write_manifest(out, cfg, "fuse", {"checkpoints": [str(p) for p in args.checkpoints]})
    return out


def cmd_generate(args) -> Path:
    from .pipeline.generate import generate_single
    cfg = config_from_args(args)
    model = AdapterCheckpoint.load(args.checkpoint).materialize(_base(cfg))
    img, _ = generate_single(model, args.prompt, cfg.seed, cfg.sampler_steps)
    out = run_dir(cfg, "generate", {"checkpoint": _sha(Path(args.checkpoint)), "prompt": args.prompt})
    _save_png(img, out / "image.png")
    write_manifest(out, cfg, "generate", {"checkpoint": str(args.checkpoint), "prompt": args.prompt})
    return out


def cmd_generate_multi(args) -> Path:
    from .pipeline.generate import MultiOptions, generate_multi
    cfg = config_from_args(args)
    model = FusedCheckpoint.load(args.fused).materialize(_base(cfg))
    out = run_dir(cfg, "generate-multi", {"fused": _sha(Path(args.fused)), "prompt": args.prompt})
    opts = MultiOptions.from_config(cfg, dump_dir=out / "masks" if args.dump_masks else None)
    res = generate_multi(model, args.prompt, cfg.seed, opts)
    if not torch.isfinite(res.trajectory[-1]).all():
        raise NumericalError("non-finite latent")
    _save_png(res.image, out / "image.png")
    lines = ["step\tlayout_loss\tphi\tiou"] + [
        f"{r['step']}\t{r['layout_loss']:.6f}\t{r['phi']:.4f}\t" + ",".join(f"{v:.4f}" for v in r["iou"])
        for r in res.layout_log]
    (out / "layout_log.txt").write_text("\n".join(lines) + "\n")
    (out / "diagnostics.txt").write_text(
        f"concepts\t{','.join(res.concepts)}\nreference_branches\t{res.n_reference_branches}\n"
        f"sama_steps\t{','.join(map(str, res.sama_steps))}\n"
        f"final_anchor_iou\t{','.join(f'{v:.6f}' for v in res.final_iou)}\n")
    write_manifest(out, cfg, "generate-multi", {"fused": str(args.fused), "prompt": args.prompt})
    return out


def cmd_eval(args) -> Path:
    from .pipeline.metrics import MetricReport, clip_t_score, dino_score
    from .testbed.data import load_dataset
    cfg = config_from_args(args)
    images = [np.asarray(Image.open(p).convert("RGB")) for p in args.images]
    dino = {}
    for item in args.reference:
        name, _, root = item.partition("=")
        if not root:
            raise ConfigError(f"--reference expects NAME=DATASET_DIR, got {item!r}")
        dino[name] = dino_score(images, list(load_dataset(root, allow_mask_fallback=True).images), args.backend)
    report = MetricReport(dino, clip_t_score(images, [args.prompt] * len(images), args.backend),
                          notes={"backend": args.backend})
    out = run_dir(cfg, "eval", {"images": [_sha(Path(p)) for p in args.images], "prompt": args.prompt})
    (out / "report.txt").write_text(report.to_text())
    write_manifest(out, cfg, "eval", {"images": [str(p) for p in args.images], "prompt": args.prompt,
                                      "reference": args.reference})
    return out


# ---- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptfuse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="render a synthetic concept dataset")
    p.add_argument("--concept", default="dogA", help=f"builtin concept: {', '.join(sorted(BUILTIN_CONCEPTS))}")
    p.add_argument("--spec", help="JSON concept description (overrides --concept)")
    p.add_argument("--n-images", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train-single", help="learn one concept")
    p.add_argument("--data", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_single)

    p = sub.add_parser("fuse", help="merge single-concept checkpoints")
    p.add_argument("--checkpoints", nargs="+", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("generate", help="sample from a single-concept checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("generate-multi", help="multi-concept sampling from a fused checkpoint")
    p.add_argument("--fused", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--dump-masks", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_generate_multi)

    p = sub.add_parser("eval", help="identity / alignment / F1 report for generated images")
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--reference", action="append", default=[], required=True, help="NAME=DATASET_DIR")
    p.add_argument("--backend", default="stub")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, ConceptError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FusionError, NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
