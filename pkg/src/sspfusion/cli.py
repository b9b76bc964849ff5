"""Command line entry point: fuse, eval, train, pretrain, structure-map.

Exit codes: 0 success, 1 one or more items failed, 2 checkpoint missing,
3 dataset empty or unreadable, 64 usage error, 65 invalid configuration.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .imagedata import (
    DatasetSplit,
    ImageIOError,
    read_image,
    rgb_to_yuv,
    save_png,
    yuv_to_rgb,
)
from .metrics import evaluate_dataset
from .structmap import Polarity, structure_pyramid_gt

log = logging.getLogger("sspfusion")

EXIT_OK, EXIT_FAILED, EXIT_NO_CHECKPOINT, EXIT_NO_DATA = 0, 1, 2, 3
EXIT_USAGE, EXIT_CONFIG = 64, 65
ENV_PREFIX = "SSPFUSION_"


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {s!r}")


def _common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", type=Path, default=d(None), help="JSON file with TrainConfig keys")
    parser.add_argument("--seed", type=int, default=d(None))
    parser.add_argument("--jobs", type=int, default=d(1), help="parallel per-pair workers")
    parser.add_argument("--out", type=Path, default=d(None), help="output directory")


TRAIN_FLAGS = {
    "lr_init": float,
    "epochs_main": int,
    "epochs_pretrain": int,
    "crop": int,
    "alpha": float,
    "epsilon": float,
    "n_levels": int,
    "batch_size": int,
    "base_channels": int,
    "residual_blocks_per_level": int,
    "max_steps": int,
    "pretrain_steps": int,
    "max_pairs": int,
    "checkpoint_every": int,
    "sfe_enabled": _bool,
    "spf_enabled": _bool,
    "merge": str,
    "polarity": str,
}


def build_parser() -> ArgumentParser:
    p = ArgumentParser(prog="sspfusion", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    _common(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fuse", help="fuse every pair of a dataset with a trained checkpoint")
    _common(f, suppress=True)
    f.add_argument("--checkpoint", type=Path, required=True)
    f.add_argument("--data", type=Path, required=True, help="dataset root with ir/ and vi/")
    f.add_argument("--spf-enabled", type=_bool, default=None, help="override the checkpoint's SPF flag")

    e = sub.add_parser("eval", help="score fused images with MI, SF, AG, VIF, Qabf, SSIM")
    _common(e, suppress=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--fused", type=Path, required=True, help="directory of <pair_id>.png fused images")
    e.add_argument("--name", default=None, help="dataset name recorded in the report")
    e.add_argument("--checkpoint-id", default=None)

    s = sub.add_parser("structure-map", help="export the binary structure pyramid of one image")
    _common(s, suppress=True)
    s.add_argument("--image", type=Path, required=True)
    s.add_argument("--levels", type=int, default=3)
    s.add_argument("--polarity", choices=[x.value for x in Polarity], default=Polarity.EDGE.value)

    for name, helptext in (("train", "joint fusion training"), ("pretrain", "structure-head pretraining")):
        t = sub.add_parser(name, help=helptext)
        _common(t, suppress=True)
        t.add_argument("--data", type=Path, required=True)
        t.add_argument("--profile", choices=("desk", "full"), default="desk")
        t.add_argument("--run-dir", type=Path, default=None, help="explicit run directory")
        for key, typ in TRAIN_FLAGS.items():
            t.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None)
        if name == "train":
            t.add_argument("--init", type=Path, default=None, help="warm-start checkpoint (e.g. from pretrain)")
            t.add_argument("--resume", action="store_true", help="continue from <run-dir>/state.npz")
    return p


def _env_overrides(names) -> dict:
    out = {}
    for key in names:
        raw = os.environ.get(ENV_PREFIX + key.upper())
        if raw is None:
            continue
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def resolve_train_config(args):
    """profile defaults < --config file < SSPFUSION_* env vars < command-line flags."""
    from .trainer import TrainConfig

    base = TrainConfig.desk() if args.profile == "desk" else TrainConfig()
    layers = {}
    if args.config is not None:
        layers.update(json.loads(Path(args.config).read_text()))
    layers.update(_env_overrides(TrainConfig.field_names()))
    layers.update({k: getattr(args, k) for k in TRAIN_FLAGS if getattr(args, k, None) is not None})
    if args.seed is not None:
        layers["seed"] = args.seed
    return TrainConfig.from_dict(layers, base)


def write_manifest(out_dir: Path, command: str, config: dict, inputs: dict, outputs: list, seed, t0: float, **extra) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": [str(o) for o in outputs],
        "seed": seed,
        "version": __version__,
        "wall_time_s": round(time.time() - t0, 3),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def _require_out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required for this command")
    return args.out


def cmd_fuse(args) -> int:
    import torch

    from .network import fuse_pair, load_checkpoint

    t0 = time.time()
    out = _require_out(args)
    if not args.checkpoint.is_file():
        log.error("checkpoint not found: %s", args.checkpoint)
        return EXIT_NO_CHECKPOINT
    try:
        split = DatasetSplit.from_root(args.data)
    except ImageIOError as exc:
        log.error("%s", exc)
        return EXIT_NO_DATA
    if not len(split):
        log.error("dataset %s has no pairs", args.data)
        return EXIT_NO_DATA
    torch.manual_seed(args.seed or 0)
    model, extra = load_checkpoint(args.checkpoint)
    model.eval()
    spf = args.spf_enabled
    if spf is None:
        spf = json.loads(str(extra["train_config"])).get("spf_enabled", True) if "train_config" in extra else True

    def work(pid):
        pair = split.load(pid)
        fused_y = fuse_pair(model, pair, spf_enabled=spf)
        path = out / f"{pid}.png"
        save_png(yuv_to_rgb(fused_y, pair.vi_uv), path)
        return path

    def safe(pid):
        try:
            return work(pid), None
        except Exception as exc:  # logged per pair, the rest still run
            log.error("pair %s failed: %s", pid, exc)
            return None, pid

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(safe, split.pair_ids))
    outputs = [r for r, _ in results if r is not None]
    failed = [pid for _, pid in results if pid is not None]
    write_manifest(
        out, "fuse", {"spf_enabled": spf, "model_config": asdict(model.cfg)},
        {"checkpoint": args.checkpoint, "data": args.data}, outputs, args.seed, t0, failed=failed,
    )
    log.info("fused %d pairs into %s (%d failed)", len(outputs), out, len(failed))
    return EXIT_FAILED if failed else EXIT_OK


def _fused_index(fused_dir: Path) -> dict[str, Path]:
    if not fused_dir.is_dir():
        return {}
    return {p.stem: p for p in sorted(fused_dir.iterdir()) if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")}


def _luma(path: Path) -> np.ndarray:
    rgb = read_image(path, "RGB")
    return rgb_to_yuv(rgb)[..., 0]


def cmd_eval(args) -> int:
    from .plotting import plot_metric_report

    t0 = time.time()
    out = _require_out(args)
    try:
        split = DatasetSplit.from_root(args.data)
    except ImageIOError as exc:
        log.error("%s", exc)
        return EXIT_NO_DATA
    if not len(split):
        log.error("dataset %s has no pairs", args.data)
        return EXIT_NO_DATA
    fused = _fused_index(args.fused)
    triples, ids, missing = [], [], []
    for pid in split.pair_ids:
        if pid not in fused:
            log.error("no fused image for pair %s", pid)
            missing.append({"pair_id": pid, "error": "missing fused image"})
            continue
        try:
            pair = split.load(pid)
            triples.append((pair.ir_y, pair.vi_y, _luma(fused[pid])))
            ids.append(pid)
        except Exception as exc:
            log.error("pair %s failed to load: %s", pid, exc)
            missing.append({"pair_id": pid, "error": f"{type(exc).__name__}: {exc}"})
    if not triples:
        log.error("nothing to evaluate")
        return EXIT_FAILED
    meta = {"dataset": args.name or args.data.name, "checkpoint": args.checkpoint_id}
    report = evaluate_dataset(triples, ids, meta, jobs=args.jobs)
    report.skipped = sorted(report.skipped + missing, key=lambda s: s["pair_id"])
    outputs = [
        report.write_csv(out / "report.csv"),
        report.write_json(out / "report.json"),
        plot_metric_report(report, out / "metrics.png"),
    ]
    write_manifest(out, "eval", {}, {"data": args.data, "fused": args.fused}, outputs, args.seed, t0,
                   skipped=report.skipped)
    for name, val in report.aggregate.items():
        log.info("%-5s %.4f", name, val)
    return EXIT_FAILED if report.skipped else EXIT_OK


def cmd_structure_map(args) -> int:
    from .plotting import plot_structure_pyramid

    t0 = time.time()
    out = _require_out(args)
    try:
        img = _luma(args.image)
    except ImageIOError as exc:
        log.error("%s", exc)
        return EXIT_NO_DATA
    try:
        pyr = structure_pyramid_gt(img, args.levels, args.polarity)
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_FAILED
    outputs = []
    for k, lvl in enumerate(pyr.levels, start=1):
        path = out / f"{args.image.stem}_level{k}.png"
        save_png(lvl.astype(np.float64), path)
        outputs.append(path)
    outputs.append(plot_structure_pyramid(img, pyr.levels, out / f"{args.image.stem}_pyramid.png"))
    write_manifest(out, "structure-map", {"levels": args.levels, "polarity": args.polarity},
                   {"image": args.image}, outputs, args.seed, t0)
    return EXIT_OK


def _train_common(args, command: str):
    from .trainer import default_run_dir

    config = resolve_train_config(args)
    split = DatasetSplit.from_root(args.data)
    if not len(split):
        raise ImageIOError(f"dataset {args.data} has no pairs")
    if args.run_dir is not None:
        run_dir = args.run_dir
    else:
        run_dir = default_run_dir(args.out or Path("runs"), config, command)
    return config, split, Path(run_dir)


def cmd_train(args, command: str = "train") -> int:
    from .plotting import plot_loss_curves
    from .trainer import pretrain_sfe, read_loss_log, train_fusion

    t0 = time.time()
    try:
        config, split, run_dir = _train_common(args, command)
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    except ImageIOError as exc:
        log.error("%s", exc)
        return EXIT_NO_DATA
    if command == "pretrain":
        result = pretrain_sfe(config, split, run_dir)
    else:
        init = getattr(args, "init", None)
        if init is not None and not Path(init).is_file():
            log.error("init checkpoint not found: %s", init)
            return EXIT_NO_CHECKPOINT
        result = train_fusion(config, split, run_dir, init=init, resume=getattr(args, "resume", False))
    curve = plot_loss_curves(read_loss_log(result.log_path), run_dir / f"{result.log_path.stem}_curve.png", command)
    write_manifest(
        run_dir, command, asdict(config), {"data": args.data}, [result.checkpoint, result.log_path, curve],
        config.seed, t0, ablation={"sfe_enabled": config.sfe_enabled, "spf_enabled": config.spf_enabled},
        final_losses=result.final, steps=result.steps,
    )
    log.info("%s finished: %s", command, result.checkpoint)
    print(result.checkpoint)
    return EXIT_OK


COMMANDS = {
    "fuse": cmd_fuse,
    "eval": cmd_eval,
    "structure-map": cmd_structure_map,
    "train": lambda a: cmd_train(a, "train"),
    "pretrain": lambda a: cmd_train(a, "pretrain"),
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sspfusion: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
