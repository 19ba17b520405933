"""Command-line entry point: ``forestwsl {synth,sample,train,predict,eval,bench}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Set ``FORESTWSL_THREADS`` to cap BLAS threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__, seeding
from . import config as cfgmod
from .config import ConfigError, ExperimentConfig
from .metrics_eval import confusion, dumps_report, evaluation_records, format_table, prf
from .patch_pipeline import Extent, extract_patches, mask_labels, save_patchset, split_scene
from .raster_core import FOREST, ClassMap, Raster, export_png, read_classmap, read_raster, write_classmap, write_raster
from .self_training import predict_map, refine_loop
from .synth_scene import degrade_labels, generate_truth, render_sar
from .training import TrainResult, train, write_history
from .unet_model import build, load_checkpoint, save_checkpoint

log = logging.getLogger("forestwsl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--profile", help="named defaults: tiny or full")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true")


def _scene_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--size", type=int)
    p.add_argument("--forest-fraction", type=float)
    p.add_argument("--blob-scale", type=int)
    p.add_argument("--looks", type=int)
    p.add_argument("--coarse-factor", type=int)
    p.add_argument("--flip-rate", type=float)
    p.add_argument("--jitter-radius", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="forestwsl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"forestwsl {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic scene pair")
    _common(p)
    _scene_flags(p)

    p = sub.add_parser("sample", help="extract a patch set from a scene")
    _common(p)
    p.add_argument("--sar", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--count", type=int, dest="train_patches")
    p.add_argument("--patch", type=int)
    p.add_argument("--keep-fraction", type=float)
    p.add_argument("--region", choices=("all", "train", "val"), default="all")

    p = sub.add_parser("train", help="train one model (inaccurate mode runs the refinement loop)")
    _common(p)
    p.add_argument("--mode", required=True, choices=("dense", "incomplete", "inaccurate"))
    p.add_argument("--sar", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--truth", help="optional ground truth for per-round metrics")
    p.add_argument("--keep-fraction", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--max-rounds", type=int)

    p = sub.add_parser("predict", help="tiled map prediction")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sar", required=True)
    p.add_argument("--tile", type=int)
    p.add_argument("--overlap", type=int)

    p = sub.add_parser("eval", help="per-class precision/recall/F1 report")
    _common(p)
    p.add_argument("--truth", required=True)
    p.add_argument("--pred", action="append", required=True, metavar="METHOD=PATH")

    p = sub.add_parser("bench", help="dense vs incomplete vs inaccurate on one synthetic scene pair")
    _common(p)
    _scene_flags(p)
    return parser


_NON_CONFIG = {"command", "config", "out", "set", "verbose", "sar", "labels", "truth", "region", "checkpoint", "pred", "mode"}


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides: dict[str, object] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip().replace("-", "_")] = value
    for key, value in vars(args).items():
        if key not in _NON_CONFIG and value is not None:
            overrides[key] = value
    return cfgmod.load(args.config, overrides)


def _prepare_out(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = cfg.to_text() + f"version={__version__}\n"
    (out / "config.txt").write_text(text, encoding="utf-8")
    return out


def _require(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"input not found: {p}")
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def synthesize(cfg: ExperimentConfig, out: Path) -> dict[str, object]:
    scenes: dict[str, object] = {}
    for which in ("train", "test"):
        spec = cfg.scene_spec(which)
        truth = generate_truth(spec)
        sar = render_sar(truth, spec)
        prefix = "" if which == "train" else "test_"
        write_classmap(truth, out / f"{prefix}truth.wslr")
        write_raster(sar, out / f"{prefix}sar.wslr")
        export_png(truth, out / f"{prefix}truth.png")
        scenes[f"{prefix}truth"], scenes[f"{prefix}sar"] = truth, sar
    noisy = degrade_labels(scenes["truth"], cfg.noise_spec())
    write_classmap(noisy, out / "noisy_labels.wslr")
    export_png(noisy, out / "noisy_labels.png")
    scenes["noisy"] = noisy
    return scenes


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(args, cfg)
    synthesize(cfg, out)
    print(f"wrote scene pair to {out}")
    return 0


def cmd_sample(args) -> int:
    cfg = resolve_config(args)
    sar = read_raster(_require(args.sar))
    labels = read_classmap(_require(args.labels))
    extent = Extent.full(sar.height, sar.width)
    if args.region != "all":
        extent = split_scene(extent, cfg.split_fraction, cfg.patch)[0 if args.region == "train" else 1]
    seed = seeding.derive_seed(cfg.seed, "sampling", args.region)
    patches = extract_patches(sar, labels, cfg.patch, cfg.train_patches, seed, extent)
    if args.keep_fraction is not None:
        patches = mask_labels(patches, cfg.keep_fraction, seeding.derive_seed(cfg.seed, "mask", args.region))
    out = _prepare_out(args, cfg)
    save_patchset(patches, out, seed)
    print(f"wrote {len(patches)} patches to {out}")
    return 0


def train_supervised(cfg: ExperimentConfig, sar: Raster, labels: ClassMap, keep_fraction: float | None) -> TrainResult:
    """Dense training, or sparse training when ``keep_fraction`` is given."""
    train_ext, val_ext = split_scene(Extent.full(sar.height, sar.width), cfg.split_fraction, cfg.patch)
    train_set = extract_patches(sar, labels, cfg.patch, cfg.train_patches, seeding.derive_seed(cfg.seed, "sampling", "train"), train_ext)
    val_set = extract_patches(sar, labels, cfg.patch, cfg.val_patches, seeding.derive_seed(cfg.seed, "sampling", "val"), val_ext)
    mode = "dense"
    if keep_fraction is not None:
        train_set = mask_labels(train_set, keep_fraction, seeding.derive_seed(cfg.seed, "mask", "train"))
        val_set = mask_labels(val_set, keep_fraction, seeding.derive_seed(cfg.seed, "mask", "val"))
        mode = "sparse"
    model = build(cfg.unet_config(), seeding.derive_seed(cfg.seed, "init"))
    # Both supervised modes share one training stream so keep_fraction=1 reproduces dense exactly.
    return train(model, train_set, val_set, cfg.train_config("supervised"), mode=mode)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    sar = read_raster(_require(args.sar))
    labels = read_classmap(_require(args.labels))
    out = _prepare_out(args, cfg)
    if args.mode == "inaccurate":
        truth = read_classmap(_require(args.truth)) if args.truth else None
        result = refine_loop(sar, labels, cfg.refine_config(), truth=truth, run_dir=out)
        save_checkpoint(result.model, out / "checkpoint.wslm")
        write_classmap(result.labels, out / "final_labels.wslr")
        state = "converged" if result.converged else "NOT converged"
        print(f"{state} after {len(result.rounds)} rounds; final change fraction {result.rounds[-1].change_fraction:.4f}")
        return 0
    keep = cfg.keep_fraction if args.mode == "incomplete" else None
    result = train_supervised(cfg, sar, labels, keep)
    save_checkpoint(result.model, out / "checkpoint.wslm")
    write_history(result.history, out / "history.jsonl")
    print(f"best epoch {result.best_epoch}, val F1 {result.history[result.best_epoch].val_f1}")
    return 0


def cmd_predict(args) -> int:
    cfg = resolve_config(args)
    model = load_checkpoint(_require(args.checkpoint))
    sar = read_raster(_require(args.sar))
    out = _prepare_out(args, cfg)
    probs, classes = predict_map(model, sar, cfg.tile, cfg.overlap)
    write_raster(probs, out / "probs.wslr")
    write_classmap(classes, out / "classes.wslr")
    export_png(classes, out / "map.png")
    print(f"wrote prediction to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    truth = read_classmap(_require(args.truth))
    preds: dict[str, ClassMap] = {}
    for item in args.pred:
        method, sep, path = item.partition("=")
        if not sep:
            raise UsageError(f"--pred expects METHOD=PATH, got {item!r}")
        preds[method] = read_classmap(_require(path))
    out = _prepare_out(args, cfg)
    records = evaluation_records(preds, truth, cfg.seed, cfg.hash())
    (out / "evaluation.json").write_text(dumps_report(records), encoding="utf-8")
    print(format_table(records))
    return 0


def run_bench(cfg: ExperimentConfig, out: Path) -> dict:
    """All three training regimes on one scene pair; writes evaluation.json and bench.json."""
    t0 = time.perf_counter()
    scenes = synthesize(cfg, out)
    sar, truth, noisy = scenes["sar"], scenes["truth"], scenes["noisy"]
    test_sar, test_truth = scenes["test_sar"], scenes["test_truth"]

    def evaluate(name: str, model) -> ClassMap:
        probs, classes = predict_map(model, test_sar, cfg.tile, cfg.overlap)
        write_raster(probs, out / f"{name}_probs.wslr")
        write_classmap(classes, out / f"{name}_map.wslr")
        export_png(classes, out / f"{name}_map.png")
        return classes

    preds: dict[str, ClassMap] = {}
    summary: dict[str, object] = {"seed": cfg.seed, "config_hash": cfg.hash()}
    for method, keep in (("dense", None), ("incomplete", cfg.keep_fraction)):
        result = train_supervised(cfg, sar, truth, keep)
        save_checkpoint(result.model, out / f"{method}.wslm")
        write_history(result.history, out / f"{method}_history.jsonl")
        preds[method] = evaluate(method, result.model)
        log.info("%s done at %.0fs", method, time.perf_counter() - t0)

    refine = refine_loop(sar, noisy, cfg.refine_config(), truth=truth, run_dir=out / "inaccurate_rounds")
    save_checkpoint(refine.model, out / "inaccurate.wslm")
    preds["inaccurate"] = evaluate("inaccurate", refine.model)
    first = load_checkpoint(out / "inaccurate_rounds" / refine.rounds[0].checkpoint)
    noisy_once = evaluate("noisy_once", first)
    log.info("inaccurate done at %.0fs", time.perf_counter() - t0)

    records = evaluation_records(preds, test_truth, cfg.seed, cfg.hash())
    (out / "evaluation.json").write_text(dumps_report(records), encoding="utf-8")
    summary.update(
        {
            "rounds": len(refine.rounds),
            "converged": refine.converged,
            "change_fractions": [r.change_fraction for r in refine.rounds],
            "noisy_once_forest_f1": prf(confusion(noisy_once, test_truth), FOREST).f1,
            "forest_f1": {
                m: next(r["f1"] for r in records if r["method"] == m and r["class"] == "forest") for m in preds
            },
        }
    )
    (out / "bench.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"records": records, "summary": summary}


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(args, cfg)
    t0 = time.perf_counter()
    result = run_bench(cfg, out)
    print(format_table(result["records"]))
    s = result["summary"]
    print(
        f"refinement: {s['rounds']} rounds, converged={s['converged']}, "
        f"noisy-once forest F1 {s['noisy_once_forest_f1']:.3f}; {time.perf_counter() - t0:.0f}s"
    )
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "sample": cmd_sample,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def _limit_threads() -> None:
    threads = os.environ.get("FORESTWSL_THREADS")
    if not threads:
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("FORESTWSL_THREADS set but threadpoolctl is not installed; ignoring")
        return
    threadpool_limits(int(threads))


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand; choose from " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        _limit_threads()
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - one-line message, exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
