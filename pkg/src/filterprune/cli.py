"""Command-line entry point: one subcommand per pipeline stage.

Exit codes:
  0  success
  1  runtime failure (e.g. training diverged)
  2  usage error (unknown flag, bad value)
  3  missing input file
  4  config parse error
  5  malformed model file
  6  inconsistent pruning plan or shapes
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, dataio, graph as mg, pruning, ranking, trainer
from .engine import ShapeError

EXIT_RUNTIME, EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG, EXIT_MODEL, EXIT_PLAN = 1, 2, 3, 4, 5, 6

log = logging.getLogger("filterprune")


class CliError(Exception):
    def __init__(self, code, kind, message):
        super().__init__(message)
        self.code = code
        self.kind = kind


# ---------------------------------------------------------------- helpers


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _manifest(args, out_path, extra=None):
    """Resolved parameters next to the primary output, enough to re-run it."""
    params = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    doc = {"tool": "filterprune", "version": __version__, "command": args.command, "params": params}
    if extra:
        doc.update(extra)
    out = Path(str(out_path) + ".manifest.json")
    _write(out, json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")


def _datasets(args):
    if args.dataset == "cifar10":
        if not args.cifar_dir:
            raise CliError(EXIT_USAGE, "usage", "--cifar-dir is required with --dataset cifar10")
        return dataio.load_cifar10(args.cifar_dir)
    if args.synthetic_config:
        spec = dataio.load_synthetic_spec(args.synthetic_config)
    else:
        spec = dataio.SyntheticSpec()
    overrides = {}
    if args.preset:
        overrides["per_class_counts"] = dataio.PRESETS[args.preset]
    if args.image_size:
        overrides["image_size"] = (3, args.image_size, args.image_size)
    if args.noise_std is not None:
        overrides["noise_std"] = args.noise_std
    if args.data_seed is not None:
        overrides["seed"] = args.data_seed
    if overrides:
        from dataclasses import replace
        spec = replace(spec, **overrides)
    return dataio.generate_synthetic(spec)


def _train_config(args, default_epochs):
    return trainer.TrainConfig(
        epochs=args.epochs or default_epochs, batch_size=args.batch_size, lr=args.lr,
        momentum=args.momentum, weight_decay=args.weight_decay, seed=args.seed,
        augmentation=args.augment,
    )


# ---------------------------------------------------------------- commands


def cmd_train_baseline(args):
    train_set, val_set = _datasets(args)
    g = mg.build_architecture(args.arch, train_set.images.shape[1:], train_set.num_classes)
    w = mg.init_weights(g, args.seed)
    w, curve = trainer.train(g, w, train_set, _train_config(args, trainer.TrainConfig().epochs),
                             progress=lambda e, l: log.info("epoch %d loss %.4f", e, l))
    mg.save_model(g, w, args.out)
    _manifest(args, args.out, {"loss_curve": curve})
    print(f"saved {args.out}; final loss {curve[-1]:.4f}")


def cmd_finetune(args):
    g, w = mg.load_model(args.model)
    train_set, _ = _datasets(args)
    w, curve = trainer.train(g, w, train_set, _train_config(args, 2),
                             progress=lambda e, l: log.info("epoch %d loss %.4f", e, l))
    mg.save_model(g, w, args.out)
    _manifest(args, args.out, {"loss_curve": curve})
    print(f"saved {args.out}; final loss {curve[-1]:.4f}")


def cmd_rank(args):
    g, w = mg.load_model(args.model)
    method = ranking.canonical_method(args.method)
    batch = None
    if method != "L1":
        train_set, _ = _datasets(args)
        batch, _ = dataio.sample_batch(train_set, min(args.rank_batch, len(train_set)), args.seed)
    rv = ranking.compute_rank(method, g, w, batch, args.seed)
    _write(args.out, rv.to_csv())
    _manifest(args, args.out)
    print(f"wrote {args.out}")


def cmd_prune(args):
    g, w = mg.load_model(args.model)
    rv = ranking.RankVector.from_csv(Path(args.ranks).read_text(encoding="utf-8"))
    rates = pruning.load_rates(args.rates)
    plan = pruning.select_top_filters(rv, rates, g)
    pg, pw = pruning.construct_pruned(g, w, plan)
    mg.save_model(pg, pw, args.out)
    report = mg.count_flops_params(pg).with_baseline(mg.count_flops_params(g))
    stem = Path(args.out).with_suffix("")
    _write(str(stem) + ".plan.txt", plan.to_text())
    _write(str(stem) + ".flops.csv", report.to_csv())
    _manifest(args, args.out)
    print(report.summary())


def cmd_eval(args):
    g, w = mg.load_model(args.model)
    _, val_set = _datasets(args)
    rep = trainer.evaluate(g, w, val_set)
    lines = ["metric,value"] + [f"{m},{v:.6f}" for m, v in rep.as_dict().items()]
    lines += ["", "confusion_matrix"] + [",".join(str(v) for v in row) for row in rep.confusion_matrix]
    _write(args.out, "\n".join(lines) + "\n")
    _manifest(args, args.out)
    for m, v in rep.as_dict().items():
        print(f"{m:18s} {v:8.3f}")


def cmd_stability(args):
    g, w = mg.load_model(args.model)
    train_set, _ = _datasets(args)
    seeds = [args.seed + i for i in range(args.repetitions)]
    rep = analysis.stability_fraction(g, w, args.method, train_set, args.repetitions, args.q, seeds,
                                      args.rank_batch)
    _write(args.out, rep.to_csv())
    _manifest(args, args.out)
    print(f"mean top {rep.top_fraction.mean():.4f}  mean least {rep.least_fraction.mean():.4f}")


def cmd_gradcam(args):
    g, w = mg.load_model(args.model)
    _, val_set = _datasets(args)
    if not 0 <= args.index < len(val_set):
        raise CliError(EXIT_USAGE, "usage", f"--index outside [0, {len(val_set)})")
    target = args.target if args.target is not None else int(val_set.labels[args.index])
    cam = analysis.gradcam(g, w, val_set.images[args.index], target)
    pgm, csv_path = analysis.write_gradcam(cam, args.out_dir, f"gradcam_{args.index}")
    _manifest(args, pgm)
    print(f"wrote {pgm} and {csv_path}")


def cmd_flops(args):
    if args.model:
        g, _ = mg.load_model(args.model)
    else:
        g = mg.build_architecture(args.arch, (3, args.input_size, args.input_size), args.num_classes)
    report = mg.count_flops_params(g)
    if args.baseline:
        report = report.with_baseline(mg.count_flops_params(mg.load_model(args.baseline)[0]))
    if args.out:
        _write(args.out, report.to_csv())
        _manifest(args, args.out)
    print(report.summary())
    print(f"total_flops={report.total_flops} total_params={report.total_params}")


def cmd_bench(args):
    shape = None
    base = analysis.bench(args.baseline, shape, args.repetitions, args.warmup)
    pruned = analysis.bench(args.model, shape, args.repetitions, args.warmup)
    rep = analysis.BenchReport(base, pruned, args.dataset_label)
    _write(args.out, rep.to_csv())
    _manifest(args, args.out)
    print(f"time -{rep.time_reduction:.1f}%  memory -{rep.mem_reduction:.1f}%")


def cmd_experiment(args):
    cfg = trainer.load_experiment_config(args.config)
    if args.seed is not None:
        from dataclasses import replace
        cfg = replace(cfg, seed=args.seed)
    result = trainer.run_experiment(cfg, jobs=args.jobs)
    _write(args.out, result.to_csv())
    _manifest(args, args.out, {"resolved_config": cfg.resolved()})
    print(result.seed_table())


# ---------------------------------------------------------------- parser


def _add_data(p):
    g = p.add_argument_group("data")
    g.add_argument("--dataset", choices=("synthetic", "cifar10"), default="synthetic")
    g.add_argument("--cifar-dir", default="")
    g.add_argument("--synthetic-config", help="key = value synthetic spec file")
    g.add_argument("--preset", choices=sorted(dataio.PRESETS), help="synthetic class-count preset")
    g.add_argument("--image-size", type=int, help="synthetic image side length")
    g.add_argument("--noise-std", type=float)
    g.add_argument("--data-seed", type=int)


def _add_train(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--lr", type=float, default=0.01)
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--weight-decay", type=float, default=5e-4)
    g.add_argument("--augment", action="store_true", help="random flip + crop")


def build_parser():
    p = argparse.ArgumentParser(
        prog="filterprune",
        description="Structured filter pruning with L1, Beta-Rank and HRank-style scores.",
        epilog="exit codes: 0 ok, 1 runtime failure, 2 usage, 3 missing file, 4 config parse error, "
               "5 malformed model file, 6 inconsistent plan/shapes",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--seed", type=int, default=0)
        return sp

    sp = add("train-baseline", cmd_train_baseline, "train a model from scratch")
    sp.add_argument("--arch", choices=mg.FAMILIES, default="vgg-small")
    sp.add_argument("--out", required=True)
    _add_data(sp)
    _add_train(sp)

    sp = add("rank", cmd_rank, "score every conv filter")
    sp.add_argument("--model", required=True)
    sp.add_argument("--method", default="beta", help="l1 | beta | hrank")
    sp.add_argument("--rank-batch", type=int, default=64)
    sp.add_argument("--out", required=True)
    _add_data(sp)

    sp = add("prune", cmd_prune, "select filters and build the pruned model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--ranks", required=True, help="rank CSV from 'rank'")
    sp.add_argument("--rates", required=True, help="rates file or shipped preset name")
    sp.add_argument("--out", required=True)

    sp = add("finetune", cmd_finetune, "fine-tune a (pruned) model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    _add_data(sp)
    _add_train(sp)

    sp = add("eval", cmd_eval, "accuracy and macro precision/recall/specificity")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    _add_data(sp)

    sp = add("stability", cmd_stability, "ranking stability over repeated batches")
    sp.add_argument("--model", required=True)
    sp.add_argument("--method", default="beta")
    sp.add_argument("--repetitions", type=int, default=3)
    sp.add_argument("--q", type=float, default=0.25)
    sp.add_argument("--rank-batch", type=int, default=64)
    sp.add_argument("--out", required=True)
    _add_data(sp)

    sp = add("gradcam", cmd_gradcam, "Grad-CAM heatmap for one validation image")
    sp.add_argument("--model", required=True)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--target", type=int)
    sp.add_argument("--out-dir", required=True)
    _add_data(sp)

    sp = add("flops", cmd_flops, "FLOP and parameter counts")
    sp.add_argument("--model")
    sp.add_argument("--arch", choices=mg.FAMILIES, default="resnet56")
    sp.add_argument("--input-size", type=int, default=32)
    sp.add_argument("--num-classes", type=int, default=10)
    sp.add_argument("--baseline", help="baseline model for reduction percentages")
    sp.add_argument("--out")

    sp = add("bench", cmd_bench, "single-image inference time and peak tensor memory")
    sp.add_argument("--model", required=True, help="pruned model")
    sp.add_argument("--baseline", required=True)
    sp.add_argument("--repetitions", type=int, default=5)
    sp.add_argument("--warmup", type=int, default=1)
    sp.add_argument("--dataset-label", default="")
    sp.add_argument("--out", required=True)

    sp = add("experiment", cmd_experiment, "full rank/prune/fine-tune/eval comparison")
    sp.set_defaults(seed=None)
    sp.add_argument("--config", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as e:
        code, kind, msg = e.code, e.kind, str(e)
    except FileNotFoundError as e:
        code, kind, msg = EXIT_MISSING, "missing-file", str(e)
    except dataio.ConfigError as e:
        code, kind, msg = EXIT_CONFIG, "config", str(e)
    except mg.ModelFormatError as e:
        code, kind, msg = EXIT_MODEL, "model-format", str(e)
    except (pruning.PlanError, ShapeError) as e:
        code, kind, msg = EXIT_PLAN, "plan", str(e)
    except ValueError as e:
        code, kind, msg = EXIT_USAGE, "usage", str(e)
    except Exception as e:  # noqa: BLE001
        code, kind, msg = EXIT_RUNTIME, "runtime", f"{type(e).__name__}: {e}"
    else:
        return 0
    print(f"error: {kind}: {' '.join(msg.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
