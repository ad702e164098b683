"""Baseline training, post-pruning fine-tuning and imbalance-aware evaluation."""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import dataio
from .engine import NonFiniteError, loss_and_grads, predict, sgd_step, softmax_cross_entropy
from .graph import build_architecture, count_flops_params, init_weights, load_model
from .pruning import construct_pruned, load_rates, select_top_filters
from .ranking import canonical_method, compute_rank

log = logging.getLogger(__name__)

METRICS = ("accuracy", "macro_precision", "macro_recall", "macro_specificity")


class TrainingDiverged(NonFiniteError):
    def __init__(self, epoch, layer_index=None):
        super().__init__(f"non-finite loss in epoch {epoch}", layer_index)
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple = (0.5, 0.75)  # fractions of the epoch budget
    lr_factor: float = 0.1
    seed: int = 0
    augmentation: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs two samples)")

    def lr_at(self, epoch):
        lr = self.lr
        for m in self.milestones:
            if epoch >= int(round(m * self.epochs)):
                lr *= self.lr_factor
        return lr


def _apply_bn_updates(weights, updates):
    if not updates:
        return weights
    out = dict(weights)
    for nid, (mean, var) in updates.items():
        out[nid] = dict(out[nid], running_mean=mean, running_var=var)
    return out


def _mean_loss(graph, weights, dataset, batch_size=256):
    logits = predict(graph, weights, dataset.images, batch_size)
    loss, _ = softmax_cross_entropy(logits.astype(np.float64), dataset.labels)
    return loss


def train(graph, weights, dataset, config, progress=None):
    """Momentum SGD on softmax cross-entropy; returns (weights, per-epoch mean loss).

    ``lr == 0`` is a dry run: nothing is updated (batch-norm statistics
    included) and each epoch reports the inference-mode loss.
    """
    if dataset.num_classes != graph.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, model outputs {graph.num_classes}")
    if config.lr == 0:
        loss = _mean_loss(graph, weights, dataset)
        return weights, [loss] * config.epochs
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    bs = min(config.batch_size, n)
    velocity = None
    curve = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if idx.size < 2:
                continue
            x = dataset.images[idx]
            if config.augmentation:
                x = dataio.augment(x, rng)
            try:
                loss, grads, fwd = loss_and_grads(graph, weights, x, dataset.labels[idx], training=True)
            except NonFiniteError as e:
                raise TrainingDiverged(epoch, e.layer_index) from None
            weights = _apply_bn_updates(weights, fwd.bn_updates)
            weights, velocity = sgd_step(weights, grads, lr, config.momentum, config.weight_decay, velocity)
            total += loss * idx.size
            seen += idx.size
        curve.append(total / seen)
        if not np.isfinite(curve[-1]):
            raise TrainingDiverged(epoch)
        if progress:
            progress(epoch, curve[-1])
    return weights, curve


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    confusion_matrix: np.ndarray  # rows: true class, columns: predicted
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_specificity: float

    def as_dict(self):
        return {m: getattr(self, m) for m in METRICS}


def confusion_matrix(labels, predictions, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


def _safe_div(num, den):
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


def metrics_from_confusion(cm):
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = total - tp - fp - fn
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    specificity = _safe_div(tn, tn + fp)
    return EvalReport(
        confusion_matrix=cm,
        accuracy=100.0 * tp.sum() / total if total else 0.0,
        macro_precision=100.0 * precision.mean(),
        macro_recall=100.0 * recall.mean(),
        macro_specificity=100.0 * specificity.mean(),
    )


def evaluate(graph, weights, dataset, batch_size=256):
    logits = predict(graph, weights, dataset.images, batch_size)
    pred = logits.argmax(axis=1)
    return metrics_from_confusion(confusion_matrix(dataset.labels, pred, dataset.num_classes))


# ---------------------------------------------------------------- experiments


def mean_std(values):
    """Mean and population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"  # synthetic | cifar10
    cifar_dir: str = ""
    synthetic: dataio.SyntheticSpec = field(default_factory=dataio.SyntheticSpec)
    arch: str = "vgg-small"
    methods: tuple = ("L1", "Beta", "HRank")
    rates: str = "vgg-small-40"
    rank_batch: int = 64
    repetitions: int = 3
    seed: int = 0
    baseline_model: str = ""
    retrain_baseline: bool = False
    baseline: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=2))

    def resolved(self):
        d = asdict(self)
        d["synthetic"] = {k: v for k, v in d["synthetic"].items() if k != "motifs"}
        return d


_TRAIN_KEYS = {
    "epochs": int, "batch_size": int, "lr": float, "momentum": float, "weight_decay": float,
    "lr_factor": float, "seed": int,
}


def _bool(v):
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise dataio.ConfigError(f"not a boolean: {v!r}")


def _train_config(base, prefix, items):
    kw = {}
    for key, value in items.items():
        if key == "milestones":
            kw[key] = tuple(float(v) for v in value.replace(",", " ").split())
        elif key == "augmentation":
            kw[key] = _bool(value)
        elif key in _TRAIN_KEYS:
            kw[key] = _TRAIN_KEYS[key](value)
        else:
            raise dataio.ConfigError(f"unknown key {prefix}.{key}")
    return replace(base, **kw)


def experiment_config_from_dict(d):
    cfg = ExperimentConfig()
    synth, base, ft, top = {}, {}, {}, {}
    for key, value in d.items():
        if key.startswith("synthetic."):
            synth[key[len("synthetic."):]] = value
        elif key.startswith("baseline."):
            base[key[len("baseline."):]] = value
        elif key.startswith("finetune."):
            ft[key[len("finetune."):]] = value
        else:
            top[key] = value
    try:
        kw = {}
        for key, value in top.items():
            if key in ("dataset", "cifar_dir", "arch", "rates", "baseline_model"):
                kw[key] = value
            elif key == "methods":
                kw[key] = tuple(canonical_method(m) for m in value.replace(",", " ").split())
            elif key in ("rank_batch", "repetitions", "seed"):
                kw[key] = int(value)
            elif key == "retrain_baseline":
                kw[key] = _bool(value)
            else:
                raise dataio.ConfigError(f"unknown experiment key {key!r}")
        cfg = replace(cfg, **kw)
        if synth:
            cfg = replace(cfg, synthetic=dataio.synthetic_spec_from_dict(synth))
        cfg = replace(cfg, baseline=_train_config(cfg.baseline, "baseline", base),
                      finetune=_train_config(cfg.finetune, "finetune", ft))
    except dataio.ConfigError:
        raise
    except ValueError as e:
        raise dataio.ConfigError(str(e)) from None
    if cfg.repetitions < 1:
        raise dataio.ConfigError("repetitions must be >= 1")
    if cfg.dataset not in ("synthetic", "cifar10"):
        raise dataio.ConfigError(f"unknown dataset {cfg.dataset!r}")
    return cfg


def load_experiment_config(path_or_name):
    """Read a key = value experiment config; bare names resolve to shipped presets."""
    p = Path(path_or_name)
    if not p.exists():
        preset = resources.files("filterprune") / "presets" / f"{path_or_name}.cfg"
        if not preset.is_file():
            raise FileNotFoundError(f"no config file or preset named {path_or_name!r}")
        return experiment_config_from_dict(dataio.parse_kv(preset.read_text(encoding="utf-8")))
    return experiment_config_from_dict(dataio.parse_kv(p.read_text(encoding="utf-8")))


def load_datasets(cfg):
    if cfg.dataset == "cifar10":
        return dataio.load_cifar10(cfg.cifar_dir)
    return dataio.generate_synthetic(cfg.synthetic)


def repetition_seeds(seed, r):
    """(baseline, rank batch, fine-tune) seeds for repetition r."""
    ss = np.random.SeedSequence([seed, r])
    return tuple(int(s.generate_state(1)[0]) for s in ss.spawn(3))


def _baseline(cfg, train_set, seed):
    if cfg.baseline_model and not cfg.retrain_baseline:
        return load_model(cfg.baseline_model)
    c, h, w = train_set.images.shape[1:]
    graph = build_architecture(cfg.arch, (c, h, w), train_set.num_classes)
    weights = init_weights(graph, seed)
    weights, _ = train(graph, weights, train_set, replace(cfg.baseline, seed=seed))
    return graph, weights


def _run_repetition(cfg, r, datasets=None, shared_baseline=None):
    train_set, val_set = datasets or load_datasets(cfg)
    base_seed, rank_seed, ft_seed = repetition_seeds(cfg.seed, r)
    if shared_baseline is not None:
        graph, weights = shared_baseline
    else:
        graph, weights = _baseline(cfg, train_set, base_seed)
    rates = load_rates(cfg.rates)
    base_flops = count_flops_params(graph)
    rows = [("Baseline", base_flops.total_flops, base_flops.total_params,
             evaluate(graph, weights, val_set).as_dict())]
    batch, _ = dataio.sample_batch(train_set, min(cfg.rank_batch, len(train_set)), rank_seed)
    for method in cfg.methods:
        rank = compute_rank(method, graph, weights, batch, rank_seed)
        plan = select_top_filters(rank, rates, graph)
        pg, pw = construct_pruned(graph, weights, plan)
        pw, _ = train(pg, pw, train_set, replace(cfg.finetune, seed=ft_seed))
        rep = count_flops_params(pg)
        rows.append((method, rep.total_flops, rep.total_params, evaluate(pg, pw, val_set).as_dict()))
    return rows


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    per_repetition: list  # list of rows per repetition

    def aggregate(self):
        out = []
        names = [row[0] for row in self.per_repetition[0]]
        for i, name in enumerate(names):
            flops, params = self.per_repetition[0][i][1:3]
            for metric in METRICS:
                vals = [rep[i][3][metric] for rep in self.per_repetition]
                m, s = mean_std(vals)
                out.append((name, flops, params, metric, m, s))
        return out

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "flops", "params", "metric", "mean", "std"])
        for name, flops, params, metric, m, s in self.aggregate():
            w.writerow([name, flops, params, metric, f"{m:.6f}", f"{s:.6f}"])
        return buf.getvalue()

    def seed_table(self, metric="macro_recall"):
        names = [row[0] for row in self.per_repetition[0]]
        lines = ["rep  " + "  ".join(f"{n:>9}" for n in names)]
        for r, rep in enumerate(self.per_repetition):
            lines.append(f"{r:<4} " + "  ".join(f"{row[3][metric]:9.3f}" for row in rep))
        return "\n".join(lines)

    def mean(self, method, metric):
        for name, _, _, m, mu, _ in self.aggregate():
            if name == method and m == metric:
                return mu
        raise KeyError((method, metric))


def run_experiment(cfg, jobs=1):
    """Rank, select, prune, fine-tune and evaluate every method for each repetition.

    All methods in a repetition share the baseline, calibration batch and
    fine-tuning seed, so only the ranking differs.
    """
    datasets = load_datasets(cfg)
    shared = None
    if not cfg.retrain_baseline:
        shared = _baseline(cfg, datasets[0], repetition_seeds(cfg.seed, 0)[0])
    reps = []
    if jobs > 1 and cfg.repetitions > 1:
        with ProcessPoolExecutor(jobs) as pool:
            futs = [pool.submit(_run_repetition, cfg, r, datasets, shared) for r in range(cfg.repetitions)]
            for r, f in enumerate(futs):
                try:
                    reps.append(f.result())
                except Exception as e:
                    raise RuntimeError(f"repetition {r}: {e}") from e
    else:
        for r in range(cfg.repetitions):
            try:
                reps.append(_run_repetition(cfg, r, datasets, shared))
            except Exception as e:
                raise RuntimeError(f"repetition {r}: {e}") from e
            log.info("repetition %d done", r)
    return ExperimentResult(cfg, reps)
