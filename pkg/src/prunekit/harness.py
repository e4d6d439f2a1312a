"""Training, evaluation, FLOPs accounting, and the experiment runner.

Everything here is seed-deterministic: rerunning any entry point with the
same inputs produces bit-identical checkpoints and byte-identical report
files.  Wall-clock timings are collected in memory but never serialized.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model_io, nn, pruner


# ---------------------------------------------------------------------------
# FLOPs accounting
# ---------------------------------------------------------------------------

@dataclass
class FlopsReport:
    per_layer: list[int]
    total: int


def flops_count(spec) -> FlopsReport:
    """Multiply-add FLOPs per layer (factor 2); activations and pools count 0.

    conv2d: 2 * c_out * c_in * kh * kw * h_out * w_out; linear: 2 * in * out.
    """
    dims = tuple(spec.input_dims)
    per_layer: list[int] = []
    for i, layer in enumerate(spec.layers):
        dims = nn._layer_out_dims(layer, dims, i, getattr(spec, "num_classes", 0))
        if layer.kind == nn.CONV2D:
            kh, kw = layer.kernel
            _, ho, wo = dims
            per_layer.append(2 * layer.out_channels * layer.in_channels * kh * kw
                             * ho * wo)
        elif layer.kind == nn.LINEAR:
            per_layer.append(2 * layer.in_features * layer.out_features)
        else:
            per_layer.append(0)
    return FlopsReport(per_layer=per_layer, total=sum(per_layer))


def desk_net(input_dims=(1, 28, 28), num_classes=10,
             widths=(16, 32, 32, 64)) -> nn.NetworkSpec:
    """The reference net: stacked 3x3 convs with two early 2x2 pools."""
    c, h, w = input_dims
    layers: list[nn.LayerSpec] = []
    prev = c
    for k, width in enumerate(widths):
        layers += [nn.conv2d(prev, width, 3, padding=1), nn.relu()]
        if k < 2:
            layers.append(nn.maxpool2d(2))
        prev = width
    fh, fw = h // 4, w // 4
    layers += [nn.flatten(), nn.linear(prev * fh * fw, num_classes),
               nn.softmax_ce_head()]
    return nn.NetworkSpec(tuple(layers), input_dims, num_classes)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    nesterov: bool = True
    decay_points: tuple[float, ...] = (0.5, 0.75)
    decay_factor: float = 0.1
    seed: int = 0


def finetune_defaults(**overrides) -> TrainConfig:
    cfg = TrainConfig(epochs=10, lr=0.01)
    return replace(cfg, **overrides)


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    drops = sum(1 for p in cfg.decay_points if epoch >= int(cfg.epochs * p))
    return cfg.lr * cfg.decay_factor ** drops


def train(spec: nn.NetworkSpec, data: model_io.DatasetHandle, cfg: TrainConfig,
          init: list | None = None,
          eval_data: model_io.DatasetHandle | None = None) -> model_io.Checkpoint:
    """SGD with momentum over shuffled mini-batches; step lr decay.

    With `init` the run resumes from those weights (fine-tuning); zero
    epochs returns the starting point unchanged.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = nn.copy_params(init) if init is not None else nn.init_params(spec, rng)
    velocity = None
    n = len(data)
    for epoch in range(cfg.epochs):
        lr = _epoch_lr(cfg, epoch)
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            trace = nn.forward_collect(spec, params, data.images[idx])
            grads = nn.backward_collect(spec, params, trace, data.labels[idx])
            params, velocity = nn.sgd_step(params, grads.weights, lr,
                                           momentum=cfg.momentum,
                                           nesterov=cfg.nesterov,
                                           weight_decay=cfg.weight_decay,
                                           velocity=velocity)
    ckpt = model_io.Checkpoint(spec, params, {})
    acc_split = eval_data if eval_data is not None and len(eval_data) else data
    ckpt.metadata = {"seed": cfg.seed, "epochs": cfg.epochs,
                     "dataset": data.split or "unnamed",
                     "accuracy": evaluate(ckpt, acc_split)}
    return ckpt


def finetune(ckpt: model_io.Checkpoint, data: model_io.DatasetHandle,
             cfg: TrainConfig,
             eval_data: model_io.DatasetHandle | None = None) -> model_io.Checkpoint:
    """Resume SGD on an existing (typically pruned) checkpoint."""
    out = train(ckpt.spec, data, cfg, init=ckpt.params, eval_data=eval_data)
    out.metadata["finetuned_from"] = ckpt.metadata.get("dataset", "")
    return out


def evaluate(ckpt: model_io.Checkpoint, data: model_io.DatasetHandle,
             batch_size: int = 256) -> float:
    """Top-1 accuracy over a split."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty split")
    correct = 0
    for start in range(0, len(data), batch_size):
        x = data.images[start:start + batch_size]
        trace = nn.forward_collect(ckpt.spec, ckpt.params, x)
        pred = trace.logits.argmax(axis=1)
        correct += int((pred == data.labels[start:start + batch_size]).sum())
    return correct / len(data)


# ---------------------------------------------------------------------------
# Compression reports
# ---------------------------------------------------------------------------

@dataclass
class LayerPruneStat:
    layer_index: int
    conv_ordinal: int
    kept: int
    total: int
    flops_before: int
    flops_after: int


@dataclass
class CompressionReport:
    """Everything a pruning run produced, numbers-first.

    `accuracy_drop` is finetuned minus baseline accuracy, so positive means
    the compressed model improved.  Timings live only in memory.
    """

    variant: str
    seed: int
    num_locations: int
    layers: list[LayerPruneStat]
    flops_before: int
    flops_after: int
    compression_ratio: float
    accuracy_baseline: float | None = None
    accuracy_pruned: float | None = None
    accuracy_finetuned: float | None = None
    accuracy_drop: float | None = None
    timings: dict = field(default_factory=dict)

    def with_finetuned(self, accuracy: float) -> "CompressionReport":
        drop = None
        if self.accuracy_baseline is not None:
            drop = accuracy - self.accuracy_baseline
        return replace(self, accuracy_finetuned=accuracy, accuracy_drop=drop)


def report_to_dict(report: CompressionReport, include_timings: bool = False) -> dict:
    d = {
        "variant": report.variant,
        "seed": report.seed,
        "num_locations": report.num_locations,
        "flops_before": report.flops_before,
        "flops_after": report.flops_after,
        "compression_ratio": report.compression_ratio,
        "accuracy_baseline": report.accuracy_baseline,
        "accuracy_pruned": report.accuracy_pruned,
        "accuracy_finetuned": report.accuracy_finetuned,
        "accuracy_drop": report.accuracy_drop,
        "layers": [{"layer_index": s.layer_index, "conv_ordinal": s.conv_ordinal,
                    "kept": s.kept, "total": s.total,
                    "flops_before": s.flops_before, "flops_after": s.flops_after}
                   for s in report.layers],
    }
    if include_timings:
        d["timings"] = report.timings
    return d


def report_from_dict(d: dict) -> CompressionReport:
    return CompressionReport(
        variant=d["variant"], seed=d["seed"], num_locations=d["num_locations"],
        layers=[LayerPruneStat(**s) for s in d["layers"]],
        flops_before=d["flops_before"], flops_after=d["flops_after"],
        compression_ratio=d["compression_ratio"],
        accuracy_baseline=d["accuracy_baseline"],
        accuracy_pruned=d["accuracy_pruned"],
        accuracy_finetuned=d["accuracy_finetuned"],
        accuracy_drop=d["accuracy_drop"])


def write_report(path, report: CompressionReport) -> None:
    Path(path).write_text(json.dumps(report_to_dict(report), sort_keys=True,
                                     indent=2) + "\n")


def read_report(path) -> CompressionReport:
    return report_from_dict(json.loads(Path(path).read_text()))


def format_report(report: CompressionReport) -> str:
    def pct(x):
        return "-" if x is None else f"{100 * x:.2f}%"

    lines = [
        f"variant={report.variant} seed={report.seed} "
        f"locations={report.num_locations}",
        f"FLOPs {report.flops_before} -> {report.flops_after} "
        f"(CR {report.compression_ratio:.3f}x)",
        f"accuracy baseline={pct(report.accuracy_baseline)} "
        f"pruned={pct(report.accuracy_pruned)} "
        f"finetuned={pct(report.accuracy_finetuned)} "
        f"drop={pct(report.accuracy_drop)}",
        "layer\tconv\tkept\ttotal\tflops_before\tflops_after",
    ]
    for s in report.layers:
        lines.append(f"{s.layer_index}\t{s.conv_ordinal}\t{s.kept}\t{s.total}"
                     f"\t{s.flops_before}\t{s.flops_after}")
    return "\n".join(lines)


def prune(ckpt: model_io.Checkpoint, probe_data: model_io.DatasetHandle,
          test_data: model_io.DatasetHandle | None, cfg: pruner.PruneConfig):
    """Prune a checkpoint and account for it; returns (pruned, report, traces)."""
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    acc_base = evaluate(ckpt, test_data) if test_data is not None else None
    pruned, traces = pruner.prune_model(ckpt, probe_data, cfg)
    timings["prune_s"] = time.perf_counter() - t0
    t1 = time.perf_counter()
    acc_pruned = evaluate(pruned, test_data) if test_data is not None else None
    timings["eval_s"] = time.perf_counter() - t1

    before = flops_count(ckpt.spec)
    after = flops_count(pruned.spec)
    convs_before = ckpt.spec.conv_indices()
    stats = []
    for ordinal, li in enumerate(convs_before, start=1):
        stats.append(LayerPruneStat(
            layer_index=li, conv_ordinal=ordinal,
            kept=pruned.spec.layers[li].in_channels,
            total=ckpt.spec.layers[li].in_channels,
            flops_before=before.per_layer[li], flops_after=after.per_layer[li]))
    report = CompressionReport(
        variant=cfg.variant, seed=cfg.seed, num_locations=cfg.num_locations,
        layers=stats, flops_before=before.total, flops_after=after.total,
        compression_ratio=before.total / after.total,
        accuracy_baseline=acc_base, accuracy_pruned=acc_pruned, timings=timings)
    return pruned, report, traces


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentCell:
    variant: str
    seed: int
    num_locations: int = 10


@dataclass
class ExperimentPlan:
    """Cells to run plus the (mean over seeds) aggregation rule."""

    cells: tuple[ExperimentCell, ...]
    aggregate: str = "mean"

    @staticmethod
    def grid(variants, seeds, locations=(10,)) -> "ExperimentPlan":
        cells = tuple(ExperimentCell(v, s, l)
                      for v in variants for l in locations for s in seeds)
        return ExperimentPlan(cells=cells)


@dataclass
class ExperimentRow:
    variant: str
    num_locations: int
    seeds: tuple[int, ...]
    accuracy_finetuned: tuple[float, ...]
    accuracy_drop: tuple[float, ...]
    accuracy_finetuned_mean: float
    accuracy_drop_mean: float
    compression_ratio_mean: float


@dataclass
class ExperimentResult:
    rows: list[ExperimentRow]
    reports: dict[tuple, CompressionReport]
    baseline_accuracy: dict[int, float]

    def row(self, variant: str, num_locations: int = 10) -> ExperimentRow:
        for r in self.rows:
            if r.variant == variant and r.num_locations == num_locations:
                return r
        raise KeyError((variant, num_locations))


def run_experiment(plan: ExperimentPlan, spec: nn.NetworkSpec,
                   train_data: model_io.DatasetHandle,
                   test_data: model_io.DatasetHandle,
                   train_cfg: TrainConfig, finetune_cfg: TrainConfig,
                   prune_cfg: pruner.PruneConfig,
                   out_dir=None) -> ExperimentResult:
    """Run every cell (train once per seed, then prune+finetune) and aggregate.

    Cells are executed in a sorted order but are mutually independent, so
    any execution order yields the same result.  When `out_dir` is given,
    per-cell reports, traces, and the aggregate table are written there.
    """
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    baselines: dict[int, model_io.Checkpoint] = {}
    for seed in sorted({c.seed for c in plan.cells}):
        ckpt = train(spec, train_data, replace(train_cfg, seed=seed),
                     eval_data=test_data)
        baselines[seed] = ckpt
        if out_path is not None:
            model_io.save_checkpoint(out_path / f"baseline_seed{seed}.ckpt", ckpt)

    reports: dict[tuple, CompressionReport] = {}
    cells = sorted(plan.cells, key=lambda c: (c.variant, c.num_locations, c.seed))
    for cell in cells:
        cfg = replace(prune_cfg, variant=cell.variant, seed=cell.seed,
                      num_locations=cell.num_locations)
        pruned, report, traces = prune(baselines[cell.seed], train_data,
                                       test_data, cfg)
        tuned = finetune(pruned, train_data, replace(finetune_cfg, seed=cell.seed),
                         eval_data=test_data)
        report = report.with_finetuned(evaluate(tuned, test_data))
        key = (cell.variant, cell.num_locations, cell.seed)
        reports[key] = report
        if out_path is not None:
            stem = f"{cell.variant}_loc{cell.num_locations}_seed{cell.seed}"
            write_report(out_path / f"report_{stem}.json", report)
            pruner.write_traces(out_path / f"trace_{stem}.txt", traces)

    rows = []
    for variant, num_loc in sorted({(c.variant, c.num_locations) for c in cells}):
        seeds = tuple(sorted(c.seed for c in cells
                             if c.variant == variant and c.num_locations == num_loc))
        cell_reports = [reports[(variant, num_loc, s)] for s in seeds]
        accs = tuple(r.accuracy_finetuned for r in cell_reports)
        drops = tuple(r.accuracy_drop for r in cell_reports)
        rows.append(ExperimentRow(
            variant=variant, num_locations=num_loc, seeds=seeds,
            accuracy_finetuned=accs, accuracy_drop=drops,
            accuracy_finetuned_mean=float(np.mean(accs)),
            accuracy_drop_mean=float(np.mean(drops)),
            compression_ratio_mean=float(np.mean(
                [r.compression_ratio for r in cell_reports]))))

    result = ExperimentResult(
        rows=rows, reports=reports,
        baseline_accuracy={s: baselines[s].metadata["accuracy"]
                           for s in sorted(baselines)})
    if out_path is not None:
        (out_path / "table.txt").write_text(format_experiment_table(result))
        (out_path / "table.json").write_text(
            json.dumps(experiment_to_dict(result), sort_keys=True, indent=2) + "\n")
    return result


def experiment_to_dict(result: ExperimentResult) -> dict:
    return {
        "baseline_accuracy": {str(k): v for k, v in result.baseline_accuracy.items()},
        "rows": [{
            "variant": r.variant, "num_locations": r.num_locations,
            "seeds": list(r.seeds),
            "accuracy_finetuned": list(r.accuracy_finetuned),
            "accuracy_drop": list(r.accuracy_drop),
            "accuracy_finetuned_mean": r.accuracy_finetuned_mean,
            "accuracy_drop_mean": r.accuracy_drop_mean,
            "compression_ratio_mean": r.compression_ratio_mean,
        } for r in result.rows],
    }


def format_experiment_table(result: ExperimentResult) -> str:
    header = ("variant", "locations", "cr_mean", "acc_mean", "drop_mean",
              "per_seed_acc")
    lines = ["\t".join(header)]
    for r in result.rows:
        per_seed = ",".join(f"{a:.4f}" for a in r.accuracy_finetuned)
        lines.append("\t".join((
            r.variant, str(r.num_locations), f"{r.compression_ratio_mean:.4f}",
            f"{r.accuracy_finetuned_mean:.4f}", f"{r.accuracy_drop_mean:+.4f}",
            per_seed)))
    return "\n".join(lines) + "\n"
