"""Training, ablation sweeps, cost reports and shift microbenchmarks."""

from __future__ import annotations

import csv
import io
import logging
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from .autodiff import loss_and_grads, sgd_step
from .config import ExperimentConfig
from .data import LEFT, RIGHT, generate_batch, stack
from .errors import ConfigError, ContractError
from .graph import CostReport, build_network, cost_report, forward_network, preset, save_checkpoint
from .shift import apply_stsm, apply_stsm_inplace, build_shift_spec, build_sparse_kernel, oracle_sparse_conv

log = logging.getLogger(__name__)

RUN_COLUMNS = ("epoch", "train_loss", "eval_accuracy", "pair_accuracy")
TIMING_COLUMNS = ("epoch", "wall_seconds")
ALPHA_COLUMNS = ("f", "accuracy", "pair_accuracy", "macs", "params")
PATTERN_COLUMNS = ("pattern", "f", "accuracy", "pair_accuracy", "macs", "params")
COST_COLUMNS = ("layer", "kind", "out_dims", "macs", "params")
BENCH_COLUMNS = ("size", "N", "C", "T", "H", "W", "elements", "impl", "median_ns_per_element", "repetitions")
BENCH_CHECK_COLUMNS = ("size", "elements", "impl", "max_abs_diff", "checksum")


@dataclass
class EpochRow:
    epoch: int
    train_loss: float | None
    eval_accuracy: float
    pair_accuracy: float
    wall_seconds: float


@dataclass
class RunRecord:
    config: ExperimentConfig
    rows: list = field(default_factory=list)
    cost: CostReport | None = None
    graph: object = None

    @property
    def final_accuracy(self) -> float:
        return self.rows[-1].eval_accuracy

    @property
    def final_pair_accuracy(self) -> float:
        return self.rows[-1].pair_accuracy


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, columns, rows) -> str:
    text = csv_text(columns, rows)
    Path(path).write_text(text)
    return text


def out_lock(directory) -> FileLock:
    """Exclusive lock on an output directory; fails fast if another run holds it."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(directory / ".lock"), timeout=0)
    try:
        lock.acquire()
    except Timeout:
        raise ConfigError(f"output directory {directory} is in use by another run") from None
    return lock


def pair_accuracy(logits, labels) -> float:
    """Accuracy of the binary right-vs-left decision on the horizontal clips."""
    mask = (labels == RIGHT) | (labels == LEFT)
    if not mask.any():
        return float("nan")
    sub = logits[mask][:, [RIGHT, LEFT]]
    decided = np.where(sub[:, 0] >= sub[:, 1], RIGHT, LEFT)
    return float((decided == labels[mask]).mean())


def evaluate(graph, x, y, batch_size=100):
    logits = np.concatenate(
        [forward_network(graph, x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    )
    return float((logits.argmax(axis=1) == y).mean()), pair_accuracy(logits, y)


def _seeds(seed: int):
    init, train, held_out, order = np.random.SeedSequence(seed).generate_state(4)
    return int(init), int(train), int(held_out), int(order)


def train(config: ExperimentConfig) -> RunRecord:
    """Train on the synthetic motion task and evaluate after every epoch.

    Row 0 evaluates the initialized network. Rows 1..epochs follow each
    training epoch."""
    config.validate()
    task = config.task
    init_seed, train_seed, eval_seed, order_seed = _seeds(config.seed)
    net_cfg = preset(config.preset, in_channels=task.channels, num_classes=task.num_classes)
    graph = build_network(net_cfg, config.shift_spec, seed=init_seed)
    xtr, ytr = stack(generate_batch(task, config.train_samples, train_seed)) if config.train_samples else (None, None)
    xte, yte = stack(generate_batch(task, config.eval_samples, eval_seed))
    record = RunRecord(config, cost=cost_report(graph, config.cost_dims), graph=graph)
    order = np.random.default_rng(order_seed)

    start = time.perf_counter()
    acc, pacc = evaluate(graph, xte, yte)
    record.rows.append(EpochRow(0, None, acc, pacc, time.perf_counter() - start))
    for epoch in range(config.epochs):
        if xtr is None:
            raise ConfigError("training needs train_samples > 0")
        lr = config.lr_at(epoch)
        perm = order.permutation(len(xtr))
        losses = []
        for i in range(0, len(perm), config.batch_size):
            idx = perm[i : i + config.batch_size]
            loss, grads = loss_and_grads(graph, xtr[idx], ytr[idx])
            sgd_step(graph.params, grads, lr, config.momentum, config.weight_decay)
            losses.append(loss)
        acc, pacc = evaluate(graph, xte, yte)
        record.rows.append(
            EpochRow(epoch + 1, float(np.mean(losses)), acc, pacc, time.perf_counter() - start)
        )
        log.info("epoch %d loss %.4f acc %.3f lr %.4g", epoch + 1, np.mean(losses), acc, lr)
    return record


def run_rows(record: RunRecord):
    return [(r.epoch, r.train_loss, r.eval_accuracy, r.pair_accuracy) for r in record.rows]


def cmd_train(config: ExperimentConfig, out_dir) -> RunRecord:
    out_dir = Path(out_dir)
    with out_lock(out_dir):
        record = train(config)
        write_csv(out_dir / "run.csv", RUN_COLUMNS, run_rows(record))
        write_csv(out_dir / "timing.csv", TIMING_COLUMNS, [(r.epoch, r.wall_seconds) for r in record.rows])
        (out_dir / "cost.txt").write_text(record.cost.text())
        save_checkpoint(record.graph, out_dir / "checkpoint")
    return record


def cmd_sweep_alpha(config: ExperimentConfig, out_dir, fractions=None) -> str:
    """One training run per shifted fraction, pattern held fixed."""
    config.validate()
    fractions = config.fractions if fractions is None else fractions
    if not fractions:
        raise ConfigError("fraction list is empty")
    spec = config.shift_spec
    pattern = spec[0] if spec else (("T",), ("H",), ("W",))
    pattern_text = "+".join("".join(g) for g in pattern)
    out_dir = Path(out_dir)
    rows = []
    with out_lock(out_dir):
        for i, f in enumerate(fractions):
            run_cfg = replace(config, shift=f"pattern={pattern_text} f={f}")
            record = train(run_cfg)
            sub = out_dir / f"f{i}"
            sub.mkdir(exist_ok=True)
            write_csv(sub / "run.csv", RUN_COLUMNS, run_rows(record))
            rows.append((str(f), record.final_accuracy, record.final_pair_accuracy,
                         record.cost.total_macs, record.cost.total_params))
        return write_csv(out_dir / "sweep_alpha.csv", ALPHA_COLUMNS, rows)


def cmd_sweep_pattern(config: ExperimentConfig, out_dir, patterns=None) -> str:
    """One training run per shift pattern at the configured fraction."""
    config.validate()
    patterns = config.patterns if patterns is None else patterns
    if not patterns:
        raise ConfigError("pattern list is empty")
    spec = config.shift_spec
    fraction = spec[1] if spec else "3/8"
    runs = [replace(config, shift=f"pattern={p} f={fraction}").validate() for p in patterns]
    out_dir = Path(out_dir)
    rows = []
    with out_lock(out_dir):
        for i, run_cfg in enumerate(runs):
            record = train(run_cfg)
            sub = out_dir / f"p{i}"
            sub.mkdir(exist_ok=True)
            write_csv(sub / "run.csv", RUN_COLUMNS, run_rows(record))
            rows.append((patterns[i], str(fraction), record.final_accuracy, record.final_pair_accuracy,
                         record.cost.total_macs, record.cost.total_params))
        return write_csv(out_dir / "sweep_pattern.csv", PATTERN_COLUMNS, rows)


def cost_for(config: ExperimentConfig) -> CostReport:
    dims = config.cost_dims
    graph = build_network(preset(config.preset, in_channels=dims[1]), config.shift_spec, materialize=False)
    return cost_report(graph, dims)


def cmd_cost(config: ExperimentConfig, out_dir) -> str:
    config.validate()
    report = cost_for(config)
    out_dir = Path(out_dir)
    with out_lock(out_dir):
        text = report.text()
        (out_dir / "cost.txt").write_text(text)
        write_csv(out_dir / "cost.csv", COST_COLUMNS,
                  [(r.name, r.kind, "x".join(map(str, r.out_dims)), r.macs, r.params) for r in report.rows])
    return text


# ---------------------------------------------------------------- benchmark

def _copy_shift(x, spec):
    return apply_stsm(x, spec)


def _inplace_shift(x, spec):
    return apply_stsm_inplace(x.copy(), spec)


def _oracle(x, spec, kernel):
    return oracle_sparse_conv(x, kernel)


def _median_seconds(fn, reps):
    times = []
    for _ in range(reps):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def bench_shift(dims, shift, repetitions=5, sizes=3, seed=0):
    """Time copy shift, in-place slab shift and the sparse-conv oracle on
    ``sizes`` tensors (batch doubled each step).

    Returns ``(timing_rows, check_rows)``. Outputs are compared exactly
    before any timing, and the oracle must not beat either shift."""
    if repetitions < 3:
        raise ConfigError("repetitions must be >= 3")
    rng = np.random.default_rng(seed)
    timing, checks = [], []
    for size in range(sizes):
        d = (dims[0] * 2**size,) + tuple(dims[1:])
        x = rng.standard_normal(d)
        spec = build_shift_spec(d[1], *shift)
        kernel = build_sparse_kernel(spec)
        # in-place variant works on a fresh copy; copy cost is part of its timing
        impls = {
            "copy-shift": lambda: _copy_shift(x, spec),
            "in-place-slab-shift": lambda: _inplace_shift(x, spec),
            "oracle-sparse-conv": lambda: _oracle(x, spec, kernel),
        }
        outputs = {name: fn() for name, fn in impls.items()}
        ref = outputs["oracle-sparse-conv"]
        for name, out in outputs.items():
            diff = float(np.max(np.abs(out - ref)))
            if diff != 0.0:
                raise ContractError(f"{name} disagrees with the oracle (max diff {diff})")
            checks.append((size, x.size, name, diff, repr(float(out.sum()))))
        medians = {name: _median_seconds(fn, repetitions) for name, fn in impls.items()}
        if medians["oracle-sparse-conv"] < max(medians["copy-shift"], medians["in-place-slab-shift"]):
            raise ContractError(f"oracle ran faster than a direct shift at dims {d}: {medians}")
        for name, sec in medians.items():
            timing.append((size, *d, x.size, name, sec * 1e9 / x.size, repetitions))
    return timing, checks


def cmd_bench_shift(config: ExperimentConfig, out_dir):
    config.validate()
    shift = config.shift_spec or ((("T",), ("H",), ("W",)), "3/8")
    out_dir = Path(out_dir)
    with out_lock(out_dir):
        timing, checks = bench_shift(config.bench_dims, shift, config.repetitions, config.bench_sizes, config.seed)
        write_csv(out_dir / "bench.csv", BENCH_COLUMNS, timing)
        write_csv(out_dir / "bench_check.csv", BENCH_CHECK_COLUMNS, checks)
    return timing, checks


def loglog_fit(elements, seconds):
    """Slope and r^2 of log(seconds) against log(elements)."""
    lx, ly = np.log(np.asarray(elements, float)), np.log(np.asarray(seconds, float))
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2
