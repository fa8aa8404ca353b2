"""Command-line harness: ``generate``, ``train``, ``eval``, ``compare`` and ``sweep``.

Experiments are described by a flat ``key = value`` manifest.  Besides the
harness keys below, a manifest may set any model field (``variant``,
``mixtures``, ``hidden``, ...) and any training field (``epochs``,
``batch_size``, ``learning_rate``, ...).  Relative paths resolve against the
manifest's directory.

Exit status: 0 on success, 2 for usage or configuration errors, 3 when a
training run aborts numerically.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data, plots
from . import training as TR
from .config import ConfigError, coerce_fields, load_kv
from .data import DataFormatError, SyntheticConfig, WindowSet
from .tensor import NonFiniteError

log = logging.getLogger("cmdrnn")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
METRICS_HEADER = ("variant", "K", "seed", "rmse", "final_loss", "seconds")
SUMMARY_HEADER = ("variant", "K", "runs", "failed", "mean_rmse", "std_rmse", "median_rmse")
FAILED = "FAILED"
DEFAULT_SWEEP = (1, 5, 10, 20, 30)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass
class _HarnessKeys:
    seed: Optional[int] = None
    dataset: Optional[str] = None
    synthetic: Optional[str] = None
    runs: int = 5
    out_dir: Optional[str] = None
    variants: Optional[list[str]] = None
    sweep_mixtures: Optional[list[int]] = None
    train_fraction: float = 0.8
    eval_mode: str = "mle"


@dataclass
class Manifest:
    seed: int
    dataset: Optional[Path] = None
    synthetic: Optional[Path] = None
    runs: int = 5
    out_dir: Optional[Path] = None
    variants: list[str] = field(default_factory=lambda: list(TR.VARIANTS))
    sweep_mixtures: list[int] = field(default_factory=lambda: list(DEFAULT_SWEEP))
    train_fraction: float = 0.8
    eval_mode: str = "mle"
    model: dict = field(default_factory=dict)  # ModelSpec overrides
    train: dict = field(default_factory=dict)  # TrainConfig overrides, minus the seed

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if (self.dataset is None) == (self.synthetic is None):
            raise ConfigError("manifest needs exactly one of 'dataset' (CSV) or 'synthetic' (generator config)")
        unknown = [v for v in self.variants if v not in TR.VARIANTS]
        if unknown or not self.variants:
            raise ConfigError(f"variants must be drawn from {', '.join(TR.VARIANTS)}; got {', '.join(unknown) or 'none'}")
        if any(k < 1 for k in self.sweep_mixtures) or not self.sweep_mixtures:
            raise ConfigError("sweep_mixtures must be a non-empty list of values >= 1")
        if self.eval_mode not in TR.EVAL_MODES:
            raise ConfigError(f"eval_mode must be one of {', '.join(TR.EVAL_MODES)}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        # validate overrides early so a typo fails before any training starts
        self.model_spec()
        self.train_config(self.seed)

    def model_spec(self, **overrides) -> TR.ModelSpec:
        return TR.ModelSpec(**{**self.model, **overrides})

    def train_config(self, seed: int) -> TR.TrainConfig:
        return TR.TrainConfig(**{**self.train, "seed": seed})

    @property
    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.runs)]


def load_manifest(path, seed: Optional[int] = None) -> Manifest:
    path = Path(path)
    values = load_kv(path)
    model_keys = {f.name for f in dataclasses.fields(TR.ModelSpec)}
    train_keys = {f.name for f in dataclasses.fields(TR.TrainConfig)} - {"seed"}
    source = str(path)
    harness = coerce_fields(_HarnessKeys, {k: v for k, v in values.items() if k not in model_keys | train_keys}, source)
    model = coerce_fields(TR.ModelSpec, {k: v for k, v in values.items() if k in model_keys}, source)
    train = coerce_fields(TR.TrainConfig, {k: v for k, v in values.items() if k in train_keys}, source)
    if seed is not None:
        harness["seed"] = seed
    if harness.get("seed") is None:
        raise ConfigError(f"{source}: 'seed' is required in an experiment manifest")
    base = path.parent
    for key in ("dataset", "synthetic", "out_dir"):
        if harness.get(key):
            harness[key] = base / harness[key]
    for key in ("variants", "sweep_mixtures"):
        if harness.get(key) is None:
            harness.pop(key, None)
    for key in ("dataset", "synthetic"):
        if harness.get(key) is not None and not harness[key].is_file():
            raise ConfigError(f"{source}: {key} file {harness[key]} does not exist")
    return Manifest(**harness, model=model, train=train)


def load_dataset(manifest: Manifest) -> data.TrajectoryDataset:
    if manifest.dataset is not None:
        return data.load_csv(manifest.dataset)
    return data.generate_synthetic(SyntheticConfig.from_file(manifest.synthetic), name=manifest.synthetic.stem)


def prepare_windows(manifest: Manifest) -> tuple[WindowSet, WindowSet]:
    windows = data.make_windows(load_dataset(manifest), manifest.model_spec().memory)
    return data.split(windows, manifest.train_fraction)


# ---------------------------------------------------------------------------
# runs and records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRecord:
    variant: str
    K: int
    seed: int
    rmse: Optional[float]  # None marks a failed run
    final_loss: Optional[float]
    seconds: float = 0.0
    error: str = ""

    @property
    def failed(self) -> bool:
        return self.rmse is None

    def sort_key(self):
        return (TR.VARIANTS.index(self.variant), self.K, self.seed)

    def row(self) -> list[str]:
        def fmt(v):
            return FAILED if v is None else repr(float(v))
        return [self.variant, str(self.K), str(self.seed), fmt(self.rmse), fmt(self.final_loss), repr(float(self.seconds))]


@dataclass(frozen=True)
class RunTask:
    variant: str
    K: int
    seed: int


def _record_k(spec: TR.ModelSpec) -> int:
    # mixture count only means something when there is a mixture head
    return spec.mixtures if spec.has_mdn else 0


def run_task(task: RunTask, manifest: Manifest, train_set: WindowSet, test_set: WindowSet, timing: bool) -> MetricsRecord:
    """Train and evaluate one (variant, K, seed) cell; failures become FAILED records."""
    start = time.perf_counter()
    k = task.K
    try:
        spec = manifest.model_spec(variant=task.variant, mixtures=task.K, cell=None)
        k = _record_k(spec)
        model = TR.build(spec, train_set.input_dim, seed=task.seed)
        result = TR.train(model, train_set, manifest.train_config(task.seed))
        rmse = TR.evaluate_rmse(model, test_set, manifest.eval_mode, seed=task.seed)
        if not math.isfinite(rmse):
            raise NonFiniteError("test predictions are not finite")
        seconds = time.perf_counter() - start if timing else 0.0
        log.info("%s K=%d seed=%d rmse=%.4f", task.variant, k, task.seed, rmse)
        return MetricsRecord(task.variant, k, task.seed, rmse, result.losses[-1], seconds)
    except Exception as exc:  # noqa: BLE001 - one bad cell must not sink the table
        log.warning("%s K=%d seed=%d failed: %s", task.variant, k, task.seed, exc)
        seconds = time.perf_counter() - start if timing else 0.0
        return MetricsRecord(task.variant, k, task.seed, None, None, seconds, f"{type(exc).__name__}: {exc}")


def run_tasks(tasks: Sequence[RunTask], manifest: Manifest, train_set: WindowSet, test_set: WindowSet,
              jobs: int = 1, timing: bool = False) -> list[MetricsRecord]:
    if jobs <= 1 or len(tasks) <= 1:
        records = [run_task(t, manifest, train_set, test_set, timing) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_task, t, manifest, train_set, test_set, timing) for t in tasks]
            records = [f.result() for f in futures]
    return sorted(records, key=MetricsRecord.sort_key)


def write_metrics(records: Sequence[MetricsRecord], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        writer.writerows(r.row() for r in sorted(records, key=MetricsRecord.sort_key))


def append_metrics(record: MetricsRecord, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(METRICS_HEADER)
        writer.writerow(record.row())


def read_metrics(path) -> list[MetricsRecord]:
    """Parse a metrics CSV written by this harness."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != METRICS_HEADER:
            raise DataFormatError(f"{path}: header must be {','.join(METRICS_HEADER)}")
        records = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(METRICS_HEADER):
                raise DataFormatError(f"{path}:{line_no}: expected {len(METRICS_HEADER)} fields")
            variant, k, seed, rmse, loss, seconds = row
            parse = (lambda v: None if v == FAILED else float(v))  # noqa: E731
            records.append(MetricsRecord(variant, int(k), int(seed), parse(rmse), parse(loss), float(seconds)))
    return records


@dataclass(frozen=True)
class Summary:
    variant: str
    K: int
    runs: int
    failed: int
    mean: float
    std: float
    median: float

    def row(self) -> list[str]:
        def fmt(v):
            return FAILED if math.isnan(v) else repr(float(v))
        return [self.variant, str(self.K), str(self.runs), str(self.failed), fmt(self.mean), fmt(self.std), fmt(self.median)]


def summarize(records: Sequence[MetricsRecord], variant: str, k: int) -> Summary:
    """Mean, sample std (ddof=1; 0 for a single run) and median over successful runs."""
    cell = [r for r in records if r.variant == variant and r.K == k]
    ok = np.array([r.rmse for r in cell if not r.failed], dtype=float)
    if ok.size == 0:
        return Summary(variant, k, len(cell), len(cell), math.nan, math.nan, math.nan)
    std = float(np.std(ok, ddof=1)) if ok.size > 1 else 0.0
    return Summary(variant, k, len(cell), len(cell) - ok.size, float(np.mean(ok)), std, float(np.median(ok)))


def write_summary(summaries: Sequence[Summary], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        writer.writerows(s.row() for s in summaries)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _out_dir(args, manifest: Optional[Manifest] = None) -> Path:
    if args.out_dir is not None:
        return Path(args.out_dir)
    if manifest is not None and manifest.out_dir is not None:
        return manifest.out_dir
    return Path("runs")


def cmd_generate(args) -> int:
    cfg = SyntheticConfig.from_file(args.config, seed=args.seed) if args.config else SyntheticConfig(
        **({"seed": args.seed} if args.seed is not None else {}))
    out = Path(args.out) if args.out else _out_dir(args) / "synthetic.csv"
    dataset = data.generate_synthetic(cfg)
    data.save_csv(dataset, out)
    print(f"wrote {out}: {len(dataset)} scans x {dataset.n_aps} APs, "
          f"{100 * data.sentinel_fraction(dataset):.1f}% undetected")
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest, args.seed)
    out = _out_dir(args, manifest)
    train_set, test_set = prepare_windows(manifest)
    spec = manifest.model_spec()
    model = TR.build(spec, train_set.input_dim, seed=manifest.seed)
    out.mkdir(parents=True, exist_ok=True)
    trace = out / "loss.csv"
    with trace.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("epoch", "loss"))

        def on_epoch(epoch, loss):
            writer.writerow((epoch + 1, repr(float(loss))))
            fh.flush()
            log.info("epoch %d loss %.6f", epoch + 1, loss)

        result = TR.train(model, train_set, manifest.train_config(manifest.seed), on_epoch)
    rmse = TR.evaluate_rmse(model, test_set, manifest.eval_mode, seed=manifest.seed)
    TR.save_checkpoint(model, out / "model.npz", extra={
        "seed": manifest.seed, "final_loss": result.losses[-1], "train_fraction": manifest.train_fraction})
    print(f"{spec.variant} seed={manifest.seed} final_loss={result.losses[-1]:.6f} "
          f"test_rmse={rmse:.6f} -> {out / 'model.npz'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, extra = TR.load_checkpoint(args.checkpoint)
    if args.data:
        dataset = data.load_csv(args.data)
    else:
        dataset = data.generate_synthetic(SyntheticConfig.from_file(args.synthetic))
    if dataset.n_aps != model.input_dim:
        raise ConfigError(f"checkpoint expects {model.input_dim} APs, dataset has {dataset.n_aps}")
    windows = data.make_windows(dataset, model.spec.memory)
    if args.split != "all":
        fraction = args.train_fraction if args.train_fraction is not None else extra.get("train_fraction", 0.8)
        train_set, test_set = data.split(windows, fraction)
        windows = train_set if args.split == "train" else test_set
    seed = args.seed if args.seed is not None else int(extra.get("seed", 0))
    start = time.perf_counter()
    rmse = TR.evaluate_rmse(model, windows, args.mode, seed=seed)
    seconds = time.perf_counter() - start if args.timing else 0.0
    record = MetricsRecord(model.spec.variant, _record_k(model.spec), seed, rmse, extra.get("final_loss"), seconds)
    append_metrics(record, _out_dir(args) / "metrics.csv")
    print(",".join(METRICS_HEADER))
    print(",".join(record.row()))
    return EXIT_OK


def cmd_compare(args) -> int:
    manifest = load_manifest(args.manifest, args.seed)
    if args.runs is not None:
        manifest.runs = args.runs
    out = _out_dir(args, manifest)
    train_set, test_set = prepare_windows(manifest)
    k = manifest.model_spec().mixtures
    tasks = [RunTask(v, k, s) for v in manifest.variants for s in manifest.seeds]
    records = run_tasks(tasks, manifest, train_set, test_set, args.jobs, args.timing)
    write_metrics(records, out / "compare_runs.csv")
    summaries = [summarize(records, v, _record_k(manifest.model_spec(variant=v, cell=None))) for v in manifest.variants]
    write_summary(summaries, out / "compare.csv")
    (out / "compare.svg").write_text(plots.bar_chart(
        [s.variant for s in summaries], [s.mean for s in summaries], [s.std for s in summaries],
        title=f"Test RMSE by variant ({manifest.runs} runs, mean and std)"), encoding="utf-8")
    _print_summary(summaries)
    return EXIT_OK


def cmd_sweep(args) -> int:
    manifest = load_manifest(args.manifest, args.seed)
    if args.runs is not None:
        manifest.runs = args.runs
    mixtures = args.mixtures if args.mixtures is not None else manifest.sweep_mixtures
    if any(k < 1 for k in mixtures):
        raise ConfigError("mixture counts must be >= 1")
    spec = manifest.model_spec()
    if not spec.has_mdn:
        raise ConfigError(f"variant {spec.variant} has no mixture head to sweep")
    out = _out_dir(args, manifest)
    train_set, test_set = prepare_windows(manifest)
    tasks = [RunTask(spec.variant, k, s) for k in mixtures for s in manifest.seeds]
    records = run_tasks(tasks, manifest, train_set, test_set, args.jobs, args.timing)
    write_metrics(records, out / "sweep_runs.csv")
    summaries = [summarize(records, spec.variant, k) for k in mixtures]
    write_summary(summaries, out / "sweep.csv")
    (out / "sweep.svg").write_text(plots.line_chart(
        mixtures, [s.mean for s in summaries], [s.std for s in summaries],
        title=f"{spec.variant}: test RMSE vs mixture count ({manifest.runs} runs)",
        x_label="mixture count K"), encoding="utf-8")
    _print_summary(summaries)
    return EXIT_OK


def _print_summary(summaries: Sequence[Summary]) -> None:
    print(",".join(SUMMARY_HEADER))
    for s in summaries:
        print(",".join(s.row()))


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="base seed (overrides the manifest/config)")
    common.add_argument("--out-dir", help="output directory (default: manifest out_dir, else ./runs)")
    common.add_argument("--jobs", type=int, default=1, help="parallel training runs (compare/sweep)")
    common.add_argument("--timing", action="store_true",
                        help="record wall-clock seconds; off by default so outputs are reproducible")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="cmdrnn", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic RSSI trajectory CSV")
    p.add_argument("--config", help="synthetic generator config (key = value); defaults if omitted")
    p.add_argument("--out", help="CSV path (default: <out-dir>/synthetic.csv)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train one model; writes model.npz and loss.csv")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="RMSE of a checkpoint; appends to <out-dir>/metrics.csv")
    p.add_argument("checkpoint")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--data", help="trajectory CSV")
    source.add_argument("--synthetic", help="synthetic generator config")
    p.add_argument("--mode", choices=TR.EVAL_MODES, default="mle")
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--train-fraction", type=float, help="split point (default: the one used in training)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", parents=[common], help="all variants x runs; CSV tables and SVG bar chart")
    p.add_argument("manifest")
    p.add_argument("--runs", type=int, help="runs per variant (overrides the manifest)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", parents=[common], help="mixture-count sweep; CSV tables and SVG curve")
    p.add_argument("manifest")
    p.add_argument("--mixtures", type=_int_list, help="e.g. 1,5,10,20,30")
    p.add_argument("--runs", type=int, help="runs per mixture count (overrides the manifest)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    if getattr(args, "runs", None) is not None and args.runs < 1:
        parser.error("--runs must be >= 1")
    try:
        return args.func(args)
    except TR.TrainingAborted as exc:
        print(f"cmdrnn: training aborted at {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NonFiniteError as exc:
        print(f"cmdrnn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataFormatError, ValueError, OSError) as exc:
        print(f"cmdrnn: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
