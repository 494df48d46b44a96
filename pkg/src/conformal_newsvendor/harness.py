"""Experiment orchestration: raw versus calibrated comparisons and sweeps.

Each replication owns a random stream derived from ``(seed, rep)``, so
adding replications or running them on more workers never changes the
records of existing ones.  A failure inside one cell is recorded and the
run continues.

Records are emitted sorted by ``(learner, quantile, fraction, rep,
variant, pooling)``.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .conformal import calibrate, _scaler
from .core import Dataset, RngStream, SplitSpec, read_csv, split
from .datagen import GeneratorSpec, generate
from .errors import ConfigError, DataError, NewsvendorError
from .loss import check_level, pinball_array
from .neighbors import PoolingSpec

__all__ = [
    "ExperimentConfig",
    "ResultRecord",
    "BIKE_FEATURES",
    "BIKE_TARGET",
    "RESULT_COLUMNS",
    "run_comparison",
    "run_pooling_sweep",
    "run_samplesize_sweep",
    "run_bike",
    "load_bike",
    "bike_tables",
    "summarize",
    "write_results",
    "write_summary",
    "write_predictions",
    "parse_pooling",
]

BIKE_FEATURES = ("season", "yr", "mnth", "hr", "holiday", "weekday", "workingday",
                 "weathersit", "temp", "atemp", "hum", "windspeed")
BIKE_TARGET = "cnt"
RESULT_COLUMNS = ("learner", "quantile", "variant", "pooling", "fraction", "rep", "loss", "wall_ms")


def parse_pooling(value) -> PoolingSpec:
    """``"all"``, an integer count, ``"xi=<float>"`` or a PoolingSpec."""
    if isinstance(value, PoolingSpec):
        return value
    if isinstance(value, str):
        v = value.strip().lower()
        if v == "all":
            return PoolingSpec.all()
        if v.startswith("xi="):
            return PoolingSpec.radius(float(v[3:]))
        try:
            value = int(v)
        except ValueError:
            raise ConfigError(f"cannot read pooling {value!r}; use 'all', an integer or 'xi=<diameter>'") from None
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ConfigError(f"cannot read pooling {value!r}")
    try:
        return PoolingSpec.count(int(value))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a run.

    Exactly one of ``generator`` (with ``n`` rows per replication) and
    ``csv_path`` supplies the data.  For a CSV the rows are fixed and each
    replication reshuffles the split.  ``learners`` are fitted learner
    configs (anything with ``fit(X, y, alpha)`` and a unique ``name``).
    """

    learners: tuple
    generator: Optional[GeneratorSpec] = None
    n: int = 2000
    csv_path: Optional[str] = None
    target: str = "demand"
    features: Optional[tuple] = None
    quantiles: tuple = (0.25, 0.5, 0.75)
    split: SplitSpec = field(default_factory=SplitSpec)
    pooling: PoolingSpec = field(default_factory=lambda: PoolingSpec.count(50))
    replications: int = 100
    seed: int = 0
    m_grid: tuple = ()
    fractions: tuple = ()
    standardize: bool = True
    keep_predictions: bool = False

    def __post_init__(self):
        if (self.generator is None) == (self.csv_path is None):
            raise ConfigError("give exactly one of generator and csv_path")
        learners = tuple(self.learners)
        if not learners:
            raise ConfigError("learners must be nonempty")
        for ln in learners:
            if not callable(getattr(ln, "fit", None)):
                raise ConfigError(f"learner {ln!r} has no fit method")
        names = [ln.name for ln in learners]
        if len(set(names)) != len(names):
            raise ConfigError(f"learner names must be unique, got {names}")
        object.__setattr__(self, "learners", learners)
        qs = tuple(check_level(a) for a in self.quantiles)
        if not qs:
            raise ConfigError("quantiles must be nonempty")
        object.__setattr__(self, "quantiles", qs)
        object.__setattr__(self, "pooling", parse_pooling(self.pooling))
        object.__setattr__(self, "m_grid", tuple(parse_pooling(m) for m in self.m_grid))
        fr = tuple(float(f) for f in self.fractions)
        if any(not 0 < f <= 1 for f in fr):
            raise ConfigError(f"fractions must lie in (0, 1], got {fr}")
        object.__setattr__(self, "fractions", fr)
        if int(self.replications) < 1:
            raise ConfigError("replications must be at least 1")
        if int(self.n) < 1:
            raise ConfigError("n must be at least 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @classmethod
    def bike(cls, csv_path, learners, **kw) -> "ExperimentConfig":
        """Bike-share protocol defaults: 20 nearest points, 50 replications."""
        base = dict(target=BIKE_TARGET, features=BIKE_FEATURES, pooling=PoolingSpec.count(20),
                    replications=50)
        base.update(kw)
        return cls(learners=learners, csv_path=str(csv_path), **base)


@dataclass(frozen=True)
class ResultRecord:
    """One (cell, replication) outcome.

    ``pooling`` is ``"none"`` for raw predictions.  A failed cell has
    ``loss = nan`` and the error text in ``error``.  Timing and the optional
    persisted predictions do not take part in equality.
    """

    learner: str
    quantile: float
    variant: str
    pooling: str
    fraction: float
    rep: int
    loss: float
    wall_ms: float = field(default=0.0, compare=False)
    error: Optional[str] = None
    predictions: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    targets: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    @property
    def failed(self) -> bool:
        return self.error is not None

    def row(self) -> list:
        return [self.learner, repr(self.quantile), self.variant, self.pooling, repr(self.fraction),
                str(self.rep), repr(self.loss), f"{self.wall_ms:.3f}"]


def _pool_order(label: str) -> float:
    if label == "none":
        return -1.0
    if label == "all":
        return math.inf
    if label.startswith("xi="):
        return float(label[3:])
    return float(label)


def _sort_key(r: ResultRecord):
    return (r.learner, r.quantile, r.fraction, r.rep, r.variant != "raw", _pool_order(r.pooling))


# ---------------------------------------------------------------------------
# per-replication work


def _rep_streams(seed: int, rep: int):
    root = RngStream(int(seed), 0).spawn(int(rep))
    # data, split and subsample seeds
    return [int(root.spawn(j).seed) for j in range(3)]


def _rep_data(cfg: ExperimentConfig, base: Optional[Dataset], data_seed: int) -> Dataset:
    if cfg.generator is not None:
        return generate(replace(cfg.generator, seed=data_seed), cfg.n)
    return base


def _subsample(data: Dataset, fraction: float, seed: int) -> Dataset:
    if fraction >= 1.0:
        return data
    k = math.floor(data.n * fraction + 0.5)
    # sorting keeps fraction 1.0 equal to the full data and nests smaller fractions
    idx = np.sort(RngStream(seed, 0).permutation(data.n)[:max(k, 0)])
    if idx.size == 0:
        raise DataError(f"fraction {fraction} leaves no rows of {data.n}")
    return data.subset(idx)


def _record(cfg, learner, alpha, variant, pooling, fraction, rep, pred, yt, t0):
    wall = 1e3 * (time.perf_counter() - t0)
    loss = float(pinball_array(pred, yt, alpha).mean())
    keep = cfg.keep_predictions
    return ResultRecord(learner.name, alpha, variant, pooling, fraction, rep, loss, wall,
                        predictions=np.array(pred, dtype=float) if keep else None,
                        targets=np.array(yt, dtype=float) if keep else None)


def _failed(learner, alpha, variant, pooling, fraction, rep, exc, t0):
    wall = 1e3 * (time.perf_counter() - t0)
    return ResultRecord(learner.name, alpha, variant, pooling, fraction, rep, math.nan, wall,
                        error=f"{type(exc).__name__}: {exc}")


def _cells(cfg: ExperimentConfig, data: Dataset, split_seed: int, fraction: float, rep: int,
           poolings: Sequence[PoolingSpec]) -> list:
    """Raw record plus one calibrated record per pooling, for every learner and level."""
    out = []
    labels = [p.label() for p in poolings]
    try:
        tr, ca, te = split(data, replace(cfg.split, seed=split_seed))
    except NewsvendorError as exc:
        t0 = time.perf_counter()
        for ln in cfg.learners:
            for a in cfg.quantiles:
                out.append(_failed(ln, a, "raw", "none", fraction, rep, exc, t0))
                out.extend(_failed(ln, a, "calibrated", lab, fraction, rep, exc, t0) for lab in labels)
        return out
    train, calib, test = data.subset(tr), data.subset(ca), data.subset(te)
    scale = _scaler(train.features, cfg.standardize)
    for ln in cfg.learners:
        for a in cfg.quantiles:
            t0 = time.perf_counter()
            try:
                base = ln.fit(train.features, train.demand, a)
                raw = np.asarray(base.predict(test.features), dtype=float)
            except Exception as exc:  # learner failure is recorded, not raised
                out.append(_failed(ln, a, "raw", "none", fraction, rep, exc, t0))
                out.extend(_failed(ln, a, "calibrated", lab, fraction, rep, exc, t0) for lab in labels)
                continue
            out.append(_record(cfg, ln, a, "raw", "none", fraction, rep, raw, test.demand, t0))
            model = None
            for pool, lab in zip(poolings, labels):
                t1 = time.perf_counter()
                try:
                    if model is None:
                        model = calibrate(base, calib, a, pool, scale)
                    else:
                        model = model.with_pooling(pool)
                    corr, _ = model.corrections(test.features)
                    pred = raw + corr
                except Exception as exc:
                    out.append(_failed(ln, a, "calibrated", lab, fraction, rep, exc, t1))
                    continue
                out.append(_record(cfg, ln, a, "calibrated", lab, fraction, rep, pred, test.demand, t1))
    return out


def _run_rep(args):
    cfg, base, rep, poolings, fractions = args
    data_seed, split_seed, sub_seed = _rep_streams(cfg.seed, rep)
    try:
        data = _rep_data(cfg, base, data_seed)
    except NewsvendorError as exc:
        t0 = time.perf_counter()
        return [_failed(ln, a, "raw", "none", f, rep, exc, t0)
                for f in fractions for ln in cfg.learners for a in cfg.quantiles]
    out = []
    for f in fractions:
        try:
            sub = _subsample(data, f, sub_seed)
        except NewsvendorError as exc:
            t0 = time.perf_counter()
            out.extend(_failed(ln, a, "raw", "none", f, rep, exc, t0)
                       for ln in cfg.learners for a in cfg.quantiles)
            continue
        out.extend(_cells(cfg, sub, split_seed, f, rep, poolings))
    return out


def _load_base(cfg: ExperimentConfig) -> Optional[Dataset]:
    if cfg.csv_path is None:
        return None
    return read_csv(cfg.csv_path, target=cfg.target, features=cfg.features)


def _execute(cfg: ExperimentConfig, poolings, fractions, jobs: int = 1, base=None) -> list:
    if base is None:
        base = _load_base(cfg)
    tasks = [(cfg, base, r, tuple(poolings), tuple(fractions)) for r in range(int(cfg.replications))]
    jobs = max(1, int(jobs or 1))
    if jobs == 1 or len(tasks) == 1:
        chunks = [_run_rep(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as ex:
            chunks = list(ex.map(_run_rep, tasks))
    records = [r for c in chunks for r in c]
    records.sort(key=_sort_key)
    return records


def run_comparison(config: ExperimentConfig, jobs: int = 1) -> list:
    """Raw versus locally calibrated test loss for every learner and level."""
    return _execute(config, [config.pooling], [1.0], jobs)


def _check_grid(config: ExperimentConfig):
    if not config.m_grid:
        raise ConfigError("a pooling sweep needs a nonempty m_grid")
    return config.m_grid


def run_pooling_sweep(config: ExperimentConfig, jobs: int = 1) -> list:
    """One global fit per replication, calibrated at every pooling in ``m_grid``.

    Counts larger than the calibration set are rejected up front for
    generated data; for smaller data they surface as failed cells.
    """
    grid = _check_grid(config)
    base = _load_base(config)
    n = config.n if base is None else base.n
    n2 = config.split.sizes(n)[1]
    too_big = [p.m for p in grid if p.mode == "count" and p.m > n2]
    if too_big:
        raise ConfigError(f"m_grid entries {too_big} exceed the {n2} calibration rows")
    return _execute(config, grid, [1.0], jobs, base)


def run_samplesize_sweep(config: ExperimentConfig, jobs: int = 1) -> list:
    """Pooling sweep on nested subsamples of each replication's data."""
    if not config.fractions:
        raise ConfigError("a sample-size sweep needs a nonempty fractions grid")
    grid = config.m_grid or (config.pooling,)
    return _execute(config, grid, config.fractions, jobs)


def load_bike(path) -> Dataset:
    """Read the hourly bike-share CSV (``cnt`` is the demand column)."""
    if not Path(path).is_file():
        raise DataError(f"bike CSV not found: {path}")
    return read_csv(path, target=BIKE_TARGET, features=BIKE_FEATURES)


def run_bike(config: ExperimentConfig, jobs: int = 1) -> list:
    """Comparison on the bike-share data, one reshuffled split per replication."""
    if config.csv_path is None:
        raise ConfigError("run_bike needs csv_path")
    base = load_bike(config.csv_path)
    return _execute(config, [config.pooling], [1.0], jobs, base)


def bike_tables(data: Dataset) -> dict:
    """Descriptive aggregates: demand histogram and mean demand by hour and weekday."""
    names = list(data.feature_names)
    y = data.demand
    counts, edges = np.histogram(y, bins=30)
    out = dict(histogram=dict(edges=edges.tolist(), counts=counts.tolist()))
    if "hr" in names:
        hr = data.features[:, names.index("hr")].astype(int)
        out["hourly_mean"] = {int(h): float(y[hr == h].mean()) for h in np.unique(hr)}
        if "weekday" in names:
            wd = data.features[:, names.index("weekday")].astype(int)
            out["weekday_hour_mean"] = {f"{int(w)}-{int(h)}": float(y[(wd == w) & (hr == h)].mean())
                                        for w in np.unique(wd) for h in np.unique(hr)
                                        if np.any((wd == w) & (hr == h))}
    return out


# ---------------------------------------------------------------------------
# output


def summarize(records: Sequence[ResultRecord]) -> dict:
    """Per-cell mean, sample std, count and failures, plus percent reduction.

    The reduction of a calibrated cell is ``100 * (raw - calibrated) / raw``
    against the raw cell with the same learner, level and fraction.
    """
    cells = {}
    for r in records:
        key = (r.learner, r.quantile, r.variant, r.pooling, r.fraction)
        c = cells.setdefault(key, dict(losses=[], failures=0))
        if r.failed:
            c["failures"] += 1
        else:
            c["losses"].append(r.loss)
    out = []
    means = {}
    for key in sorted(cells, key=lambda k: (k[0], k[1], k[4], k[2] != "raw", _pool_order(k[3]))):
        losses = np.asarray(cells[key]["losses"])
        mean = float(losses.mean()) if losses.size else math.nan
        std = float(losses.std(ddof=1)) if losses.size > 1 else (0.0 if losses.size else math.nan)
        means[key] = mean
        out.append(dict(learner=key[0], quantile=key[1], variant=key[2], pooling=key[3],
                        fraction=key[4], mean=mean, std=std, count=int(losses.size),
                        failures=cells[key]["failures"]))
    for cell in out:
        if cell["variant"] != "raw":
            raw = means.get((cell["learner"], cell["quantile"], "raw", "none", cell["fraction"]))
            ok = raw is not None and math.isfinite(raw) and raw > 0 and math.isfinite(cell["mean"])
            cell["reduction_pct"] = 100.0 * (raw - cell["mean"]) / raw if ok else None
    return dict(cells=out, failures=int(sum(c["failures"] for c in out)), records=len(records))


def write_results(records: Sequence[ResultRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in records:
            w.writerow(r.row())


def write_predictions(records: Sequence[ResultRecord], path) -> None:
    """Persist kept predictions and targets as a compressed ``.npz``, keyed by record index."""
    arrays = {}
    for i, r in enumerate(records):
        if r.predictions is not None:
            arrays[f"pred_{i}"] = r.predictions
            arrays[f"y_{i}"] = r.targets
    np.savez_compressed(path, **arrays)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


def write_summary(summary: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, list):
            return [clean(x) for x in v]
        return v

    path.write_text(json.dumps(clean(summary), indent=2, default=_json_default) + "\n", encoding="utf-8")

