"""Command-line entry point: ``cnv generate|run|bounds|estimate``.

Each subcommand reads an optional JSON configuration document
(``--config``); command-line flags override the document.  Unknown keys are
rejected with their key path.  Every invocation writes ``manifest.json``
holding the resolved configuration, so a run can be repeated exactly.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import __version__
from ._accel import BACKEND
from .bounds import (BoundsReport, GapSpec, RegionModel, make_margin, optimal_diameter_prop1,
                     phi, phi_terms, solve_tilde_delta, theorem4_z, two_approx_pool_search)
from .core import SplitSpec, read_csv
from .datagen import GeneratorSpec, export_csv, generate
from .errors import ConfigError, DataError, NumericalError
from .estimation import algorithm3_loop
from .harness import (ExperimentConfig, bike_tables, load_bike, run_bike, run_comparison,
                      run_pooling_sweep, run_samplesize_sweep, summarize, write_predictions,
                      write_results, write_summary)
from .regressors import make_learner

__all__ = ["main", "build_parser"]

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# configuration documents


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GeneratorModel(_Strict):
    family: str = "ma"
    d: Optional[int] = None
    theta: Optional[List[float]] = None
    theta0: float = 5.0
    x_range: Optional[Tuple[float, float]] = None

    def spec(self, seed: int) -> GeneratorSpec:
        return GeneratorSpec(self.family, self.d, None if self.theta is None else tuple(self.theta),
                             seed, self.theta0, self.x_range)


class GenerateConfig(GeneratorModel):
    n: int = 2000
    seed: int = 0


class LearnerModel(_Strict):
    name: str
    params: dict = Field(default_factory=dict)


class SplitModel(_Strict):
    train: float = 0.75
    calib: float = 0.15
    test: float = 0.10


class RunConfig(_Strict):
    mode: Literal["compare", "pooling_sweep", "samplesize_sweep", "bike"] = "compare"
    generator: Optional[GeneratorModel] = None
    n: int = 2000
    csv_path: Optional[str] = None
    target: Optional[str] = None
    features: Optional[List[str]] = None
    learners: List[Union[str, LearnerModel]] = Field(default_factory=lambda: ["linear_qr"])
    quantiles: List[float] = Field(default_factory=lambda: [0.25, 0.5, 0.75])
    split: SplitModel = Field(default_factory=SplitModel)
    pooling: Optional[Union[int, str]] = None
    replications: Optional[int] = None
    seed: int = 0
    m_grid: List[Union[int, str]] = Field(default_factory=list)
    fractions: List[float] = Field(default_factory=list)
    standardize: bool = True
    keep_predictions: bool = False
    plots: bool = True


class MarginModel(_Strict):
    family: str = "uniform"
    params: dict = Field(default_factory=lambda: {"gamma_low": 1.0, "gamma_high": 2.0})


class GapModel(_Strict):
    C: float = 1.0
    nu: float = 1.0


class RegionConfig(_Strict):
    rho: float = 0.75
    n: float = 10_000.0
    iota: float = 1.0
    xi_max: float = 1.0


class GridModel(_Strict):
    lo: float
    hi: float
    count: int = 200
    log: bool = False

    def values(self) -> np.ndarray:
        if not (self.count >= 1 and self.hi >= self.lo):
            raise ConfigError(f"bad grid {self.lo}..{self.hi} x{self.count}")
        if self.log:
            if not self.lo > 0:
                raise ConfigError("a log grid needs lo > 0")
            return np.geomspace(self.lo, self.hi, self.count)
        return np.linspace(self.lo, self.hi, self.count)


class Prop1Model(_Strict):
    c1: Optional[float] = None
    c2: Optional[float] = None


class Theorem4Model(_Strict):
    delta_conf: float = 0.05
    n2: float = 200.0
    kappa: float = 0.0


class BoundsConfig(_Strict):
    alpha: float = 0.5
    margin: MarginModel = Field(default_factory=MarginModel)
    gap: GapModel = Field(default_factory=GapModel)
    region: RegionConfig = Field(default_factory=RegionConfig)
    xi_grid: Union[GridModel, List[float]] = Field(
        default_factory=lambda: GridModel(lo=1e-3, hi=1.0, count=200))
    delta_grid: Union[GridModel, List[float]] = Field(
        default_factory=lambda: GridModel(lo=0.0, hi=1.0, count=200))
    tol: float = 1e-10
    prop1: Optional[Prop1Model] = None
    theorem4: Optional[Theorem4Model] = None
    seed: int = 0


class EstimateConfig(_Strict):
    generator: Optional[GeneratorModel] = None
    n: int = 2000
    csv_path: Optional[str] = None
    target: str = "demand"
    features: Optional[List[str]] = None
    alpha: float = 0.5
    learner: Union[str, LearnerModel] = "linear_qr"
    init_xi: float = 1.0
    max_rounds: int = 5
    stability_tol: float = 0.05
    rho: float = 0.75
    delta_grid: Optional[List[float]] = None
    offsets: Optional[List[float]] = None
    rho_grid: List[float] = Field(default_factory=lambda: [0.25, 0.5, 1.0])
    xi_bounds: Optional[Tuple[float, float]] = None
    n_xi: int = 40
    max_clusters: int = 4
    standardize_features: bool = True
    max_pairs: int = 10_000
    seed: int = 0


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "invalid configuration:\n  " + "\n  ".join(lines)


def _load_config(path, model, overrides: dict):
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("the configuration document must be a JSON object")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return model.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None


def _learner(entry):
    if isinstance(entry, str):
        return make_learner(entry)
    return make_learner(entry.name, **entry.params)


def _seed(value) -> int:
    v = int(value)
    if not 0 <= v < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return v


# ---------------------------------------------------------------------------
# output helpers


def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (np.floating, np.integer)):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest(outdir: Path, command: str, config: BaseModel, argv, extra=None) -> None:
    doc = dict(command=command, version=__version__, backend=BACKEND,
               config=config.model_dump(mode="json"), argv=list(argv))
    if extra:
        doc.update(extra)
    _write_json(outdir / "manifest.json", doc)


class _Log:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def __call__(self, msg: str) -> None:
        if not self.quiet:
            print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args, argv) -> int:
    overrides = dict(family=args.family, n=args.n, d=args.d, seed=args.seed)
    cfg = _load_config(args.config, GenerateConfig, overrides)
    if args.out is None:
        raise ConfigError("generate needs --out FILE.csv")
    if cfg.n < 1:
        raise ConfigError(f"n: must be at least 1, got {cfg.n}")
    spec = GeneratorModel(**cfg.model_dump(exclude={"n", "seed"})).spec(_seed(cfg.seed))
    out = Path(args.out)
    export_csv(spec, cfg.n, out)
    _manifest(out.parent, "generate", cfg, argv, dict(output=out.name))
    _Log(args.quiet)(f"wrote {cfg.n} rows to {out}")
    return EXIT_OK


def _experiment(cfg: RunConfig) -> ExperimentConfig:
    learners = tuple(_learner(e) for e in cfg.learners)
    split = SplitSpec(cfg.split.train, cfg.split.calib, cfg.split.test)
    kw = dict(learners=learners, quantiles=tuple(cfg.quantiles), split=split,
              seed=_seed(cfg.seed), m_grid=tuple(cfg.m_grid), fractions=tuple(cfg.fractions),
              standardize=cfg.standardize, keep_predictions=cfg.keep_predictions, n=cfg.n)
    if cfg.pooling is not None:
        kw["pooling"] = cfg.pooling
    if cfg.replications is not None:
        kw["replications"] = cfg.replications
    if cfg.mode == "bike":
        path = cfg.csv_path or os.environ.get("CNV_BIKE_CSV")
        if not path:
            raise ConfigError("bike mode needs csv_path (or the CNV_BIKE_CSV environment variable)")
        if not Path(path).is_file():
            raise ConfigError(f"bike mode: dataset not found at {path}")
        return ExperimentConfig.bike(path, **kw)
    if cfg.csv_path is not None:
        if cfg.generator is not None:
            raise ConfigError("give either generator or csv_path, not both")
        return ExperimentConfig(csv_path=cfg.csv_path, target=cfg.target or "demand",
                                features=None if cfg.features is None else tuple(cfg.features), **kw)
    if cfg.generator is None:
        raise ConfigError("run needs a generator or a csv_path")
    return ExperimentConfig(generator=cfg.generator.spec(0), **kw)


def cmd_run(args, argv) -> int:
    cfg = _load_config(args.config, RunConfig, dict(seed=args.seed))
    log = _Log(args.quiet)
    exp = _experiment(cfg)
    outdir = Path(args.out or ".")
    outdir.mkdir(parents=True, exist_ok=True)
    jobs = args.jobs or 1
    runner = dict(compare=run_comparison, pooling_sweep=run_pooling_sweep,
                  samplesize_sweep=run_samplesize_sweep, bike=run_bike)[cfg.mode]
    log(f"{cfg.mode}: {exp.replications} replications, {len(exp.learners)} learners")
    records = runner(exp, jobs=jobs)
    summary = summarize(records)
    summary["mode"] = cfg.mode
    write_results(records, outdir / "results.csv")
    write_summary(summary, outdir / "summary.json")
    if cfg.keep_predictions:
        write_predictions(records, outdir / "predictions.npz")
    plots = []
    if cfg.plots:
        from . import plotting

        if cfg.mode == "pooling_sweep":
            plots = plotting.plot_pooling_sweep(summary, outdir)
        elif cfg.mode == "samplesize_sweep":
            plots = plotting.plot_samplesize(summary, outdir)
        else:
            plots = plotting.plot_comparison(summary, outdir)
    if cfg.mode == "bike":
        _write_json(outdir / "bike_tables.json", bike_tables(load_bike(exp.csv_path)))
    _manifest(outdir, "run", cfg, argv, dict(jobs=jobs, resolved_csv=exp.csv_path,
                                             plots=[p.name for p in plots]))
    log(f"wrote {len(records)} records to {outdir} ({summary['failures']} failed)")
    return EXIT_OK


def _grid(g) -> np.ndarray:
    if isinstance(g, GridModel):
        return g.values()
    arr = np.asarray(g, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ConfigError("grids must be nonempty lists of numbers")
    return arr


def cmd_bounds(args, argv) -> int:
    cfg = _load_config(args.config, BoundsConfig, dict(seed=args.seed))
    params = dict(cfg.margin.params)
    if cfg.margin.family in ("gaussian", "exponential"):
        params.setdefault("alpha", cfg.alpha)
    margin = make_margin(cfg.margin.family, **params)
    gap = GapSpec(cfg.gap.C, cfg.gap.nu)
    r = cfg.region
    region = RegionModel(r.rho, r.n, r.iota, r.xi_max)
    xis = _grid(cfg.xi_grid)
    deltas = _grid(cfg.delta_grid)

    grid = np.array([[phi(d, x, region, margin, gap) for d in deltas] for x in xis])
    i, j = np.unravel_index(int(np.argmin(grid)), grid.shape)
    report = BoundsReport()
    extra = dict(margin=margin.to_dict(), gap=dict(C=gap.C, nu=gap.nu),
                 grid_min=dict(phi=float(grid[i, j]), xi=float(xis[i]), delta=float(deltas[j])),
                 phi_grid_min_by_xi=[dict(xi=float(x), phi=float(grid[k].min()),
                                          delta=float(deltas[int(np.argmin(grid[k]))]))
                                     for k, x in enumerate(xis)])
    try:
        search = two_approx_pool_search(xis, region, margin, gap, cfg.tol)
    except NumericalError as exc:
        extra["two_approx"] = dict(status="no_crossing", error=str(exc))
    else:
        n1, n2 = region.n1(search.xi), region.n2(search.xi)
        a, b = phi_terms(search.delta, n1, n2, search.xi, margin, gap)
        report.xi, report.delta, report.phi = search.xi, search.delta, search.phi
        extra["two_approx"] = dict(status="ok", xi=search.xi, delta_tilde=search.delta,
                                   phi=search.phi, residual=abs(a - b),
                                   ratio_to_grid_min=search.phi / grid[i, j] if grid[i, j] > 0 else None)
    # a single Delta-tilde at the largest diameter, for quick inspection
    try:
        d_top = solve_tilde_delta(float(xis[-1]), region, margin, gap, cfg.tol)
        extra["delta_tilde_at_xi_max"] = dict(xi=float(xis[-1]), delta=d_top)
    except NumericalError:
        extra["delta_tilde_at_xi_max"] = dict(xi=float(xis[-1]), delta=None)

    if cfg.prop1 is not None or margin.family == "linear":
        p = cfg.prop1 or Prop1Model()
        c1 = p.c1 if p.c1 is not None else margin.params.get("c1")
        c2 = p.c2 if p.c2 is not None else margin.params.get("c2")
        if c1 is None or c2 is None:
            raise ConfigError("prop1: c1 and c2 are required unless the margin family is linear")
        res = optimal_diameter_prop1(c1, c2, r.rho, r.n, r.iota, gap.nu)
        report.roots = list(res.roots)
        extra["prop1"] = res.to_dict()
    if cfg.theorem4 is not None:
        t = cfg.theorem4
        z = theorem4_z(t.delta_conf, t.n2, margin, t.kappa)
        report.z = z
        extra["theorem4"] = dict(delta_conf=t.delta_conf, n2=t.n2, kappa=t.kappa, z=z,
                                 levels=[cfg.alpha - z, cfg.alpha + z])
    report.extra = extra
    outdir = Path(args.out or ".")
    _write_json(outdir / "bounds.json", report.to_dict())
    _manifest(outdir, "bounds", cfg, argv)
    _Log(args.quiet)(f"wrote {outdir / 'bounds.json'}")
    return EXIT_OK


def cmd_estimate(args, argv) -> int:
    cfg = _load_config(args.config, EstimateConfig, dict(seed=args.seed))
    seed = _seed(cfg.seed)
    if (cfg.generator is None) == (cfg.csv_path is None):
        raise ConfigError("estimate needs exactly one of generator and csv_path")
    if cfg.csv_path is not None:
        data = read_csv(cfg.csv_path, target=cfg.target, features=cfg.features)
    else:
        data = generate(cfg.generator.spec(seed), cfg.n)
    res = algorithm3_loop(
        data, cfg.alpha, cfg.init_xi, _learner(cfg.learner), max_rounds=cfg.max_rounds,
        stability_tol=cfg.stability_tol, rho=cfg.rho, delta_grid=cfg.delta_grid,
        offsets=cfg.offsets, rho_grid=tuple(cfg.rho_grid), xi_bounds=cfg.xi_bounds,
        n_xi=cfg.n_xi, max_clusters=cfg.max_clusters, seed=seed,
        standardize_features=cfg.standardize_features, max_pairs=cfg.max_pairs)
    outdir = Path(args.out or ".")
    outdir.mkdir(parents=True, exist_ok=True)
    res.margins.to_csv(outdir / "margins.csv")
    res.kappa.to_csv(outdir / "kappa.csv")
    _write_json(outdir / "estimate.json", res.to_dict())
    _manifest(outdir, "estimate", cfg, argv)
    _Log(args.quiet)(f"selected xi={res.xi:.6g} after {len(res.trace)} rounds")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON configuration document")
    common.add_argument("--out", metavar="DIR", help="output directory (a file path for generate)")
    common.add_argument("--seed", type=int, metavar="U64", help="master seed (overrides the config)")
    common.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes for run")
    common.add_argument("--quiet", action="store_true", help="suppress progress messages")

    p = argparse.ArgumentParser(prog="cnv", description="Calibrated contextual quantile prediction.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset as CSV")
    g.add_argument("--family", help="ml, ma, example2, example3 or linear")
    g.add_argument("--n", type=int, help="number of rows")
    g.add_argument("--d", type=int, help="feature dimension")
    sub.add_parser("run", parents=[common], help="raw versus calibrated experiments")
    sub.add_parser("bounds", parents=[common], help="coverage-gap bounds and pooling diameter")
    sub.add_parser("estimate", parents=[common], help="estimate margins, gap and pooling diameter")
    return p


_COMMANDS = dict(generate=cmd_generate, run=cmd_run, bounds=cmd_bounds, estimate=cmd_estimate)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    if args.jobs is not None and args.jobs < 1:
        parser.error("--jobs must be at least 1")
    try:
        return _COMMANDS[args.command](args, argv)
    except ConfigError as exc:
        print(f"cnv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"cnv {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"cnv {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
