"""Three-stage identification pipeline and scenario runners.

Stage 1 infers latent signals with the guided residual search, stage 2
fits the residual network on them, stage 3 refines everything with
multiple shooting.  All randomness derives from ``PipelineConfig.seed``.
"""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .data_io import fit_linear_init, normalize
from .errors import ConfigError
from .lti_core import apply_similarity, normalization_transform, simulate_lti
from .nllfr_model import NllfrModel, shift_diagnostic, simulation_nrmse
from .residual_search import ResidualSearchConfig, bilevel_search
from .shooting import ShootingConfig, build_intervals, solve
from .static_net import TrainConfig, init_residual_map, train_residual

SCENARIOS = {
    # name: (initialization, shooting)
    "S1": ("guided", "multiple"),
    "S2": ("guided", "single"),
    "S3": ("linear", "multiple"),
    "S4": ("linear", "single"),
}


@dataclass
class PipelineConfig:
    n_x: int = 2
    n_w: int = 1
    n_z: int = 1
    hidden: tuple = (15,)
    activation: str = "relu"
    search: ResidualSearchConfig = field(default_factory=ResidualSearchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    shooting: ShootingConfig = field(default_factory=ShootingConfig)
    single_shooting: ShootingConfig = field(
        default_factory=lambda: ShootingConfig(d=10**9, max_iterations=3000))
    seed: int = 0
    normalize_data: bool = True
    init: str = "guided"
    linear_coupling_scale: float = 1e-4
    track_stage2_every: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if min(self.n_x, self.n_w, self.n_z) < 1:
            raise ConfigError("n_x, n_w and n_z must be >= 1")
        if self.init not in ("guided", "linear"):
            raise ConfigError("init must be 'guided' or 'linear'")

    def validate(self, dataset):
        """Cross-check dimensions against a dataset before any stage runs."""
        self.search.check_length(dataset.N)
        N_tot = dataset.N - self.search.H - self.search.N0
        if self.shooting.d > N_tot:
            raise ConfigError(f"interval length d = {self.shooting.d} exceeds N_tot = {N_tot}")

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        d = dict(d)
        sub = {"search": ResidualSearchConfig, "train": TrainConfig,
               "shooting": ShootingConfig, "single_shooting": ShootingConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for key, kind in sub.items():
            if key in d:
                try:
                    d[key] = kind(**d[key])
                except TypeError as exc:
                    raise ConfigError(f"{key}: {exc}") from None
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)

    def seeds(self):
        """Independent child seeds for: search, network init, training, spare."""
        ss = np.random.SeedSequence(self.seed).spawn(4)
        return [int(s.generate_state(1)[0]) for s in ss]


@dataclass
class IdentifyResult:
    model: NllfrModel
    linear: object
    search: object | None
    training: object | None
    shooting: object | None
    stage2_model: NllfrModel
    X_init: np.ndarray
    diagnostics: object | None
    timings: dict
    stage2_trace: list = field(default_factory=list)

    @property
    def final_nrmse(self):
        if self.shooting is not None and self.shooting.trace:
            return self.shooting.trace[-1]["nrmse"]
        return float("nan")


def prepare(dataset, config):
    if config.normalize_data:
        data, rec = normalize(dataset)
    else:
        data, rec = dataset, None
    return data, rec


def initial_model(data, config, linear=None):
    """Stage 0: linear model normalized to unit state variance."""
    if linear is None:
        linear = fit_linear_init(data, config.n_x)
    t = normalization_transform(linear, data.u)
    return apply_similarity(linear.linear_part(), t)


def run_stages(data, config, lti0, shooting_config=None):
    """Run stages 1-3 on normalized data starting from a normalized linear model."""
    seeds = config.seeds()
    search_cfg = replace(config.search, rng_seed=seeds[0])
    timings = {}
    stage2_trace = []
    H, N0 = search_cfg.H, search_cfg.N0
    shooting_config = shooting_config or config.shooting
    N_tot = data.N - H - N0
    if shooting_config.d > N_tot:
        shooting_config = replace(shooting_config, d=N_tot)

    t0 = time.perf_counter()
    res0 = init_residual_map(lti0.n_x, lti0.n_u, config.n_z, config.n_w, config.hidden,
                             config.activation, rng=seeds[1])
    search = training = diagnostics = None
    if config.init == "guided":
        search = bilevel_search(lti0, data.u, data.y, search_cfg, n_w=config.n_w)
        search = search.standardized()
        lti1 = lti0.with_coupling(search.B_w, search.D_yw)
        timings["search"] = time.perf_counter() - t0
        ds = search.dataset

        t1 = time.perf_counter()
        s = slice(ds.start, data.N)

        def track(k, res):
            if k % config.track_stage2_every:
                return None
            m = NllfrModel(lti1, res)
            row = {"iteration": k,
                   "nrmse": simulation_nrmse(m, data.u[s], data.y[s], ds.x_star[0])}
            stage2_trace.append(row)
            return row

        callback = track if config.track_stage2_every else None
        train_cfg = replace(config.train, rng_seed=seeds[2])
        training = train_residual(res0, ds, data.u, train_cfg, callback)
        for row in stage2_trace:
            row["loss"] = float(training.loss_trace[row["iteration"]])
        timings["training"] = time.perf_counter() - t1
        model2 = NllfrModel(lti1, training.residual)
        diagnostics = shift_diagnostic(model2, ds, data.u)
        I, _, _ = build_intervals(data.N, H, N0, shooting_config.d)
        X0 = ds.x_star[I - N0]
    else:
        rng = np.random.default_rng(seeds[0])
        c = config.linear_coupling_scale
        lti1 = lti0.with_coupling(rng.uniform(-c, c, (lti0.n_x, config.n_w)),
                                  rng.uniform(-c, c, (lti0.n_y, config.n_w)))
        model2 = NllfrModel(lti1, res0)
        x_lin, _ = simulate_lti(lti0, data.u)
        I, _, _ = build_intervals(data.N, H, N0, shooting_config.d)
        X0 = x_lin[I]
    timings.setdefault("search", 0.0)
    timings.setdefault("training", 0.0)

    t2 = time.perf_counter()
    shot = solve(model2, X0, data.u, data.y, H, N0, shooting_config)
    # with no budget the stage-2 model passes through untouched
    model3 = shot.model if shooting_config.max_iterations > 0 else model2
    timings["shooting"] = time.perf_counter() - t2
    timings["total"] = time.perf_counter() - t0
    return IdentifyResult(model=model3, linear=lti0, search=search, training=training,
                          shooting=shot, stage2_model=model2, X_init=X0,
                          diagnostics=diagnostics, timings=timings, stage2_trace=stage2_trace)


def identify(dataset, config, linear=None, shooting_config=None):
    """Full pipeline on raw data; the returned model carries the normalization records."""
    config.validate(dataset)
    data, rec = prepare(dataset, config)
    lti0 = initial_model(data, config, linear)
    result = run_stages(data, config, lti0, shooting_config)
    result.model = NllfrModel(result.model.lti, result.model.residual, rec)
    result.stage2_model = NllfrModel(result.stage2_model.lti, result.stage2_model.residual, rec)
    return result


def run_scenario(dataset, config, scenario, linear=None):
    """Run one of the S1-S4 scenarios; returns the ``IdentifyResult``."""
    try:
        init, shooting = SCENARIOS[scenario]
    except KeyError:
        raise ConfigError(f"unknown scenario {scenario!r}") from None
    cfg = replace(config, init=init)
    sh = cfg.shooting if shooting == "multiple" else cfg.single_shooting
    data, _ = prepare(dataset, cfg)
    lti0 = initial_model(data, cfg, linear)
    N_tot = data.N - cfg.search.H - cfg.search.N0
    if shooting == "single":
        sh = replace(sh, d=N_tot)
    return run_stages(data, cfg, lti0, sh)


def median_mad(traces, n_points=None):
    """Median and median absolute deviation of NRMSE traces over a common iteration grid.

    Each trace is a list of ``(iteration, nrmse)``; values are carried
    forward between accepted iterations.
    """
    last = max(int(t[-1][0]) for t in traces) if n_points is None else n_points
    grid = np.arange(last + 1)
    rows = []
    for t in traces:
        it = np.array([r[0] for r in t])
        val = np.array([r[1] for r in t])
        idx = np.searchsorted(it, grid, side="right") - 1
        rows.append(val[np.clip(idx, 0, None)])
    M = np.array(rows)
    med = np.median(M, axis=0)
    mad = np.median(np.abs(M - med), axis=0)
    return grid, med, mad


def worker_count(default=1):
    """Parallelism cap from ``NLLFR_THREADS`` (at least 1)."""
    raw = os.environ.get("NLLFR_THREADS")
    if raw is None:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"NLLFR_THREADS must be an integer, got {raw!r}") from None


def _scenario_job(args):
    dataset, config, scenario, linear = args
    result = run_scenario(dataset, config, scenario, linear)
    return {
        "seed": config.seed,
        "scenario": scenario,
        "trace": result.shooting.trace,
        "final_nrmse": result.final_nrmse,
        "initial_nrmse": result.shooting.trace[0]["nrmse"],
        "continuity": result.shooting.continuity,
        "timings": result.timings,
    }


def compare_shooting(dataset, config, n_seeds, scenarios=tuple(SCENARIOS), workers=None):
    """Run every scenario for ``n_seeds`` seeds derived from ``config.seed``.

    The linear initializer is fitted once and shared, so runs differ only
    in initialization, interval length and seed.  Returns per-run records
    ordered by scenario, then seed.
    """
    config.validate(dataset)
    data, _ = prepare(dataset, config)
    linear = fit_linear_init(data, config.n_x)
    children = np.random.SeedSequence(config.seed).generate_state(n_seeds)
    jobs = [(dataset, replace(config, seed=int(s)), sc, linear)
            for sc in scenarios for s in children]
    workers = worker_count() if workers is None else workers
    if workers <= 1:
        return [_scenario_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_scenario_job, jobs))
