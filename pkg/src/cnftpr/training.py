"""Training loop, evaluation, exports and paired baseline/TPR runs."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import datasets
from .flow import EXACT, FlowModel, TraceMode, log_likelihood, push_forward, rademacher
from .ode import SolverConfig, SolverError, SolverStats
from .tpr import TprConfig, polynomial_basis, sample_times, tpr_residual, trajectory_rows

log = logging.getLogger(__name__)

RUN_HEADER = ("iter", "loss", "nll", "tpr", "nfe", "accepted", "rejected", "wall_ms")
EVAL_HEADER = ("iter", "test_nll", "eval_nfe")
MAX_CONSECUTIVE_FAILURES = 3
NFE_WINDOW = 200

# independent random streams per run, so toggling the regularizer leaves data and init untouched
STREAM_INIT, STREAM_DATA, STREAM_TEST, STREAM_TAUS, STREAM_NOISE = range(5)

# test hook: -1 assembles L = L0 - alpha * Lp while still logging +alpha
_alpha_sign = 1.0


class RunAborted(SolverError):
    pass


@dataclass
class TrainConfig:
    dataset: str = "rings"
    batch_size: int = 256
    iterations: int = 2000
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    tpr: bool = True
    alpha: float = 5.0
    degree: int = 1
    num_taus: int = 4
    atol: float = 1e-4
    rtol: float = 1e-4
    eval_atol: float = 1e-5
    eval_rtol: float = 1e-5
    t0: float = 0.0
    t1: float = 1.0
    max_steps: int = 10_000
    hidden: tuple = (64, 64, 64)
    trace: str = "exact"
    seed: int = 0
    eval_every: int = 0
    test_size: int = 10_000
    output_dir: Optional[str] = None

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.dataset not in datasets.NAMES:
            raise ValueError(f"unknown dataset {self.dataset!r}; choose from {', '.join(datasets.NAMES)}")
        if self.iterations <= 0 or self.batch_size <= 0 or self.test_size <= 0:
            raise ValueError("iterations, batch_size and test_size must be positive")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must be two numbers in [0, 1)")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")
        TraceMode(self.trace)
        if self.tpr:
            self.tpr_config  # validates n, d
        self.solver_train()
        self.solver_eval()

    @property
    def tpr_config(self) -> Optional[TprConfig]:
        if not self.tpr:
            return None
        return TprConfig(n=self.num_taus, degree=self.degree, alpha=self.alpha)

    def solver_train(self, mandatory_times=()) -> SolverConfig:
        return SolverConfig(atol=self.atol, rtol=self.rtol, t0=self.t0, t1=self.t1,
                            mandatory_times=tuple(mandatory_times), max_steps=self.max_steps)

    def solver_eval(self) -> SolverConfig:
        return SolverConfig(atol=self.eval_atol, rtol=self.eval_rtol, t0=self.t0, t1=self.t1,
                            max_steps=self.max_steps)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"], d["hidden"] = list(self.betas), list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


def rng_for(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


def test_points(config: TrainConfig) -> np.ndarray:
    return datasets.sample(config.dataset, config.test_size, rng_for(config.seed, STREAM_TEST))


# ---------------------------------------------------------------------------
# one iteration


@dataclass
class StepResult:
    loss: ad.Var
    nll: ad.Var
    tpr: Optional[ad.Var]
    stats: SolverStats
    params: dict
    solution: object

    def logged(self) -> tuple:
        lp = 0.0 if self.tpr is None else float(self.tpr.value)
        return float(self.loss.value), float(self.nll.value), lp


def loss_step(
    model: FlowModel,
    batch: np.ndarray,
    config: TrainConfig,
    taus: Optional[np.ndarray] = None,
    eps: Optional[np.ndarray] = None,
) -> StepResult:
    """L = L0 + alpha * Lp from a single solve whose mesh includes every tau."""
    tape = ad.Tape()
    params = model.bind(tape)
    regularized = config.tpr and taus is not None
    solver = config.solver_train(taus if regularized else ())
    logq, solution = log_likelihood(model, batch, solver, TraceMode(config.trace), tape=tape, params=params, eps=eps)
    nll = ad.neg(ad.mean(logq))
    if not regularized:
        return StepResult(nll, nll, None, solution.stats, params, solution)
    basis = polynomial_basis(taus, config.degree, config.t0, config.t1)
    lp = tpr_residual(trajectory_rows(solution, taus, model.dim), basis)
    loss = ad.lincomb([1.0, _alpha_sign * config.alpha], [nll, lp])
    return StepResult(loss, nll, lp, solution.stats, params, solution)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
                betas=(0.9, 0.999), eps: float = 1e-8) -> bool:
    """In-place bias-corrected Adam step. Returns False (and skips) on non-finite gradients."""
    for name, g in grads.items():
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}, param has {np.shape(params[name])}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        log.warning("non-finite gradient at Adam step %d; update skipped", state.step + 1)
        return False
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g, dtype=float)
            state.v[name] = np.zeros_like(g, dtype=float)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        params[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


# ---------------------------------------------------------------------------
# run bookkeeping


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)  # (iter, loss, nll, tpr, nfe, accepted, rejected, wall_ms)
    eval_rows: list = field(default_factory=list)  # (iter, test_nll, eval_nfe)

    def nfe(self) -> np.ndarray:
        return np.array([r[4] for r in self.rows], dtype=float)

    def mean_nfe(self, window: int = NFE_WINDOW) -> float:
        ok = [r[4] for r in self.rows[-window:] if r[4] > 0]
        return float(np.mean(ok)) if ok else math.nan

    def final_nll(self) -> float:
        return float(self.eval_rows[-1][1]) if self.eval_rows else math.nan

    def run_csv(self) -> str:
        lines = [",".join(RUN_HEADER)]
        for r in self.rows:
            lines.append(",".join([_fmt(v) for v in r[:7]] + [f"{r[7]:.3f}"]))
        return "\n".join(lines) + "\n"

    def eval_csv(self) -> str:
        lines = [",".join(EVAL_HEADER)] + [",".join(_fmt(v) for v in r) for r in self.eval_rows]
        return "\n".join(lines) + "\n"

    def save(self, directory) -> None:
        directory = Path(directory)
        (directory / "run.csv").write_text(self.run_csv())
        (directory / "eval.csv").write_text(self.eval_csv())

    @classmethod
    def load(cls, directory) -> "RunRecord":
        directory = Path(directory)
        rec = cls()
        with open(directory / "run.csv") as fh:
            for row in csv.DictReader(fh):
                rec.rows.append((int(row["iter"]), float(row["loss"]), float(row["nll"]), float(row["tpr"]),
                                 int(row["nfe"]), int(row["accepted"]), int(row["rejected"]), float(row["wall_ms"])))
        eval_path = directory / "eval.csv"
        if eval_path.exists():
            with open(eval_path) as fh:
                for row in csv.DictReader(fh):
                    rec.eval_rows.append((int(row["iter"]), float(row["test_nll"]), int(row["eval_nfe"])))
        return rec


def strip_wall_ms(csv_text: str) -> str:
    return "\n".join(line.rsplit(",", 1)[0] for line in csv_text.splitlines())


# ---------------------------------------------------------------------------
# train / evaluate


def evaluate(model: FlowModel, points: np.ndarray, solver: SolverConfig, trace_mode: TraceMode = EXACT,
             chunk: Optional[int] = None) -> tuple:
    """(mean NLL in nats per point, NFE of the solve). NaN NLL if the solver fails."""
    if trace_mode.kind != "exact":
        raise ValueError("evaluation uses the exact trace")
    points = np.asarray(points, dtype=float)
    chunk = chunk or len(points)
    total, nfe = 0.0, 0
    for start in range(0, len(points), chunk):
        part = points[start:start + chunk]
        try:
            logq, sol = log_likelihood(model, part, solver, EXACT)
        except SolverError as exc:
            log.warning("evaluation solve failed: %s", exc)
            return math.nan, 0
        total += float(np.sum(logq))
        nfe = max(nfe, sol.stats.nfe)
    return -total / len(points), nfe


def train(config: TrainConfig, model: Optional[FlowModel] = None) -> tuple:
    """Run the configured number of iterations. Returns (RunRecord, trained model).

    With ``output_dir`` set, writes config.resolved.json, run.csv, eval.csv and
    checkpoint.json there.
    """
    out = Path(config.output_dir) if config.output_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")

    if model is None:
        model = FlowModel.init(2, config.hidden, seed=int(rng_for(config.seed, STREAM_INIT).integers(2**63)))
    else:
        model = model.copy()
    batches = datasets.stream(config.dataset, config.batch_size, rng_for(config.seed, STREAM_DATA))
    tau_rng = rng_for(config.seed, STREAM_TAUS)
    noise_rng = rng_for(config.seed, STREAM_NOISE)
    test = test_points(config)
    tpr_cfg = config.tpr_config
    hutchinson = config.trace == "hutchinson"

    record = RunRecord()
    adam = AdamState()
    failures = 0
    for it in range(1, config.iterations + 1):
        batch = next(batches)
        taus = sample_times(tau_rng, tpr_cfg, config.t0, config.t1) if tpr_cfg else None
        eps = rademacher(noise_rng, batch.shape) if hutchinson else None
        start = time.perf_counter()
        try:
            step = loss_step(model, batch, config, taus, eps)
        except SolverError as exc:
            failures += 1
            log.warning("iteration %d: solver failure (%d in a row): %s", it, failures, exc)
            record.rows.append((it, math.nan, math.nan, math.nan, 0, 0, 0, 1e3 * (time.perf_counter() - start)))
            if failures >= MAX_CONSECUTIVE_FAILURES:
                if out is not None:
                    record.save(out)
                raise RunAborted(f"{failures} consecutive solver failures, last at iteration {it}") from exc
            continue
        failures = 0
        grads = ad.backward(step.loss)
        adam_update(model.params, {n: grads[v] for n, v in step.params.items()}, adam,
                    config.lr, config.betas, config.adam_eps)
        wall = 1e3 * (time.perf_counter() - start)
        loss, nll, lp = step.logged()
        s = step.stats
        record.rows.append((it, loss, nll, lp, s.nfe, s.accepted, s.rejected, wall))
        if (config.eval_every and it % config.eval_every == 0) or it == config.iterations:
            test_nll, eval_nfe = evaluate(model, test, config.solver_eval())
            record.eval_rows.append((it, test_nll, eval_nfe))
            log.info("iter %d: test nll %.4f (eval nfe %d)", it, test_nll, eval_nfe)
        if it % 100 == 0:
            log.info("iter %d: loss %.4f nll %.4f tpr %.4g nfe %d", it, loss, nll, lp, s.nfe)

    if out is not None:
        record.save(out)
        model.save(out / "checkpoint.json")
    return record, model


# ---------------------------------------------------------------------------
# exports


def _bounds4(bounds) -> tuple:
    b = tuple(float(x) for x in bounds)
    if len(b) == 2:
        b = b + b
    if len(b) != 4 or not (b[0] <= b[1] and b[2] <= b[3]):
        raise ValueError("bounds must be (lo, hi) or (x0_lo, x0_hi, x1_lo, x1_hi)")
    return b


def grid_points(bounds, resolution: int) -> np.ndarray:
    """resolution x resolution points, x0 varying slowest; resolution 1 gives the center."""
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    lo0, hi0, lo1, hi1 = _bounds4(bounds)
    if resolution == 1:
        return np.array([[(lo0 + hi0) / 2.0, (lo1 + hi1) / 2.0]])
    a, b = np.meshgrid(np.linspace(lo0, hi0, resolution), np.linspace(lo1, hi1, resolution), indexing="ij")
    return np.stack([a.ravel(), b.ravel()], axis=1)


def export_density_grid(model: FlowModel, bounds, resolution: int, solver: SolverConfig,
                        path=None, chunk: int = 4096) -> np.ndarray:
    """Rows (x0, x1, logq) over a regular grid; chunks whose solve fails are NaN."""
    pts = grid_points(bounds, resolution)
    logq = np.full(len(pts), math.nan)
    for start in range(0, len(pts), chunk):
        part = pts[start:start + chunk]
        try:
            lq, _ = log_likelihood(model, part, solver, EXACT)
            logq[start:start + chunk] = lq[:, 0]
        except SolverError as exc:
            log.warning("density grid rows %d..%d failed: %s", start, start + len(part) - 1, exc)
    table = np.column_stack([pts, logq])
    if path is not None:
        np.savetxt(path, table, delimiter=",", header="x0,x1,logq", comments="", fmt="%.17g")
    return table


def trapezoid_mass(table: np.ndarray, resolution: int) -> float:
    """Integral of exp(logq) over a grid from :func:`export_density_grid`."""
    x0 = table[:, 0].reshape(resolution, resolution)[:, 0]
    x1 = table[:, 1].reshape(resolution, resolution)[0, :]
    dens = np.exp(table[:, 2].reshape(resolution, resolution))
    return float(np.trapezoid(np.trapezoid(dens, x1, axis=1), x0))


def export_trajectories(model: FlowModel, starts: np.ndarray, solver: SolverConfig, path=None,
                        num_points: int = 0) -> list:
    """One polyline per start: the accepted-step mesh of its own solve.

    ``num_points`` > 0 adds that many evenly spaced mandatory times, so the mesh
    is at least that dense.
    """
    if num_points:
        solver = solver.replace(mandatory_times=tuple(np.linspace(solver.t0, solver.t1, num_points)))
    lines = []
    for x in np.asarray(starts, dtype=float):
        try:
            sol, complete = push_forward(model, x[None, :], solver), True
        except SolverError as exc:
            log.warning("trajectory from %s truncated: %s", x.tolist(), exc)
            sol, complete = exc.partial, False
        lines.append({
            "start": x.tolist(),
            "t": [float(t) for t in sol.times],
            "y": [np.asarray(s)[0].tolist() for s in sol.states],
            "complete": complete,
        })
    if path is not None:
        Path(path).write_text(json.dumps(lines))
    return lines


def straightness(polyline) -> float:
    """Chord length over path length; 1 for a straight or stationary path."""
    y = np.asarray(polyline["y"] if isinstance(polyline, dict) else polyline, dtype=float)
    path = float(np.sum(np.linalg.norm(np.diff(y, axis=0), axis=1)))
    if path == 0.0:
        return 1.0
    return float(np.linalg.norm(y[-1] - y[0])) / path


STRAIGHTNESS_BOUNDS = (-2.0, 2.0)
STRAIGHTNESS_GRID = 10
STRAIGHTNESS_POINTS = 65


def mean_straightness(model: FlowModel, solver: SolverConfig, bounds=STRAIGHTNESS_BOUNDS,
                      grid: int = STRAIGHTNESS_GRID, num_points: int = STRAIGHTNESS_POINTS) -> float:
    lines = export_trajectories(model, grid_points(bounds, grid), solver, num_points=num_points)
    return float(np.mean([straightness(line) for line in lines]))


# ---------------------------------------------------------------------------
# paired runs


def paired_run(config: TrainConfig, out_dir, window: int = NFE_WINDOW) -> dict:
    """Baseline and regularized arms from the same seed; writes comparison.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arms = {}
    for arm, on in (("baseline", False), ("tpr", True)):
        cfg = config.replace(tpr=on, output_dir=str(out / arm))
        log.info("paired run %s/%d: %s arm", config.dataset, config.seed, arm)
        arms[arm] = train(cfg)
    summary = summarize_pair(config, arms["baseline"], arms["tpr"], window)
    (out / "comparison.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def summarize_pair(config: TrainConfig, baseline: tuple, regularized: tuple, window: int = NFE_WINDOW) -> dict:
    (rec_b, model_b), (rec_t, model_t) = baseline, regularized
    nfe_b, nfe_t = rec_b.mean_nfe(window), rec_t.mean_nfe(window)
    solver = config.solver_eval()
    return {
        "dataset": config.dataset,
        "seed": config.seed,
        "nfe_baseline": nfe_b,
        "nfe_tpr": nfe_t,
        "nfe_reduction_pct": 100.0 * (nfe_b - nfe_t) / nfe_b,
        "nll_baseline": rec_b.final_nll(),
        "nll_tpr": rec_t.final_nll(),
        "straightness_baseline": mean_straightness(model_b, solver),
        "straightness_tpr": mean_straightness(model_t, solver),
        "iterations": config.iterations,
        "nfe_window": window,
    }
