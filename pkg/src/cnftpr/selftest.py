"""Fast invariant suite behind the ``selftest`` command.

``mutations`` deliberately break one piece of the build so that the matching
check can be seen to fail: ``tableau`` perturbs a 5th-order weight and
``alpha-sign`` assembles the loss with -alpha.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import theory, training
from .flow import FlowModel
from .ode import DOPRI5, CountingDynamics, SolverConfig, attempt_step, integrate
from .tpr import TprConfig, normal_equations_residual, polynomial_basis, sample_times, tpr_residual

MUTATIONS = ("tableau", "alpha-sign")


@dataclass
class Result:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _corrupt(tab):
    b = list(tab.b)
    b[0] += 1e-3
    return dataclasses.replace(tab, b=tuple(b))


def fixed_step_error(steps: int, tableau=DOPRI5) -> float:
    cfg = SolverConfig(initial_step=1.0 / steps, adaptive=False)
    sol = integrate(lambda y, t: y, np.array([[1.0]]), cfg, tableau)
    return abs(float(sol.final[0, 0]) - math.e)


def check_solver_order(tableau=DOPRI5) -> Result:
    ratio = fixed_step_error(16, tableau) / fixed_step_error(32, tableau)
    poly_err = abs(float(attempt_step(lambda y, t: 4.0 * t**3 * np.ones_like(y), np.zeros((1, 1)), 0.0, 1.0,
                                      np.zeros((1, 1)), tableau)[1][0, 0]))
    ok = 0.8 * 32 <= ratio <= 1.2 * 32 and poly_err < 1e-12
    return Result("solver order", ok, f"halving ratio {ratio:.2f}, quartic error estimate {poly_err:.1e}")


def check_nfe_ledger() -> Result:
    dyn = CountingDynamics(lambda y, t: np.cos(3.0 * t) * y)
    sol = integrate(dyn, np.ones((3, 2)), SolverConfig(mandatory_times=(0.3, 0.7)))
    s = sol.stats
    ok = s.nfe == dyn.calls == 1 + 6 * (s.accepted + s.rejected)
    return Result("nfe ledger", ok, f"nfe {s.nfe}, wrapper {dyn.calls}")


def _small_setup(seed: int = 0):
    rng = np.random.default_rng(seed)
    model = FlowModel.init(2, (3,), seed=seed)
    batch = rng.standard_normal((2, 2))
    cfg = training.TrainConfig(dataset="moons", hidden=(3,), tpr=True, alpha=5.0)
    taus = sample_times(rng, TprConfig(), 0.0, 1.0)
    return model, batch, cfg, taus


def check_gradient(seed: int = 0, eps: float = 1e-6) -> Result:
    model, batch, cfg, taus = _small_setup(seed)
    step = training.loss_step(model, batch, cfg, taus)
    grads = ad.backward(step.loss)
    analytic = np.concatenate([grads[step.params[n]].ravel() for n in model.names()])
    theta = model.flat()
    numeric = np.empty_like(theta)
    for i in range(len(theta)):
        up, dn = theta.copy(), theta.copy()
        up[i] += eps
        dn[i] -= eps
        fu = float(training.loss_step(model.with_flat(up), batch, cfg, taus).loss.value)
        fd = float(training.loss_step(model.with_flat(dn), batch, cfg, taus).loss.value)
        numeric[i] = (fu - fd) / (2.0 * eps)
    rel = float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12))
    return Result("full-loss gradient vs finite differences", rel < 1e-3, f"rel err {rel:.1e} over {len(theta)} params")


def check_tpr_oracle(instances: int = 200, seed: int = 0) -> Result:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        d = int(rng.integers(0, 4))
        n = int(rng.integers(d + 2, 9))
        taus = np.sort(rng.uniform(0, 1, n))
        if np.min(np.diff(taus)) < 1e-3:
            continue
        Y = rng.standard_normal((n, int(rng.integers(1, 6))))
        basis = polynomial_basis(taus, d)
        a, b = tpr_residual(Y, basis), normal_equations_residual(Y, basis.T)
        worst = max(worst, abs(a - b) / max(abs(b), 1e-300))
    return Result("tpr projector vs normal equations", worst < 1e-8, f"max rel err {worst:.1e}")


def check_loss_decomposition() -> Result:
    model, batch, cfg, taus = _small_setup(1)
    step = training.loss_step(model, batch, cfg, taus)
    loss, nll, lp = step.logged()
    gap = abs(loss - (nll + cfg.alpha * lp))
    ok = gap <= 1e-10 * max(1.0, abs(loss)) and lp > 0
    return Result("loss = nll + alpha * tpr", ok, f"gap {gap:.1e} (tpr {lp:.3g})")


def check_theory() -> Result:
    checks = theory.run_checks()
    failed = [c.name for c in checks if not c.passed]
    return Result("theory witnesses", not failed, "all pass" if not failed else "failed: " + ", ".join(failed))


def run(mutations=()) -> list:
    unknown = set(mutations) - set(MUTATIONS)
    if unknown:
        raise ValueError(f"unknown mutation(s): {', '.join(sorted(unknown))}")
    tableau = _corrupt(DOPRI5) if "tableau" in mutations else DOPRI5
    saved = training._alpha_sign
    training._alpha_sign = -1.0 if "alpha-sign" in mutations else 1.0
    try:
        jobs = [
            lambda: check_gradient(),
            lambda: check_solver_order(tableau),
            check_nfe_ledger,
            lambda: check_tpr_oracle(),
            check_loss_decomposition,
            check_theory,
        ]
        results = []
        for job in jobs:
            start = time.perf_counter()
            try:
                res = job()
            except Exception as exc:  # any crash is a failed check, not a crashed suite
                res = Result(getattr(job, "__name__", "check"), False, f"{type(exc).__name__}: {exc}")
            res.seconds = time.perf_counter() - start
            results.append(res)
        return results
    finally:
        training._alpha_sign = saved


def format_table(rows: list) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'check':<{width}}  result  detail"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.detail} ({r.seconds:.1f}s)")
    return "\n".join(lines)
