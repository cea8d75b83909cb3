"""Command-line entry point.

Exit codes: 0 success, 1 bad usage or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import datasets, selftest, theory, training
from .flow import FlowModel
from .ode import SolverConfig, SolverError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SEED_ENV = "CNFTPR_SEED"

log = logging.getLogger("cnftpr")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _floats(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on or off, got {text!r}")
    return text == "on"


# flag -> (TrainConfig field, type, help)
TRAIN_FLAGS = {
    "--dataset": ("dataset", str, "rings, pinwheel or moons"),
    "--tpr": ("tpr", _on_off, "trajectory regularizer on/off"),
    "--alpha": ("alpha", float, "regularizer weight"),
    "--degree": ("degree", int, "polynomial degree"),
    "--num-taus": ("num_taus", int, "sample times per trajectory"),
    "--atol": ("atol", float, "training solver atol"),
    "--rtol": ("rtol", float, "training solver rtol"),
    "--eval-atol": ("eval_atol", float, "evaluation solver atol"),
    "--eval-rtol": ("eval_rtol", float, "evaluation solver rtol"),
    "--batch": ("batch_size", int, "batch size"),
    "--iters": ("iterations", int, "training iterations"),
    "--lr": ("lr", float, "Adam learning rate"),
    "--betas": ("betas", _floats, "Adam betas, e.g. 0.9,0.999"),
    "--hidden": ("hidden", _ints, "hidden widths, e.g. 64,64,64"),
    "--trace": ("trace", str, "exact or hutchinson (training only)"),
    "--seed": ("seed", int, f"random seed (default from ${SEED_ENV}, else 0)"),
    "--eval-every": ("eval_every", int, "evaluate every N iterations (0: final only)"),
    "--test-size": ("test_size", int, "held-out points"),
}


def _add_train_flags(p: argparse.ArgumentParser, skip=()) -> None:
    p.add_argument("--config", type=Path, help="JSON file with any of the flags below (flags win)")
    for flag, (dest, kind, text) in TRAIN_FLAGS.items():
        if flag in skip:
            continue
        extra = {"choices": datasets.NAMES} if flag == "--dataset" else {}
        if flag == "--trace":
            extra = {"choices": ("exact", "hutchinson")}
        p.add_argument(flag, dest=dest, type=kind, default=None, help=text, **extra)
    p.add_argument("--out", type=Path, default=None, help="output directory")


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--atol", type=float, default=1e-5)
    p.add_argument("--rtol", type=float, default=1e-5)


def build_parser() -> Parser:
    parser = Parser(prog="cnftpr", description="Continuous normalizing flows with trajectory regularization.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("train", help="train one model")
    _add_train_flags(p)

    p = sub.add_parser("paired-run", help="train baseline and regularized arms from one seed")
    _add_train_flags(p, skip=("--tpr",))

    p = sub.add_parser("eval", help="test NLL of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", choices=datasets.NAMES, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--test-size", type=int, default=10_000)
    _add_solver_flags(p)

    p = sub.add_parser("export-density", help="log-density on a regular grid, as CSV")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--bounds", type=_floats, default=(-4.0, 4.0), help="lo,hi or x0lo,x0hi,x1lo,x1hi")
    p.add_argument("--resolution", type=int, default=101)
    p.add_argument("--out", type=Path, required=True)
    _add_solver_flags(p)

    p = sub.add_parser("export-traj", help="trajectories from a grid of start points, as JSON")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--grid", type=int, default=10)
    p.add_argument("--bounds", type=_floats, default=(-2.0, 2.0), help="lo,hi or x0lo,x0hi,x1lo,x1hi")
    p.add_argument("--num-points", type=int, default=0, help="extra evenly spaced mesh points")
    p.add_argument("--out", type=Path, required=True)
    _add_solver_flags(p)

    p = sub.add_parser("theory-check", help="run the transport and box-field witnesses")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("selftest", help="fast invariant suite")
    p.add_argument("--mutate", action="append", default=[], choices=selftest.MUTATIONS,
                   help="test hook: break one component and expect its check to fail")
    return parser


def _env_seed() -> int:
    text = os.environ.get(SEED_ENV)
    if text is None:
        return 0
    try:
        return int(text)
    except ValueError:
        raise UsageError(f"${SEED_ENV} must be an integer, got {text!r}") from None


_FLAG_KEYS = {flag[2:]: dest for flag, (dest, _, _) in TRAIN_FLAGS.items()}
_FLAG_KEYS.update({k.replace("-", "_"): v for k, v in _FLAG_KEYS.items()}, out="output_dir")


def _normalize_keys(settings: dict) -> dict:
    """Accept flag spellings ("iters", "num-taus") as well as field names; "on"/"off" for tpr."""
    out = {}
    for key, value in settings.items():
        dest = _FLAG_KEYS.get(key, key)
        if dest == "tpr" and isinstance(value, str):
            try:
                value = _on_off(value)
            except argparse.ArgumentTypeError as exc:
                raise UsageError(f"--config: tpr: {exc}") from None
        out[dest] = value
    return out


def resolve_config(args) -> training.TrainConfig:
    """Defaults < config file < flags; the seed falls back to $CNFTPR_SEED when neither sets it."""
    settings = {}
    if args.config is not None:
        try:
            settings = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"--config: cannot read {args.config}: {exc}") from None
        if not isinstance(settings, dict):
            raise UsageError("--config: expected a JSON object")
        settings = _normalize_keys(settings)
    for dest, _, _ in TRAIN_FLAGS.values():
        value = getattr(args, dest, None)
        if value is not None:
            settings[dest] = value
    settings.setdefault("seed", _env_seed())
    if args.command == "paired-run":
        settings.pop("tpr", None)
    if args.out is not None:
        settings["output_dir"] = str(args.out)
    elif not settings.get("output_dir"):
        arm = "pair" if args.command == "paired-run" else ("tpr" if settings.get("tpr", True) else "baseline")
        settings["output_dir"] = str(Path("runs") / f"{settings.get('dataset', 'rings')}_{arm}_s{settings['seed']}")
    try:
        return training.TrainConfig.from_dict(settings)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _load(path: Path) -> FlowModel:
    try:
        return FlowModel.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"--checkpoint: {exc}") from None


def _solver(args) -> SolverConfig:
    try:
        return SolverConfig(atol=args.atol, rtol=args.rtol)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    config = resolve_config(args)
    record, _ = training.train(config)
    print(json.dumps({
        "output_dir": config.output_dir,
        "mean_nfe": record.mean_nfe(),
        "test_nll": record.final_nll(),
    }))
    return EXIT_OK


def cmd_paired(args) -> int:
    config = resolve_config(args)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    print(json.dumps(training.paired_run(config, out)))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load(args.checkpoint)
    seed = _env_seed() if args.seed is None else args.seed
    config = training.TrainConfig(dataset=args.dataset, seed=seed, test_size=args.test_size)
    nll, nfe = training.evaluate(model, training.test_points(config), _solver(args))
    print(json.dumps({"dataset": args.dataset, "seed": seed, "nll": nll, "nfe": nfe}))
    return EXIT_OK if np.isfinite(nll) else EXIT_RUNTIME


def _check_bounds(bounds):
    try:
        return training._bounds4(bounds)
    except ValueError as exc:
        raise UsageError(f"--bounds: {exc}") from None


def cmd_export_density(args) -> int:
    model = _load(args.checkpoint)
    if args.resolution < 1:
        raise UsageError("--resolution must be >= 1")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    table = training.export_density_grid(model, _check_bounds(args.bounds), args.resolution, _solver(args), args.out)
    bad = int(np.sum(~np.isfinite(table[:, 2])))
    print(json.dumps({"rows": len(table), "failed_rows": bad, "out": str(args.out)}))
    return EXIT_OK if bad == 0 else EXIT_RUNTIME


def cmd_export_traj(args) -> int:
    model = _load(args.checkpoint)
    if args.grid < 1:
        raise UsageError("--grid must be >= 1")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    starts = training.grid_points(_check_bounds(args.bounds), args.grid)
    lines = training.export_trajectories(model, starts, _solver(args), args.out, num_points=args.num_points)
    ratio = float(np.mean([training.straightness(line) for line in lines]))
    truncated = sum(not line["complete"] for line in lines)
    print(json.dumps({"polylines": len(lines), "truncated": truncated, "mean_straightness": ratio}))
    return EXIT_OK if truncated == 0 else EXIT_RUNTIME


def cmd_theory(args) -> int:
    checks = theory.run_checks(seed=args.seed)
    width = max(len(c.name) for c in checks)
    print(f"{'witness':<{width}}  result  value        threshold")
    for c in checks:
        print(f"{c.name:<{width}}  {'PASS' if c.passed else 'FAIL':<6}  {c.value:<11.4g}  {c.threshold:.4g}")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_RUNTIME


def cmd_selftest(args) -> int:
    results = selftest.run(args.mutate)
    print(selftest.format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


COMMANDS = {
    "train": cmd_train,
    "paired-run": cmd_paired,
    "eval": cmd_eval,
    "export-density": cmd_export_density,
    "export-traj": cmd_export_traj,
    "theory-check": cmd_theory,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SolverError as exc:
        print(f"cnftpr: solver failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
