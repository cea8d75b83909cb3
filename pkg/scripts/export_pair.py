"""Density grid and trajectory exports for both arms of a finished pair.

    python scripts/export_pair.py artifacts/pairs/moons_s0 --resolution 201

Writes density.csv (x0,x1,logq) and trajectories.json into each arm's directory.
"""

import argparse
import json
from pathlib import Path

from cnftpr.flow import FlowModel
from cnftpr.training import (
    STRAIGHTNESS_BOUNDS,
    STRAIGHTNESS_GRID,
    STRAIGHTNESS_POINTS,
    TrainConfig,
    export_density_grid,
    export_trajectories,
    grid_points,
    straightness,
    trapezoid_mass,
)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("pair", type=Path, help="directory holding baseline/ and tpr/")
    p.add_argument("--resolution", type=int, default=201)
    p.add_argument("--bounds", type=float, nargs=2, default=(-4.0, 4.0))
    args = p.parse_args(argv)
    solver = TrainConfig().solver_eval()
    for arm in ("baseline", "tpr"):
        directory = args.pair / arm
        model = FlowModel.load(directory / "checkpoint.json")
        table = export_density_grid(model, args.bounds, args.resolution, solver, directory / "density.csv")
        starts = grid_points(STRAIGHTNESS_BOUNDS, STRAIGHTNESS_GRID)
        lines = export_trajectories(model, starts, solver, directory / "trajectories.json",
                                    num_points=STRAIGHTNESS_POINTS)
        mean = sum(straightness(line) for line in lines) / len(lines)
        print(json.dumps({"arm": arm, "grid_mass": trapezoid_mass(table, args.resolution),
                          "mean_straightness": mean}))


if __name__ == "__main__":
    main()
