"""Time the trajectory optimizer on a 10-segment doorway search result."""
import argparse
import time

import numpy as np

from anisoplan import pipeline
from anisoplan.kinosearch import SearchConfig, plan
from anisoplan.obvp import State
from anisoplan.trajopt import optimize
from anisoplan.worldmodel import compute_edf


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--segments", type=int, default=10)
    args = ap.parse_args()

    scenario = pipeline.load_scenario("doorway")
    grid = scenario.load_grid()
    field = compute_edf(grid)
    goal = np.array([3.5, 9.0, 0.0])
    for seed in range(50):
        coarse = plan(grid, field, State(scenario.start), goal, SearchConfig(seed=seed))
        if len(coarse.segments) == args.segments:
            break
    else:
        raise SystemExit(f"no seed below 50 gives {args.segments} segments")

    optimize(coarse, field, scenario.opt)  # warm-up
    times, res = [], None
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        res = optimize(coarse, field, scenario.opt)
        times.append(time.perf_counter() - t0)
    ms = 1e3 * np.array(times)
    print(f"search seed {seed}, {len(coarse.segments)} segments, coarse duration {coarse.duration:.2f} s")
    print(f"optimized duration {res.trajectory.duration:.2f} s, {res.iterations} iterations, "
          f"{res.rounds} penalty rounds, degraded={res.degraded}")
    print(f"solve time: median {np.median(ms):.1f} ms, min {ms.min():.1f} ms, max {ms.max():.1f} ms")


if __name__ == "__main__":
    main()
