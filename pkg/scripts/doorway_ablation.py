"""Run the four doorway ablation modes over several seeds and print a per-seed table."""
import argparse

import numpy as np

from anisoplan import pipeline

MODES = ("NO-T", "NOY-T", "KD-T", "KDY-T")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", default="doorway", help="bundled scenario name or TOML path")
    ap.add_argument("--seeds", type=int, default=10, help="run seeds 0..N-1")
    args = ap.parse_args()

    base = pipeline.load_scenario(args.scenario)
    print(f"{'seed':>4} {'mode':>6} {'status':>9} {'planned':>8} {'flown':>7} {'max h_s':>8} {'rms err':>8}")
    durations = {m: [] for m in MODES}
    unsafe = {m: 0 for m in MODES}
    for seed in range(args.seeds):
        for mode in MODES:
            rec = pipeline.run(base.with_overrides(mode=mode, seed=seed)).record()
            if "planned_duration" not in rec:
                print(f"{seed:>4} {mode:>6} {rec['status']:>9}")
                continue
            durations[mode].append(rec["planned_duration"])
            unsafe[mode] += bool(rec.get("unsafe"))
            print(f"{seed:>4} {mode:>6} {rec['status']:>9} {rec['planned_duration']:8.2f} "
                  f"{rec.get('duration', float('nan')):7.2f} {rec.get('max_h_s', float('nan')):8.3f} "
                  f"{rec.get('rms_error', float('nan')):8.3f}")
    print()
    for mode in MODES:
        d = durations[mode]
        mean = np.mean(d) if d else float("nan")
        print(f"{mode:>6}: mean planned duration {mean:6.2f} s, unsafe {unsafe[mode]}/{len(d)}")


if __name__ == "__main__":
    main()
