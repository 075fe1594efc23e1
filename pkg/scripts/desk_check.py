"""CPU desk check: synthetic-3class + small_cnn, clean / ULEO / ULEO-GrayAug vs standard and gray exploiters.

    python3 scripts/desk_check.py [--output-dir runs/desk] [--seed 0] [--epochs 30]

Exits 1 when any desk threshold is missed.
"""

import argparse
import sys
import time

from ulegray import cli

THRESHOLDS = {"uleo_gap": 0.30, "gray_recovery": 0.5, "grayaug_gray_gap": 0.20}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--output-dir", default="runs/desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=cli.DESK_SYNTHETIC_EPOCHS)
    p.add_argument("--data-root", help="dataset cache directory (default $ULEGRAY_DATA or ./data)")
    args = p.parse_args(argv)

    cfg = cli.desk_config(args.output_dir, args.seed, args.epochs)
    if args.data_root:
        cfg.dataset.root = args.data_root
    t0 = time.time()
    res = cli.run_desk_suite(cfg)
    minutes = (time.time() - t0) / 60
    checks = res["checks"]
    ok = bool(checks["uleo_converged"])
    print(f"\nULEO converged: {checks['uleo_converged']}")
    for key, floor in THRESHOLDS.items():
        passed = checks[key] >= floor
        ok &= passed
        print(f"{key:<18s} {checks[key]:.3f}  (>= {floor})  {'ok' if passed else 'MISSED'}")
    print(f"wall time {minutes:.1f} min")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
