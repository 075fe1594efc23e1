"""CIFAR-10 grid (GPU): crafts the four banks, trains every exploiter arm and prints the result tables.

    python3 scripts/cifar_tables.py [--config configs/suite_cifar10.yaml] [--set key=value ...]

Banks and runs already under the output directory are reused.
"""

import argparse
import sys
from pathlib import Path

from ulegray import cli

ROOT = Path(__file__).resolve().parents[1]


def table(title, header, rows):
    print(f"\n{title}")
    print("  ".join(f"{h:>14s}" for h in header))
    for row in rows:
        print("  ".join(f"{c:>14s}" for c in row))


def pct(v):
    return "-" if v is None else f"{100 * v:.2f}"


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "suite_cifar10.yaml"))
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    args = p.parse_args(argv)

    cfg = cli.load_config(args.config, cli.parse_set(args.set))
    res = cli.cifar_suite(cfg)
    acc, rob = res["accuracy"], res["robust"]

    table("ULE variants vs standard / grayscale exploiters (clean test accuracy %)",
          ["bank", "standard", "grayscale"],
          [[v, pct(acc.get(f"{v}/std")), pct(acc.get(f"{v}/gray"))]
           for v in ("clean", "uleo", "uleo_gray", "uleo_aug", "uleo_grayaug")])
    table("Mitigations on the ULEO bank (%)", ["mitigation", "accuracy"],
          [[m, pct(acc.get(f"uleo/{m}"))] for m in ("std", "mixup", "bdr2", "bdr3", "bdr4", "bdr5", "bdr6", "bdr7",
                                                     "at", "gray")])
    table("Adversarial training (%)", ["train set", "clean", "fgsm", "pgd20"],
          [[k, pct(acc.get(f"{k}/at")), pct(rob.get(f"{k}/at", {}).get("fgsm")),
            pct(rob.get(f"{k}/at", {}).get("pgd20"))] for k in ("clean", "uleo")])
    table("MLP transfer (%)", ["bank", "resnet18", "mlp"],
          [["clean", pct(acc.get("clean/std")), pct(acc.get("clean/mlp"))],
           ["uleo (cnn)", pct(acc.get("uleo/std")), pct(acc.get("uleo/mlp"))],
           ["uleo (mlp)", pct(acc.get("uleo_mlp/std")), pct(acc.get("uleo_mlp/mlp"))]])
    table("Mixed data, accuracy delta vs adding clean data (points)",
          ["exploiter", "ori", "add", "clean", "uleo", "uleo_grayaug"],
          [["gray" if r["gray"] else "std", f"{r['ori']:.2f}", "-" if r["add"] is None else f"{r['add']:.2f}",
            pct(r["clean"]), pct(r.get("uleo")), pct(r.get("uleo_grayaug"))] for r in res["mix"]])
    table("Perturbation profiles", ["bank", "dispersion", "spatial", "linf*255"],
          [[k, f"{v['channel_dispersion']:.5f}", f"{v['spatial_energy']:.5f}", f"{255 * v['linf']:.2f}"]
           for k, v in res["profile"].items()])
    return 0


if __name__ == "__main__":
    sys.exit(main())
