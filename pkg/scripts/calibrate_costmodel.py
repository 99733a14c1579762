"""Re-run the cost-model calibration search and rewrite the frozen config."""
import argparse
import json
from pathlib import Path

from sparsevox.costmodel import search_calibration

HEADER = ("# frozen calibration for the dense/sparse cost comparison\n"
          "# regenerate: python scripts/calibrate_costmodel.py\n")


def main():
    ap = argparse.ArgumentParser()
    root = Path(__file__).resolve().parents[1]
    ap.add_argument("--out", nargs="*", default=[root / "configs/reference.cfg",
                                                 root / "src/sparsevox/configs/reference.cfg"])
    args = ap.parse_args()
    cfg, metrics = search_calibration()
    for p in args.out:
        Path(p).write_text(HEADER + cfg.to_text())
    print(json.dumps(metrics, indent=2))


if __name__ == "__main__":
    main()
