#!/usr/bin/env python3
"""Convert the raw UCI-HAR archive into the pgru sequence CSV layout.

Usage: uci_har_to_csv.py "UCI HAR Dataset" OUT_DIR

Reads the nine inertial signal files of each split (128 samples per window)
and the activity labels, and writes OUT_DIR/uci_har_train.csv and
OUT_DIR/uci_har_test.csv with rows `seq_id,t,f1..f9,label`. Labels are
shifted from 1..6 to 0..5.
"""

import csv
import sys
from pathlib import Path

SIGNALS = [
    "body_acc_x", "body_acc_y", "body_acc_z",
    "body_gyro_x", "body_gyro_y", "body_gyro_z",
    "total_acc_x", "total_acc_y", "total_acc_z",
]


def read_rows(path):
    with open(path) as f:
        return [line.split() for line in f if line.strip()]


def convert(root, split, out):
    base = root / split
    channels = [read_rows(base / "Inertial Signals" / f"{s}_{split}.txt") for s in SIGNALS]
    labels = [int(r[0]) - 1 for r in read_rows(base / f"y_{split}.txt")]
    n = len(labels)
    if any(len(c) != n for c in channels):
        sys.exit(f"{split}: signal files and labels disagree on the window count")
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seq_id", "t"] + [f"f{i + 1}" for i in range(len(SIGNALS))] + ["label"])
        for seq in range(n):
            steps = len(channels[0][seq])
            for t in range(steps):
                w.writerow([seq, t] + [c[seq][t] for c in channels] + [labels[seq]])
    print(f"{out}: {n} sequences")


def main():
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    root, out_dir = Path(sys.argv[1]), Path(sys.argv[2])
    out_dir.mkdir(parents=True, exist_ok=True)
    for split in ("train", "test"):
        convert(root, split, out_dir / f"uci_har_{split}.csv")


if __name__ == "__main__":
    main()
