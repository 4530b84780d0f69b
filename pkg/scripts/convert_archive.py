"""Convert public traffic-matrix archives into the trace CSV read by ``tm-diffuse ingest``.

Abilene (Zhang et al. release): files ``X01`` .. ``X24``, one 5-minute slot per
row, 720 whitespace-separated columns holding five estimates per OD pair. The
measured ("realOD") value is the first of each group of five.

    python scripts/convert_archive.py abilene X01 X02 ... --out abilene.csv

GEANT (TOTEM release): one XML file per 15-minute slot with
``<src id=..><dst id=..>value</dst></src>`` entries under ``IntraTM``. Files are
read in name order; node ids are 1-based.

    python scripts/convert_archive.py geant traffic-matrices/*.xml --nodes 23 --out geant.csv

Both outputs have rows = time slots and columns = OD flows in source-major order.
"""

import argparse
import csv
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np


def read_abilene(paths, nodes=12):
    rows = []
    for p in paths:
        block = np.loadtxt(p, ndmin=2)
        if block.shape[1] != 5 * nodes * nodes:
            sys.exit(f"{p}: expected {5 * nodes * nodes} columns, found {block.shape[1]}")
        rows.append(block[:, ::5])
    return np.concatenate(rows)


def read_geant(paths, nodes):
    out = np.full((len(paths), nodes * nodes), np.nan)
    for k, p in enumerate(sorted(paths)):
        root = ET.parse(p).getroot()
        for src in root.iter("src"):
            i = int(src.get("id")) - 1
            for dst in src.iter("dst"):
                j = int(dst.get("id")) - 1
                out[k, i * nodes + j] = float(dst.text)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("format", choices=["abilene", "geant"])
    ap.add_argument("files", nargs="+", type=Path)
    ap.add_argument("--nodes", type=int, default=None)
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args()
    if args.format == "abilene":
        X = read_abilene(args.files, args.nodes or 12)
    else:
        X = read_geant(args.files, args.nodes or 23)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in X:
            # missing pairs stay empty so ingest masks them
            w.writerow("" if np.isnan(v) else repr(float(v)) for v in row)
    print(f"wrote {X.shape[0]} slots x {X.shape[1]} flows to {args.out}")


if __name__ == "__main__":
    main()
