#!/usr/bin/env python3
"""Convert Planetoid `ind.<name>.*` files into edges.txt / features.txt / labels.txt.

Usage: convert_planetoid.py RAW_DIR NAME OUT_DIR

Needs numpy and scipy, because the raw files are pickled scipy matrices.
Node ids are those of the raw graph: allx rows first, then test rows placed
at their test index. Citeseer has test indices with no features; they become
zero rows with label -1.
"""

import os
import pickle
import sys

import numpy as np
import scipy.sparse as sp


def load(raw, name, part):
    with open(os.path.join(raw, f"ind.{name}.{part}"), "rb") as f:
        return pickle.load(f, encoding="latin1")


def main():
    if len(sys.argv) != 4:
        sys.exit(__doc__)
    raw, name, out = sys.argv[1:]
    allx, ally, tx, ty = (load(raw, name, p) for p in ("allx", "ally", "tx", "ty"))
    graph = load(raw, name, "graph")
    with open(os.path.join(raw, f"ind.{name}.test.index")) as f:
        test_idx = [int(line) for line in f if line.strip()]

    lo, hi = min(test_idx), max(test_idx)
    full = hi - lo + 1
    tx_ext = sp.lil_matrix((full, tx.shape[1]))
    ty_ext = np.zeros((full, ty.shape[1]))
    has_label = np.zeros(full, dtype=bool)
    for row, idx in enumerate(test_idx):
        tx_ext[idx - lo] = tx[row]
        ty_ext[idx - lo] = ty[row]
        has_label[idx - lo] = True

    x = sp.vstack([allx, tx_ext]).toarray()
    y = np.vstack([ally, ty_ext])
    labeled = np.concatenate([ally.sum(axis=1) > 0, has_label])
    n = x.shape[0]

    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "features.txt"), "w") as f:
        f.write(f"{n} {x.shape[1]}\n")
        for row in x:
            f.write(" ".join(f"{v:g}" for v in row) + "\n")
    with open(os.path.join(out, "labels.txt"), "w") as f:
        for i in range(n):
            c = int(np.argmax(y[i])) if labeled[i] else -1
            f.write(f"{i} {c}\n")
    edges = set()
    for u, nbrs in graph.items():
        for v in nbrs:
            if u != v and u < n and v < n:
                edges.add((min(u, v), max(u, v)))
    with open(os.path.join(out, "edges.txt"), "w") as f:
        for u, v in sorted(edges):
            f.write(f"{u} {v} 1\n")
    print(f"{name}: {n} nodes, {x.shape[1]} features, {len(edges)} edges, {y.shape[1]} classes")


if __name__ == "__main__":
    main()
