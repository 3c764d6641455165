#!/usr/bin/env python3
"""Convert public node-classification datasets to the asgat TSV format.

Supported inputs:

  geom-gcn   new_data/<name>/out1_node_feature_label.txt and
             out1_graph_edges.txt (chameleon, squirrel, cornell, texas,
             wisconsin, film). Optional fixed splits from
             splits/<name>_split_0.6_0.2_<i>.npz (needs numpy).
  linqs      cora.content and cora.cites.

Usage:
  convert_datasets.py geom-gcn <geom-gcn root> <name> <out dir>
  convert_datasets.py linqs <dir with .content/.cites> <name> <out dir>
"""

import argparse
import os
import sys


def write_tsv(path, features, labels, edges):
    classes = sorted(set(labels))
    remap = {c: i for i, c in enumerate(classes)}
    n, m = len(features), len(features[0])
    with open(path, "w", newline="\n") as f:
        f.write(f"{n}\t{m}\t{len(classes)}\n")
        for v in range(n):
            f.write(f"{v}\t{remap[labels[v]]}\t{' '.join(features[v])}\n")
        f.write("EDGES\n")
        for u, v in edges:
            f.write(f"{u}\t{v}\n")


def geom_gcn(root, name, out):
    base = os.path.join(root, "new_data", name)
    feats, labels = {}, {}
    with open(os.path.join(base, "out1_node_feature_label.txt")) as f:
        next(f)
        for line in f:
            node, feat, label = line.rstrip("\n").split("\t")
            node = int(node)
            if name == "film":
                # Sparse list of active feature indices out of 932.
                dense = ["0"] * 932
                for i in feat.split(","):
                    dense[int(i) - 1] = "1"
                feats[node] = dense
            else:
                feats[node] = feat.split(",")
            labels[node] = int(label)
    n = len(feats)
    edges = []
    with open(os.path.join(base, "out1_graph_edges.txt")) as f:
        next(f)
        for line in f:
            u, v = map(int, line.split())
            edges.append((u, v))
    write_tsv(os.path.join(out, f"{name}.tsv"), [feats[i] for i in range(n)], [labels[i] for i in range(n)], edges)

    split_dir = os.path.join(root, "splits")
    found = [i for i in range(10) if os.path.exists(os.path.join(split_dir, f"{name}_split_0.6_0.2_{i}.npz"))]
    if not found:
        return
    import numpy as np

    target = os.path.join(out, f"{name}_splits")
    os.makedirs(target, exist_ok=True)
    for i in found:
        z = np.load(os.path.join(split_dir, f"{name}_split_0.6_0.2_{i}.npz"))
        with open(os.path.join(target, f"{i}.txt"), "w", newline="\n") as f:
            for tag, key in (("TRAIN", "train_mask"), ("VAL", "val_mask"), ("TEST", "test_mask")):
                idx = np.flatnonzero(z[key])
                f.write(f"{tag}\n{' '.join(map(str, idx))}\n")


def linqs(src, name, out):
    ids, feats, labels = {}, [], []
    with open(os.path.join(src, f"{name}.content")) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            ids[parts[0]] = len(feats)
            feats.append(parts[1:-1])
            labels.append(parts[-1])
    edges = []
    skipped = 0
    with open(os.path.join(src, f"{name}.cites")) as f:
        for line in f:
            parts = line.split()
            if len(parts) != 2:
                continue
            a, b = parts
            if a in ids and b in ids:
                edges.append((ids[b], ids[a]))
            else:
                skipped += 1
    if skipped:
        print(f"skipped {skipped} citations to unknown papers", file=sys.stderr)
    write_tsv(os.path.join(out, f"{name}.tsv"), feats, labels, edges)


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("format", choices=["geom-gcn", "linqs"])
    p.add_argument("source")
    p.add_argument("name")
    p.add_argument("out")
    a = p.parse_args()
    os.makedirs(a.out, exist_ok=True)
    if a.format == "geom-gcn":
        geom_gcn(a.source, a.name, a.out)
    else:
        linqs(a.source, a.name, a.out)


if __name__ == "__main__":
    main()
