#! /usr/bin/env python3

"""
Summarize the evaluation results of one ablation sweep. Usage:

    ./summarize.py <tag>

... where <tag> is the name of the directory within `results_dir`.
"""

import math
import os.path as osp
import sys

# Make sure we can find the Python package:
diagnostics_dir = osp.dirname(__file__)
app_dir = osp.join(diagnostics_dir, osp.pardir)
sys.path.append(app_dir)

from bcp_lab import ablations, lab_paths

if len(sys.argv) != 2:
    print(f"usage: {sys.argv[0]} <tag>")
    sys.exit(1)

tag = sys.argv[1]

diagnostics_cfg = lab_paths.parse_dumb_paths_file(
    osp.join(diagnostics_dir, "diagnostics.cfg")
)


def fmt(v):
    return "    nan" if math.isnan(v) else f"{v:7.4f}"


summary = ablations.summarize_sweep(f"{diagnostics_cfg['results_dir']}/{tag}")

print(f"{'arm':20} {'runs':>4} {'dice':>7} {'jaccard':>7} {'hd95':>7} {'asd':>7}")
for s in summary.values():
    print(f"{s.arm:20} {s.n_runs:4d} {fmt(s.dice)} {fmt(s.jaccard)} {fmt(s.hd95)} {fmt(s.asd)}")
