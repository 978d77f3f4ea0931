#! /usr/bin/env python3

"""
Compare the per-arm mean Dice of two ablation sweeps. Usage:

    ./cmp-sweeps.py <tagA> <tagB>

... where the <tags> are the names of two directories within $results_dir.
"""

import os.path as osp
import sys

# Make sure we can find the Python package:
diagnostics_dir = osp.dirname(__file__)
app_dir = osp.join(diagnostics_dir, osp.pardir)
sys.path.append(app_dir)

from bcp_lab import ablations, lab_paths

if len(sys.argv) != 3:
    print(f"usage: {sys.argv[0]} <tagA> <tagB>")
    sys.exit(1)

tagA = sys.argv[1]
tagB = sys.argv[2]

diagnostics_cfg = lab_paths.parse_dumb_paths_file(
    osp.join(diagnostics_dir, "diagnostics.cfg")
)

summaryA = ablations.summarize_sweep(f"{diagnostics_cfg['results_dir']}/{tagA}")
summaryB = ablations.summarize_sweep(f"{diagnostics_cfg['results_dir']}/{tagB}")

for line in ablations.compare_sweeps(summaryA, summaryB):
    print(line)
