#! /usr/bin/env python3

"""
Summarize a single training run. Usage:

    ./summarize-run.py <run-dir>

... where <run-dir> holds the run's `metrics.csv` and checkpoints.
"""

import os.path as osp
import sys

# Make sure we can find the Python package:
diagnostics_dir = osp.dirname(__file__)
app_dir = osp.join(diagnostics_dir, osp.pardir)
sys.path.append(app_dir)

from bcp_lab import ablations

if len(sys.argv) != 2:
    print(f"usage: {sys.argv[0]} <run-dir>")
    sys.exit(1)

for line in ablations.summarize_run(sys.argv[1]).lines():
    print(line)
