#! /usr/bin/env python3

"""
Compare two evaluations of the same split. Usage:

    ./cmp-evals.py <eval-a.csv> <eval-b.csv>

... where both files were written by `run.py eval --out`.
"""

import os.path as osp
import sys

# Make sure we can find the Python package:
diagnostics_dir = osp.dirname(__file__)
app_dir = osp.join(diagnostics_dir, osp.pardir)
sys.path.append(app_dir)

from bcp_lab import ablations, evalkit

if len(sys.argv) != 3:
    print(f"usage: {sys.argv[0]} <eval-a.csv> <eval-b.csv>")
    sys.exit(1)

a = evalkit.read_eval_csv(sys.argv[1])
b = evalkit.read_eval_csv(sys.argv[2])

for line in ablations.compare_evals(a, b):
    print(line)
