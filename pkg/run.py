#! /usr/bin/env python3

"""
The main entrypoint for the `bcp-lab` segmentation experiment harness.
"""

from bcp_lab.cli import entrypoint

entrypoint()
