"""
A simple configuration abstraction for where lab data and run outputs live, so
that the CLI and the scripts in `../diagnostics` agree on paths.
"""

import os
from pathlib import Path
from typing import Optional

__all__ = ["LabPaths", "parse_dumb_paths_file"]


def _maybe_envpath(var_name: str) -> Optional[Path]:
    p = os.environ.get(var_name)
    if p is not None:
        return Path(p)
    return None


class LabPaths(object):
    data_base: Path = None
    """
    Where generated datasets live. Defaults to ``$BCP_LAB_DATA`` if defined, or
    ``./data`` if not.
    """

    results_base: Path = None
    """
    Where run directories are created. Defaults to ``$BCP_LAB_RESULTS`` if
    defined, or ``./runs`` if not.
    """

    threads: int = 1
    """
    Cap on internal parallelism (per-volume evaluation fan-out). Defaults to
    ``$BCP_LAB_THREADS`` if defined, then the ``BCP_LAB_THREADS`` setting of
    ``config.py``, then 1.
    """

    @classmethod
    def new_defaults(cls, config: Optional[dict] = None):
        """
        Create a new LabPaths object with defaults taken from the environment.
        """
        config = config or {}

        inst = cls()
        inst.data_base = _maybe_envpath("BCP_LAB_DATA")
        if inst.data_base is None:
            inst.data_base = Path(config.get("BCP_LAB_DATA", "data"))

        inst.results_base = _maybe_envpath("BCP_LAB_RESULTS")
        if inst.results_base is None:
            inst.results_base = Path(config.get("BCP_LAB_RESULTS", "runs"))

        threads = os.environ.get("BCP_LAB_THREADS", config.get("BCP_LAB_THREADS", 1))
        try:
            inst.threads = int(threads)
        except (TypeError, ValueError):
            raise ValueError(f"BCP_LAB_THREADS must be an integer; got `{threads}`")

        if inst.threads < 1:
            raise ValueError(f"BCP_LAB_THREADS must be at least 1; got {inst.threads}")

        return inst

    def run_dir(self, tag: str) -> Path:
        """
        Get the path to the run directory for a tagged run. This function
        doesn't create the directory.
        """
        return self.results_base / tag


def parse_dumb_paths_file(path: str) -> dict:
    """
    Parse a very simpleminded file defining file paths. This function supports the
    tools in the `../diagnostics` directory. The main design constraint here is
    that the settings file must be `source`-able in a Bourne shell. So, the format
    is that variables are assigned with simple `name=value` syntax.
    """
    result = {}

    with open(path, "rt") as f:
        for line in f:
            line = line.split("#")[0]
            line = line.strip()

            if not line:
                continue

            name, value = line.split("=", 1)
            result[name] = value

    return result
