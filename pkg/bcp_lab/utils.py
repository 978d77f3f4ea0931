"""
Miscellaneous utilities that don't fit anywhere else.
"""

__all__ = [
    "DataError",
    "NumericError",
    "UndefinedMetricError",
    "VolumeFormatError",
    "atomic_write_bytes",
    "atomic_write_text",
    "check_field_types",
    "format_details",
    "get_ads_logger",
    "get_lab_config",
]

from dataclasses import fields
import logging
import os
from pathlib import Path
import tempfile
from typing import Optional, Union

proj_home = os.path.realpath(os.path.join(os.path.dirname(__file__), "../"))


class DataError(Exception):
    """
    A problem with input data: a missing or malformed file, or a config that
    doesn't match its schema.
    """


class VolumeFormatError(DataError):
    """
    A volume header or payload that can't be decoded.
    """


class NumericError(Exception):
    """
    Training produced a non-finite loss. ``dump_path``, if set, points to the
    state checkpoint that was written before halting.
    """

    def __init__(self, message: str, dump_path: Optional[Path] = None):
        super().__init__(message)
        self.dump_path = dump_path


class UndefinedMetricError(ValueError):
    """
    A surface-distance metric was requested for an empty surface.
    """


_ads_config = None


def get_ads_logger(name: str) -> logging.Logger:
    """
    Get the project logger configured through ``adsputils``, honoring the
    ``LOGGING_LEVEL`` and ``LOG_STDOUT`` settings of ``config.py``.
    """
    global _ads_config
    from adsputils import load_config, setup_logging

    if _ads_config is None:
        _ads_config = load_config(proj_home=proj_home)

    return setup_logging(
        name,
        proj_home=proj_home,
        level=_ads_config.get("LOGGING_LEVEL", "INFO"),
        attach_stdout=_ads_config.get("LOG_STDOUT", False),
    )


def get_lab_config() -> dict:
    """
    The ``adsputils`` configuration dictionary for this project.
    """
    global _ads_config
    from adsputils import load_config

    if _ads_config is None:
        _ads_config = load_config(proj_home=proj_home)
    return _ads_config


def format_details(**kwargs) -> str:
    """
    Render event details in ``key=val`` form. Sorted for stable output across
    invocations.
    """
    return " ".join(f"{t[0]}={t[1]}" for t in sorted(kwargs.items()))


def _type_matches(value, kind) -> bool:
    # Booleans never pass as numbers.
    if kind is bool:
        return isinstance(value, bool)
    if isinstance(value, bool):
        return False
    if kind is int:
        return isinstance(value, int)
    if kind is float:
        return isinstance(value, (int, float))
    if kind is str:
        return isinstance(value, str)
    if getattr(kind, "__origin__", None) is tuple:
        return isinstance(value, (list, tuple)) and all(_type_matches(v, kind.__args__[0]) for v in value)
    return True


_TYPE_NAMES = {bool: "a boolean", int: "an integer", float: "a number", str: "a string"}


def check_field_types(cls, doc: dict, what: str):
    """
    Check the JSON values in ``doc`` against the annotated field types of the
    dataclass ``cls``, raising a DataError naming ``what`` and the field on
    the first mismatch. Fields of other types are left alone.
    """
    for f in fields(cls):
        if f.name not in doc:
            continue
        value = doc[f.name]
        if not _type_matches(value, f.type):
            expected = _TYPE_NAMES.get(f.type, "a list of integers")
            raise DataError(f"{what} field `{f.name}` must be {expected}; got {value!r}")


def atomic_write_bytes(path: Union[str, Path], data: bytes):
    """
    Write ``data`` to ``path`` by way of a temporary file in the same
    directory, so that readers never see a partial file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))

    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as e:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise DataError(f"failed to write `{path}`: {e}") from e


def atomic_write_text(path: Union[str, Path], text: str):
    atomic_write_bytes(path, text.encode("utf-8"))
