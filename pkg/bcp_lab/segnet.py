"""
A tiny U-Net-style segmentation network, momentum SGD with step-decay
learning rates, the EMA teacher update, and the checkpoint file format.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic  b"BCPCKPT\\x01"
    4 bytes   u32    header length H
    H bytes   UTF-8 JSON header:
                {"version": 1, "net_config": {...}, "iteration": k,
                 "dtype": "f4" | "f8",
                 "tensors": [{"group": g, "name": n, "shape": [...], "offset": o}, ...],
                 "extra": {...}}
    payload   concatenated row-major tensor values in ``dtype``; ``offset`` is
              counted in bytes from the start of the payload
"""

from dataclasses import asdict, dataclass
import json
import logging
import math
from pathlib import Path
import struct
from typing import Dict, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .utils import DataError, atomic_write_bytes

__all__ = [
    "Checkpoint",
    "EmaConfig",
    "ModelParams",
    "NetConfig",
    "OptimConfig",
    "ema_update",
    "forward",
    "init_params",
    "load_checkpoint",
    "lr_at",
    "save_checkpoint",
    "sgd_step",
]

default_logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BCPCKPT\x01"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig(object):
    in_channels: int = 1
    num_classes: int = 3
    "K, including background."

    base_width: int = 8
    "Channels at the first level; doubled at each downsampling."

    depth: int = 3
    "Number of resolution levels, i.e. ``depth - 1`` downsamplings."

    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"NetConfig.depth must be >= 1; got {self.depth}")
        if self.base_width < 1:
            raise ValueError(f"NetConfig.base_width must be >= 1; got {self.base_width}")
        if self.num_classes < 2:
            raise ValueError(f"NetConfig.num_classes must be >= 2; got {self.num_classes}")
        if self.in_channels < 1:
            raise ValueError(f"NetConfig.in_channels must be >= 1; got {self.in_channels}")

    @property
    def divisor(self) -> int:
        "Spatial extents of inputs must be multiples of this."
        return 2 ** (self.depth - 1)

    def width(self, level: int) -> int:
        return self.base_width * 2**level

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class OptimConfig(object):
    lr0: float = 0.01
    decay_factor: float = 0.9
    "Multiplier applied every ``decay_interval`` iterations."

    decay_interval: int = 2500
    momentum: float = 0.9

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError(f"OptimConfig.lr0 must be > 0; got {self.lr0}")
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f"OptimConfig.decay_factor must be in (0, 1]; got {self.decay_factor}")
        if self.decay_interval < 1:
            raise ValueError(f"OptimConfig.decay_interval must be >= 1; got {self.decay_interval}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"OptimConfig.momentum must be in [0, 1); got {self.momentum}")


@dataclass(frozen=True)
class EmaConfig(object):
    lam: float = 0.99
    "Smoothing coefficient λ of the teacher update."

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise ValueError(f"EmaConfig.lam must be in [0, 1]; got {self.lam}")


class ModelParams(object):
    """
    An ordered collection of named parameter tensors.
    """

    def __init__(self, tensors: Mapping[str, Union[Tensor, np.ndarray]]):
        self._tensors: Dict[str, Tensor] = {}

        for name, t in tensors.items():
            if not isinstance(t, Tensor):
                t = Tensor(t)
            self._tensors[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def arrays(self) -> Dict[str, np.ndarray]:
        return {n: t.values for n, t in self._tensors.items()}

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {n: t.shape for n, t in self._tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams({n: Tensor(t.values) for n, t in self._tensors.items()})

    def with_grad(self) -> "ModelParams":
        "Fresh leaf tensors with gradients enabled, sharing no state with self."
        return ModelParams({n: Tensor(t.values, grad_enabled=True) for n, t in self._tensors.items()})

    def grads(self) -> Dict[str, np.ndarray]:
        return {n: t.grad for n, t in self._tensors.items() if t.grad is not None}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.values)) for t in self._tensors.values())

    def equals(self, other: "ModelParams") -> bool:
        "Bit-exact equality of names, shapes and values."
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n].values, other[n].values) for n in self)

    def check_compatible(self, other: "ModelParams", what: str):
        if self.shapes() != other.shapes():
            raise ValueError(f"{what}: parameter sets differ in names or shapes")


# Network


def _conv_specs(cfg: NetConfig) -> List[Tuple[str, int, int, int]]:
    "(name, cin, cout, kernel extent) for every convolution, in forward order."
    specs = []
    cin = cfg.in_channels

    for level in range(cfg.depth):
        w = cfg.width(level)
        specs.append((f"enc{level}.conv0", cin, w, 3))
        specs.append((f"enc{level}.conv1", w, w, 3))
        cin = w

    for level in range(cfg.depth - 2, -1, -1):
        w = cfg.width(level)
        specs.append((f"dec{level}.conv0", cfg.width(level + 1) + w, w, 3))
        specs.append((f"dec{level}.conv1", w, w, 3))

    specs.append(("head", cfg.width(0), cfg.num_classes, 1))
    return specs


def init_params(cfg: NetConfig) -> ModelParams:
    """
    Kaiming-style fan-in uniform initialization, U(±√(6/fan_in)), with zero
    biases. Deterministic given ``cfg.seed``.
    """
    rng = np.random.default_rng(cfg.seed)
    tensors = {}

    for name, cin, cout, k in _conv_specs(cfg):
        bound = math.sqrt(6.0 / (cin * k * k))
        tensors[f"{name}.weight"] = rng.uniform(-bound, bound, size=(cout, cin, k, k))
        tensors[f"{name}.bias"] = np.zeros(cout)

    return ModelParams(tensors)


def _conv(params: ModelParams, name: str, x: Tensor) -> Tensor:
    kernel = params[f"{name}.weight"]
    pad = kernel.shape[-1] // 2
    return ad.conv2d(x, kernel, params[f"{name}.bias"], stride=1, padding=pad)


def _conv_relu(params: ModelParams, name: str, x: Tensor, probe: Optional[list]) -> Tensor:
    pre = _conv(params, name, x)
    if probe is not None:
        probe.append(("relu", pre.values))
    return ad.relu(pre)


def forward(
    params: ModelParams,
    x: Union[Tensor, np.ndarray],
    cfg: Optional[NetConfig] = None,
    probe: Optional[list] = None,
) -> Tensor:
    """
    Compute logits ``[B,K,H,W]`` for inputs ``[B,Cin,H,W]``.

    The network configuration is recovered from the parameter names when
    ``cfg`` is not given. If ``probe`` is a list, ``(kind, array)`` pairs are
    appended to it: ``"relu"`` pre-activations, ``"maxpool"`` inputs and the
    ``"penultimate"`` feature map.
    """
    if not isinstance(x, Tensor):
        x = ad.const(x)

    depth = cfg.depth if cfg is not None else _infer_depth(params)
    divisor = 2 ** (depth - 1)

    if x.values.ndim != 4:
        raise ValueError(f"forward needs a [B,C,H,W] input; got shape {x.shape}")
    if x.shape[2] % divisor or x.shape[3] % divisor:
        raise ValueError(
            f"spatial extents {x.shape[2:]} must be divisible by {divisor} for a depth-{depth} network"
        )

    skips = []
    h = x

    for level in range(depth):
        if level > 0:
            if probe is not None:
                probe.append(("maxpool", h.values))
            h = ad.maxpool2(h)
        h = _conv_relu(params, f"enc{level}.conv0", h, probe)
        h = _conv_relu(params, f"enc{level}.conv1", h, probe)
        skips.append(h)

    for level in range(depth - 2, -1, -1):
        h = ad.nearest_upsample2x(h)
        h = ad.channel_concat(h, skips[level])
        h = _conv_relu(params, f"dec{level}.conv0", h, probe)
        h = _conv_relu(params, f"dec{level}.conv1", h, probe)

    if probe is not None:
        probe.append(("penultimate", h.values))

    return _conv(params, "head", h)


def _infer_depth(params: ModelParams) -> int:
    depth = 0
    while f"enc{depth}.conv0.weight" in params:
        depth += 1
    if depth == 0:
        raise ValueError("parameter set has no encoder convolutions")
    return depth


# Optimization


def lr_at(iteration: int, cfg: OptimConfig) -> float:
    """
    Step-decayed learning rate: ``lr0 · decay_factor^⌊iteration / decay_interval⌋``.
    """
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0; got {iteration}")
    return cfg.lr0 * cfg.decay_factor ** (iteration // cfg.decay_interval)


def sgd_step(
    params: ModelParams,
    grads: Mapping[str, np.ndarray],
    velocity: Optional[Mapping[str, np.ndarray]],
    lr: float,
    momentum: float,
) -> Tuple[ModelParams, Dict[str, np.ndarray]]:
    """
    One momentum SGD update: ``v ← momentum·v + g``; ``θ ← θ − lr·v``.

    Returns the new parameters and velocity; the inputs are not modified.
    """
    new_params = {}
    new_velocity = {}

    for name, t in params.items():
        g = grads.get(name)
        if g is None:
            raise ValueError(f"sgd_step: no gradient for parameter `{name}`")
        if g.shape != t.shape:
            raise ValueError(f"sgd_step: gradient shape {g.shape} for `{name}` does not match {t.shape}")

        v = g if velocity is None or name not in velocity else momentum * velocity[name] + g
        new_velocity[name] = np.array(v, dtype=np.float64)
        new_params[name] = t.values - lr * new_velocity[name]

    return ModelParams(new_params), new_velocity


def ema_update(teacher: ModelParams, student: ModelParams, cfg: EmaConfig) -> ModelParams:
    """
    Teacher update ``θ_t ← λ·θ_t + (1 − λ)·θ_s``, parameter by parameter.
    """
    teacher.check_compatible(student, "ema_update")
    lam = cfg.lam
    return ModelParams(
        {n: lam * teacher[n].values + (1.0 - lam) * student[n].values for n in teacher}
    )


# Checkpoints


class Checkpoint(object):
    """
    The decoded contents of a checkpoint file.
    """

    net_config: NetConfig = None
    iteration: int = 0
    dtype: str = "f4"
    groups: Dict[str, ModelParams] = None
    "Named parameter groups, e.g. ``student``, ``teacher``, ``velocity``."

    extra: dict = None

    def params(self, group: str = "student") -> ModelParams:
        try:
            return self.groups[group]
        except KeyError:
            raise DataError(f"checkpoint has no parameter group `{group}`; has {sorted(self.groups)}")


_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


def save_checkpoint(
    path: Union[str, Path],
    groups: Mapping[str, Union[ModelParams, Mapping[str, np.ndarray]]],
    net_cfg: NetConfig,
    iteration: int = 0,
    extra: Optional[dict] = None,
    dtype: str = "f4",
):
    """
    Write parameter groups to ``path`` atomically.
    """
    if dtype not in _DTYPES:
        raise ValueError(f"checkpoint dtype must be one of {sorted(_DTYPES)}; got `{dtype}`")
    np_dtype = _DTYPES[dtype]

    entries = []
    blobs = []
    offset = 0

    for group, tensors in groups.items():
        if isinstance(tensors, ModelParams):
            tensors = tensors.arrays()

        for name, arr in tensors.items():
            blob = np.ascontiguousarray(arr, dtype=np_dtype).tobytes()
            entries.append({"group": group, "name": name, "shape": list(np.shape(arr)), "offset": offset})
            blobs.append(blob)
            offset += len(blob)

    header = {
        "version": CHECKPOINT_VERSION,
        "net_config": net_cfg.to_dict(),
        "iteration": int(iteration),
        "dtype": dtype,
        "tensors": entries,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    data = CHECKPOINT_MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + b"".join(blobs)
    atomic_write_bytes(path, data)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)

    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"no such checkpoint `{path}`")

    if not data.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"`{path}` is not a checkpoint (bad magic)")

    base = len(CHECKPOINT_MAGIC)
    if len(data) < base + 4:
        raise DataError(f"checkpoint `{path}` is truncated in its header length")
    (hlen,) = struct.unpack("<I", data[base : base + 4])

    try:
        header = json.loads(data[base + 4 : base + 4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"checkpoint `{path}` has a malformed header: {e}")

    if header.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint `{path}` has unsupported version {header.get('version')!r}")

    np_dtype = _DTYPES.get(header.get("dtype"))
    if np_dtype is None:
        raise DataError(f"checkpoint `{path}` has unknown dtype {header.get('dtype')!r}")

    payload = data[base + 4 + hlen :]
    groups: Dict[str, Dict[str, np.ndarray]] = {}

    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        stop = start + count * np_dtype.itemsize

        if stop > len(payload):
            raise DataError(
                f"checkpoint `{path}` is truncated: tensor `{entry['group']}/{entry['name']}` needs "
                f"bytes {start}..{stop} but the payload has {len(payload)}"
            )

        arr = np.frombuffer(payload[start:stop], dtype=np_dtype).astype(np.float64)
        groups.setdefault(entry["group"], {})[entry["name"]] = arr.reshape(entry["shape"])

    ckpt = Checkpoint()
    ckpt.net_config = NetConfig(**header["net_config"])
    ckpt.iteration = header["iteration"]
    ckpt.dtype = header["dtype"]
    ckpt.groups = {g: ModelParams(t) for g, t in groups.items()}
    ckpt.extra = header.get("extra", {})
    return ckpt
