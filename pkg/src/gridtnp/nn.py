"""Parameter containers, basic layers, and checkpoint serialization.

``Module`` tracks parameters and submodules in attribute-assignment order so
that parameter iteration (and therefore optimizer state, checkpoints, and
seeded initialization) is deterministic. Checkpoints are a versioned JSON map
from parameter name to shape plus row-major values.
"""

from __future__ import annotations

import json
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

__all__ = [
    "Module",
    "Linear",
    "MLP",
    "LayerNormAffine",
    "xavier_uniform",
    "normal_init",
    "zeros_init",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_FORMAT_VERSION",
]

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed or incompatible with the model."""


# ---------------------------------------------------------------------------
# initialization schemes
# ---------------------------------------------------------------------------


def xavier_uniform(shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def normal_init(shape, rng: np.random.Generator, dtype=np.float64, std: float = 0.02) -> np.ndarray:
    return (std * rng.standard_normal(size=shape)).astype(dtype)


def zeros_init(shape, rng: np.random.Generator = None, dtype=np.float64) -> np.ndarray:
    return np.zeros(shape, dtype=dtype)


# ---------------------------------------------------------------------------
# module tree
# ---------------------------------------------------------------------------


class Module:
    """Base class for anything holding parameters.

    Assigning a ``Parameter``, ``Module``, or list of modules as an attribute
    registers it; iteration follows registration order.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(
            isinstance(v, Module) for v in value
        ):
            for i, v in enumerate(value):
                self._children[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        """Yield ``(path_name, Parameter)`` pairs and stamp names onto them."""
        for name, p in self._params.items():
            full = f"{prefix}{name}"
            p.name = full
            yield full, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Linear(Module):
    """Affine map over the last axis: ``x @ w + b``."""

    def __init__(
        self,
        n_in: int,
        n_out: int,
        rng: np.random.Generator,
        dtype=np.float64,
        bias: bool = True,
    ):
        super().__init__()
        self.w = Parameter(xavier_uniform((n_in, n_out), rng, dtype), init_scheme="xavier_uniform")
        self.b = Parameter(zeros_init((n_out,), dtype=dtype), init_scheme="zeros") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.w.tensor)
        if self.b is not None:
            out = T.add(out, self.b.tensor)
        return out


_ACTIVATIONS: dict = {"gelu": T.gelu, "relu": T.relu}


class MLP(Module):
    """Stack of linear layers with a pointwise activation between them."""

    def __init__(
        self,
        n_in: int,
        hidden: Sequence[int],
        n_out: int,
        rng: np.random.Generator,
        dtype=np.float64,
        activation: str = "gelu",
    ):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        widths = [n_in] + list(hidden) + [n_out]
        self.layers = [
            Linear(widths[i], widths[i + 1], rng, dtype) for i in range(len(widths) - 1)
        ]

    def forward(self, x: Tensor) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


class LayerNormAffine(Module):
    """Layer norm over the last axis followed by a learned scale and shift."""

    def __init__(self, width: int, dtype=np.float64, eps: float = T.LAYER_NORM_EPS):
        super().__init__()
        self.eps = eps
        self.gain = Parameter(np.ones(width, dtype=dtype), init_scheme="zeros")
        self.bias = Parameter(zeros_init((width,), dtype=dtype), init_scheme="zeros")

    def forward(self, x: Tensor) -> Tensor:
        return T.add(T.mul(T.layer_norm(x, self.eps), self.gain.tensor), self.bias.tensor)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# Format: magic, then a little-endian u32 header length, then a JSON header
# mapping parameter name -> shape + byte offset, then the flat row-major
# float64 values of all sections concatenated. ``arrays`` carries auxiliary
# state (e.g. optimizer moments) through the same mechanism.

_CKPT_MAGIC = b"GTNPCKPT"


def save_checkpoint(
    path,
    module: Module,
    extra: Optional[dict] = None,
    arrays: Optional[dict] = None,
) -> None:
    """Write all parameters (name -> shape + row-major values) plus optional
    named auxiliary arrays and a small JSON ``extra`` dict."""
    sections = {}
    blobs = []
    offset = 0

    def add_section(table, name, arr):
        nonlocal offset
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table[name] = {"shape": list(arr.shape), "offset": offset}
        blobs.append(blob)
        offset += len(blob)

    for name, p in module.named_parameters():
        add_section(sections, name, p.data)
    aux_sections: dict = {}
    for name, arr in (arrays or {}).items():
        add_section(aux_sections, name, np.asarray(arr))
    header = json.dumps(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "dtype": str(np.dtype(module.parameters()[0].data.dtype))
            if sections
            else "float64",
            "params": sections,
            "arrays": aux_sections,
            "extra": extra or {},
        }
    ).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(len(header).to_bytes(4, "little"))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def _read_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        header_len = int.from_bytes(f.read(4), "little")
        header = json.loads(f.read(header_len))
        body = f.read()
    version = header.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version!r} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    return header, body


def read_checkpoint_header(path) -> dict:
    return _read_checkpoint(path)[0]


def load_checkpoint(path, module: Module):
    """Load parameter values into ``module`` in place.

    Returns ``(extra, arrays)``. Raises ``CheckpointError`` on version, name,
    or shape mismatches.
    """
    header, body = _read_checkpoint(path)

    def section(entry):
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        values = np.frombuffer(body, dtype="<f8", count=n, offset=start)
        return values.reshape(shape)

    stored = header["params"]
    model_params = dict(module.named_parameters())
    missing = sorted(set(model_params) - set(stored))
    unexpected = sorted(set(stored) - set(model_params))
    if missing or unexpected:
        raise CheckpointError(
            f"checkpoint/model parameter mismatch: missing {missing}, unexpected {unexpected}"
        )
    for name, p in model_params.items():
        entry = stored[name]
        shape = tuple(entry["shape"])
        if shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {shape} vs model {p.data.shape}"
            )
        p.tensor.data = section(entry).astype(p.data.dtype)
        p.tensor.grad = np.zeros_like(p.tensor.data)
    arrays = {name: section(entry).copy() for name, entry in header["arrays"].items()}
    return header.get("extra", {}), arrays
