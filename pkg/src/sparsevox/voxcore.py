"""Shared numeric foundations.

Arrays are plain float64 numpy arrays. Learnable state lives in
:class:`Parameter` objects grouped by a :class:`ParameterStore`; every
differentiable operation in the package exposes a ``forward`` returning
``(out, cache)`` and a ``backward(cache, grad_out)`` that returns input
gradients and accumulates parameter gradients in place.
"""
from __future__ import annotations

import importlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

MAGIC = b"VXG1"


class VoxError(Exception):
    pass


class InvalidShape(VoxError, ValueError):
    pass


class NotRegistered(VoxError, KeyError):
    pass


class NumericalFailure(VoxError, ArithmeticError):
    pass


# ---------------------------------------------------------------- randomness


class RngStream:
    """Seeded PCG64 stream.

    Children are derived through ``numpy.random.SeedSequence`` spawning, so a
    given ``(seed, key path)`` always yields the same draws on every platform.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
            self.seed = int(seed.entropy)
        else:
            self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
            self._seq = np.random.SeedSequence(self.seed)
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    def split(self, n: int) -> list[RngStream]:
        return [RngStream(s) for s in self._seq.spawn(n)]

    def child(self, *keys: int) -> RngStream:
        # keyed child: independent of how many split() calls happened before
        seq = np.random.SeedSequence(self.seed, spawn_key=tuple(self._seq.spawn_key) + tuple(keys))
        return RngStream(seq)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)


# ---------------------------------------------------------------- parameters


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise InvalidShape(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


class ParameterStore:
    """Ordered, name-unique collection of parameters.

    ``add`` draws weights from N(0, (0.02 * scale)^2); biases, ``zeros`` and
    ``ones`` kinds are constant.
    """

    def __init__(self, rng: RngStream | None = None, init_scale: float = 1.0):
        self._params: dict[str, Parameter] = {}
        self.rng = rng if rng is not None else RngStream(0)
        self.init_scale = init_scale

    def add(self, name: str, shape, kind: str = "weight", scale: float = 1.0) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        if kind == "weight":
            value = self.rng.normal(0.0, 0.02 * scale * self.init_scale, size=shape)
        elif kind in ("bias", "zeros"):
            value = np.zeros(shape)
        elif kind == "ones":
            value = np.ones(shape)
        else:
            raise ValueError(f"unknown init kind {kind!r}")
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def register(self, p: Parameter) -> Parameter:
        if p.name in self._params:
            raise KeyError(f"duplicate parameter name {p.name!r}")
        self._params[p.name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, v in state.items():
            self._params[k].value[...] = v


# ---------------------------------------------------------------- labels


@dataclass(frozen=True)
class ClassTable:
    names: tuple[str, ...]
    foreground: tuple[bool, ...]

    def __post_init__(self):
        if len(self.names) != len(self.foreground):
            raise InvalidShape("names and foreground flags differ in length")
        if not self.names or self.names[0] != "empty" or self.foreground[0]:
            raise ValueError("class 0 must be 'empty' and non-foreground")

    def __len__(self):
        return len(self.names)

    def is_foreground(self, k: int) -> bool:
        return self.foreground[k]

    def is_background(self, k: int) -> bool:
        return k != 0 and not self.foreground[k]


DEFAULT_CLASSES = ClassTable(
    names=("empty", "road", "sidewalk", "terrain", "building", "car", "truck", "person", "bicycle"),
    foreground=(False, False, False, False, False, True, True, True, True),
)

IGNORE_LABEL = 255


@dataclass
class LabelGrid:
    labels: np.ndarray
    class_table: ClassTable = DEFAULT_CLASSES

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 3:
            raise InvalidShape(f"label grid must be 3D, got shape {self.labels.shape}")
        valid = self.labels[self.labels != IGNORE_LABEL]
        if valid.size and (valid.min() < 0 or valid.max() >= len(self.class_table)):
            raise ValueError("label outside class table")

    @property
    def shape(self):
        return self.labels.shape

    def present(self) -> list[int]:
        vals = np.unique(self.labels)
        return [int(k) for k in vals if k != IGNORE_LABEL]

    def occupancy(self) -> np.ndarray:
        return ((self.labels != 0) & (self.labels != IGNORE_LABEL)).astype(np.float64)

    def copy(self) -> LabelGrid:
        return LabelGrid(self.labels.copy(), self.class_table)


# ---------------------------------------------------------------- math helpers


def as_array(x, shape=None) -> np.ndarray:
    a = np.ascontiguousarray(x, dtype=np.float64)
    if shape is not None and a.shape != tuple(shape):
        raise InvalidShape(f"expected shape {tuple(shape)}, got {a.shape}")
    return a


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[axis] == 0:
        raise InvalidShape("softmax of an empty vector")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, grad_y: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (grad_y - (grad_y * y).sum(axis=axis, keepdims=True))


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------- binary dump


def save_array(path, arr) -> None:
    a = np.ascontiguousarray(arr, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes(order="C"))


def load_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    (rank,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    n = int(np.prod(shape, dtype=np.int64))
    payload = raw[offset:]
    if len(payload) != 8 * n:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, expected {8 * n}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


# ---------------------------------------------------------------- gradient check


@dataclass
class DiffOp:
    """A registered differentiable operation.

    ``forward(inputs, params) -> (out, cache)``; ``backward(cache, g)`` returns a
    dict of gradients for the names in ``wrt`` and adds parameter gradients
    into ``Parameter.grad``. ``sample(rng)`` builds a default ``(inputs, params)``.
    """

    name: str
    forward: Callable
    backward: Callable
    sample: Callable
    wrt: tuple[str, ...] = ()


_REGISTRY: dict[str, DiffOp] = {}
_OP_MODULES = ("sparsevox.ops",)


def register_op(op: DiffOp) -> DiffOp:
    _REGISTRY[op.name] = op
    return op


def registered_ops() -> list[str]:
    _load_ops()
    return sorted(_REGISTRY)


def _load_ops():
    for mod in _OP_MODULES:
        importlib.import_module(mod)


def get_op(op_id: str) -> DiffOp:
    if op_id not in _REGISTRY:
        _load_ops()
    try:
        return _REGISTRY[op_id]
    except KeyError:
        raise NotRegistered(op_id) from None


def _scalarize(out) -> np.ndarray:
    if isinstance(out, tuple):
        return np.concatenate([np.ravel(np.asarray(o, dtype=np.float64)) for o in out])
    return np.ravel(np.asarray(out, dtype=np.float64))


def vjp_check(op_id: str, inputs=None, params=None, probe: RngStream | None = None,
              step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar probed is ``<w, op(x)>`` for a random cotangent ``w`` drawn from
    ``probe``. Error per coordinate is ``|a - fd| / max(1, |a|)``.
    """
    op = get_op(op_id)
    probe = probe if probe is not None else RngStream(0)
    if inputs is None or params is None:
        s_inputs, s_params = op.sample(probe.child(0))
        inputs = s_inputs if inputs is None else inputs
        params = s_params if params is None else params
    inputs = {k: (np.array(v, dtype=np.float64) if k in op.wrt else v) for k, v in inputs.items()}
    params = dict(params)

    out, cache = op.forward(inputs, params)
    flat = _scalarize(out)
    if not np.all(np.isfinite(flat)):
        raise NumericalFailure(f"{op_id}: non-finite forward output")
    w = probe.child(1).normal(size=flat.shape)
    if isinstance(out, tuple):
        cot, pos = [], 0
        for o in out:
            o = np.asarray(o, dtype=np.float64)
            cot.append(w[pos:pos + o.size].reshape(o.shape))
            pos += o.size
        cot = tuple(cot)
    else:
        cot = w.reshape(np.shape(out))

    for p in params.values():
        p.zero_grad()
    grads = op.backward(cache, cot)

    def loss():
        o, _ = op.forward(inputs, params)
        return float(np.dot(w, _scalarize(o)))

    worst = 0.0
    targets = [(inputs[k], grads[k]) for k in op.wrt]
    targets += [(p.value, p.grad.copy()) for p in params.values()]
    for arr, analytic in targets:
        analytic = np.asarray(analytic, dtype=np.float64).reshape(arr.shape)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            lp = loss()
            arr[idx] = orig - step
            lm = loss()
            arr[idx] = orig
            fd = (lp - lm) / (2 * step)
            a = analytic[idx]
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    for p in params.values():
        p.zero_grad()
    return worst
