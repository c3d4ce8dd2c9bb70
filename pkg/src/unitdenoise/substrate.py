"""Dense float64 tensors with taped reverse-mode gradients, Adam, and LR schedules.

Single-threaded by contract: one Tape records one forward pass and is consumed
by one backward call. All ops work without an active tape too (plain forward),
which is what decoding and finite-difference checks rely on.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf


class SubstrateError(Exception):
    pass


class ShapeMismatch(SubstrateError):
    """Raised with the offending op named in the message."""


class TapeError(SubstrateError):
    pass


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A dense float64 array, optionally a trainable leaf."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    vjp: callable  # grad_out -> tuple of grads aligned with inputs (None allowed)


class Tape:
    """Operation record for one forward pass plus the parameter registry."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, Tensor] = {}
        self._tracked: set[int] = set()
        self._consumed = False

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.params and self.params[name] is not tensor:
            raise TapeError(f"parameter name already registered: {name}")
        tensor.requires_grad = True
        self.params[name] = tensor
        self._tracked.add(id(tensor))
        return tensor

    def register_all(self, params: dict[str, Tensor]) -> None:
        for name, tensor in params.items():
            self.register(name, tensor)

    def watches(self, tensor: Tensor) -> bool:
        return id(tensor) in self._tracked

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, inputs: tuple, vjp) -> Tensor:
    tape = _active_tape()
    if tape is None:
        return out
    if any(tape.watches(t) for t in inputs):
        tape.nodes.append(_Node(out, inputs, vjp))
        tape._tracked.add(id(out))
    return out


def record_custom(out_data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    """Hook for composite ops (e.g. CTC) that supply their own vjp."""
    return _record(Tensor(out_data), tuple(inputs), vjp)


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every registered parameter.

    Parameters the loss never touched get zero gradients. A tape is consumed
    by the call and cannot be reused.
    """
    if tape._consumed:
        raise TapeError("tape already consumed by a previous backward call")
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
    if not tape.watches(loss):
        raise TapeError("loss was not produced on this tape")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.out), None)
        if g_out is None:
            continue
        for inp, g in zip(node.inputs, node.vjp(g_out)):
            if g is None or not tape.watches(inp):
                continue
            acc = grads.get(id(inp))
            grads[id(inp)] = g if acc is None else acc + g

    return {
        name: grads.get(id(p), np.zeros_like(p.data)).reshape(p.data.shape)
        for name, p in tape.params.items()
    }


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# op suite
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data + b.data)
    except ValueError as e:
        raise ShapeMismatch(f"add: {a.shape} + {b.shape}") from e

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data * b.data)
    except ValueError as e:
        raise ShapeMismatch(f"mul: {a.shape} * {b.shape}") from e

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 1 or b.data.ndim < 2:
        raise ShapeMismatch(f"matmul: need >=2-d operands, got {a.shape} @ {b.shape}")
    try:
        out = Tensor(np.matmul(a.data, b.data))
    except ValueError as e:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}") from e

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), vjp)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (1.0 - y * y),))


def gelu(a: Tensor) -> Tensor:
    # exact (erf) form; matches the derivative Phi(x) + x*phi(x)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * cdf)

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _record(out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    out = Tensor(y)

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), vjp)


def layer_norm(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise the last axis to zero mean, unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y)
    n = x.shape[-1]

    def vjp(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gy_mean = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - g_mean - y * gy_mean),)

    return _record(out, (a,), vjp)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeMismatch(f"embedding_lookup: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeMismatch("embedding_lookup: id out of range")
    out = Tensor(table.data[ids])

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), vjp)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError as e:
        raise ShapeMismatch(f"concat: {[t.shape for t in tensors]}") from e
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), vjp)


def slice_(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    key = [slice(None)] * a.data.ndim
    key[axis] = slice(start, stop)
    key = tuple(key)
    out = Tensor(a.data[key])

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return _record(out, (a,), vjp)


def sum_(a: Tensor, axis=None) -> Tensor:
    out = Tensor(a.data.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _record(out, (a,), vjp)


def mean(a: Tensor, axis=None) -> Tensor:
    out = Tensor(a.data.mean(axis=axis))
    denom = a.data.size if axis is None else a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / denom, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / denom, a.data.shape).copy(),)

    return _record(out, (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    out = Tensor(a.data.transpose(axes))
    inv = np.argsort(axes)
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def take_per_row(a: Tensor, cols) -> Tensor:
    """out[i] = a[i, cols[i]] for a 2-d input."""
    cols = np.asarray(cols, dtype=np.int64)
    if a.data.ndim != 2 or cols.ndim != 1 or cols.shape[0] != a.data.shape[0]:
        raise ShapeMismatch(f"take_per_row: {a.shape} with {cols.shape} columns")
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, cols])

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[rows, cols] = g
        return (ga,)

    return _record(out, (a,), vjp)


def linear_combination(weights: Tensor, layers: list[Tensor]) -> Tensor:
    """sum_i weights[i] * layers[i]; layers may be constants or taped tensors."""
    w = weights.data
    if w.ndim != 1 or len(layers) != w.shape[0]:
        raise ShapeMismatch(
            f"linear_combination: {w.shape} weights for {len(layers)} layers"
        )
    acc = w[0] * layers[0].data
    for i in range(1, len(layers)):
        acc = acc + w[i] * layers[i].data
    out = Tensor(acc)

    def vjp(g):
        gw = np.array([(g * t.data).sum() for t in layers])
        return (gw, *[g * w[i] for i in range(len(layers))])

    return _record(out, (weights, *layers), vjp)


def dropout(a: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not train or p <= 0.0:
        return a
    if rng is None:
        raise SubstrateError("dropout in train mode needs an rng")
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)
    out = Tensor(a.data * keep)
    return _record(out, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    failures: dict[str, float]
    tol: float

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def ok(self) -> bool:
        return not self.failures


def grad_check(f, params: dict[str, Tensor], h: float = 1e-5, tol: float = 1e-5,
               floor: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients of a scalar-valued f against central differences.

    f is called with no arguments and must be deterministic (dropout off). The
    relative error denominator is floored so near-zero gradients are compared
    absolutely at the floor's scale.
    """
    with Tape() as tape:
        tape.register_all(params)
        loss = f()
    analytic = backward(tape, loss)

    per_param: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f().data)
            flat[i] = orig - h
            down = float(f().data)
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            an = analytic[name].reshape(-1)[i]
            denom = max(abs(fd), abs(an), floor)
            worst = max(worst, abs(fd - an) / denom)
        per_param[name] = worst

    failures = {k: v for k, v in per_param.items() if v >= tol}
    return GradCheckReport(per_param=per_param, failures=failures, tol=tol)


# ---------------------------------------------------------------------------
# optimiser and schedule
# ---------------------------------------------------------------------------

class AdamState:
    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.98, eps: float = 1e-8) -> None:
    """One in-place Adam update with bias correction."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"adam_step: grad {g.shape} vs param {p.data.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 200
    decay: float = 0.999  # per-step factor after warmup

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if not (0.0 < self.decay <= 1.0):
            raise ValueError("decay must be in (0, 1]")


def lr_at_step(schedule: ScheduleConfig, step: int) -> float:
    """Linear ramp to the peak over warmup, then exponential decay."""
    if step < 1:
        raise ValueError("step must be >= 1")
    if step <= schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    return schedule.peak_lr * schedule.decay ** (step - schedule.warmup_steps)


# ---------------------------------------------------------------------------
# named-tensor checkpoint container
# ---------------------------------------------------------------------------

_CKPT_HEADER = "DNZR v1"


def save_tensors(path, tensors: dict[str, np.ndarray], config_json: str | None = None) -> None:
    """Write `name<TAB>shape<TAB>base64(float64 LE)` lines under a DNZR v1 header."""
    lines = [_CKPT_HEADER]
    if config_json is not None:
        if "\n" in config_json:
            raise ValueError("config block must be a single line")
        lines.append(f"@config\t{config_json}")
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        shape = ",".join(str(d) for d in arr.shape)
        payload = base64.b64encode(arr.tobytes()).decode("ascii")
        lines.append(f"{name}\t{shape}\t{payload}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_tensors(path) -> tuple[dict[str, np.ndarray], str | None]:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _CKPT_HEADER:
        raise SubstrateError(f"bad checkpoint header in {path}")
    config_json = None
    tensors: dict[str, np.ndarray] = {}
    for line in lines[1:]:
        if not line:
            continue
        if line.startswith("@config\t"):
            config_json = line.split("\t", 1)[1]
            continue
        name, shape_s, payload = line.split("\t")
        shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
        arr = np.frombuffer(base64.b64decode(payload), dtype="<f8").reshape(shape)
        tensors[name] = arr.astype(np.float64)
    return tensors, config_json
