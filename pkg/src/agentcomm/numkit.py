"""Small dense-tensor library with define-by-run reverse-mode autodiff.

Values and gradients are float32.  Matrix products go straight to float32
BLAS; the numerically touchy reductions (softmax normalisers, layer-norm
statistics, losses) accumulate in float64 and round back.  Operations are recorded on the active
:class:`Tape` only when at least one input requires a gradient, so plain
evaluation outside a tape costs nothing beyond the numpy calls.

    with Tape() as tape:
        loss = softmax_ce_loss(matmul(x, w), targets)
        tape.backward(loss)
    w.grad  # populated
"""

from __future__ import annotations

import contextvars
import hashlib
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

F32 = np.float32
F64 = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


_COMPUTE: contextvars.ContextVar[type] = contextvars.ContextVar("numkit_dtype", default=F32)


class float64_compute:
    """Within this block new tensors are float64 instead of float32.

    Only meant for reference evaluations (finite differences) where the
    float32 rounding of the result would swamp the quantity being measured.
    """

    def __enter__(self):
        self._token = _COMPUTE.set(F64)
        return self

    def __exit__(self, *exc):
        _COMPUTE.reset(self._token)


def compute_dtype() -> type:
    """dtype for newly created arrays: float32, or float64 inside :class:`float64_compute`."""
    return _COMPUTE.get()


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "numkit_tape", default=None
)


class Tensor:
    """Dense float32 array that may take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_id")

    _counter = 0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_COMPUTE.get())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        Tensor._counter += 1
        self._id = Tensor._counter

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self), -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _scalar_error(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=like.data.dtype), like.shape))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=F32), requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered log of differentiable operations for one forward pass.

    Records are appended as operations execute, so the log is already in
    topological order.  ``backward`` walks it once in reverse.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

        Leaf gradients add to whatever is already stored, so callers zero them
        between optimisation steps.
        """
        if grad is None:
            if loss.data.size != 1:
                raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
            grad = np.ones(loss.shape, dtype=F32)
        produced = {rec.output._id for rec in self.records}
        grads: dict[int, np.ndarray] = {loss._id: np.asarray(grad, dtype=F32)}
        for rec in reversed(self.records):
            g_out = grads.pop(rec.output._id, None)
            if g_out is None:
                continue
            g_ins = rec.backward(g_out)
            for inp, g in zip(rec.inputs, g_ins):
                if g is None or not inp.requires_grad:
                    continue
                g = np.asarray(g, dtype=F32)
                if inp._id in grads:
                    grads[inp._id] = grads[inp._id] + g
                else:
                    grads[inp._id] = g
                if inp._id not in produced:
                    # leaf: fold straight into .grad
                    g32 = grads.pop(inp._id).astype(F32)
                    inp.grad = g32 if inp.grad is None else inp.grad + g32
        if loss._id not in produced and loss.requires_grad:
            g = grads.pop(loss._id, None)
            if g is not None:
                g32 = g.astype(F32)
                loss.grad = g32 if loss.grad is None else loss.grad + g32


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _record(inputs: Sequence[Tensor], out_data: np.ndarray, backward: Callable) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.records.append(_Record(tuple(inputs), out, backward))
    return out


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {what}")


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be 2-D and shared across the leading (batch) axes of ``a``, or
    carry the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def backward(g):
        ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and A.ndim > 2:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _record((a, b), out, backward)


def _suffix_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead else g


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may match a trailing suffix of ``a`` (bias add)."""
    _suffix_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return (g if a.requires_grad else None,
                _reduce_to(g, sb) if b.requires_grad else None)

    return _record((a, b), a.data + b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _suffix_broadcast(a, b, "mul")
    A, B = a.data, b.data
    sb = b.shape

    def backward(g):
        ga = g * B if a.requires_grad else None
        gb = _reduce_to(g * A, sb) if b.requires_grad else None
        return ga, gb

    return _record((a, b), A * B, backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record((a,), (a.data * c).astype(a.data.dtype), lambda g: (g * c,))


# grad_check collects relu sign patterns here to spot differences taken across a kink
_KINK_LOG: contextvars.ContextVar["list | None"] = contextvars.ContextVar("numkit_kinks", default=None)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    log = _KINK_LOG.get()
    if log is not None:
        log.append(mask)
    return _record((a,), np.maximum(a.data, F32(0)), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data.astype(F64))
    return _record((a,), y, lambda g: (g * (1.0 - y * y),))


def elementwise(kind: str, *args, **kw) -> Tensor:
    """Dispatch by name: add, mul, relu, tanh or scale."""
    table = {"add": add, "mul": mul, "relu": relu, "tanh": tanh, "scale": scale}
    if kind not in table:
        raise ContractError(f"unknown elementwise op {kind!r}")
    return table[kind](*args, **kw)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _record((a,), a.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record((a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractError("concat of nothing")
    axis = axis % parts[0].ndim
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or any(
            p.shape[d] != parts[0].shape[d] for d in range(p.ndim) if d != axis
        ):
            raise DimensionError(f"concat shape mismatch: {[q.shape for q in parts]}")
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(parts, np.concatenate([p.data for p in parts], axis=axis), backward)


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Select positions along ``axis`` (integer array or slice)."""
    src_shape = a.shape
    sel = [slice(None)] * a.ndim
    sel[axis] = index
    sel = tuple(sel)
    out = a.data[sel]

    def backward(g):
        full = np.zeros(src_shape, dtype=F32)
        np.add.at(full, sel, g)
        return (full,)

    return _record((a,), out, backward)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range [0, {table.shape[0]})")
    rows = table.shape

    def backward(g):
        full = np.zeros(rows, dtype=F32)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, rows[-1]))
        return (full,)

    return _record((table,), table.data[ids], backward)


def pick_rows(a: Tensor, index) -> Tensor:
    """``a[i, index[i]]`` over the first axis, for a batch of sequences."""
    index = np.asarray(index, dtype=np.int64)
    b = np.arange(a.shape[0])
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=F32)
        full[b, index] = g
        return (full,)

    return _record((a,), a.data[b, index], backward)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    out = a.data.astype(F64).sum()
    return _record((a,), out, lambda g: (np.broadcast_to(g, shape).astype(F32),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, max(a.data.size, 1)
    out = a.data.astype(F64).mean() if a.data.size else 0.0
    return _record((a,), out, lambda g: (np.broadcast_to(g / n, shape).astype(F32),))


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (broadcastable bool) marks allowed entries."""
    x = a.data.astype(F64)
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y,)

    return _record((a,), y, backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    X = x.data.astype(F64)
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gamma.data.astype(F64)
    out = xhat * G + beta.data
    d = X.shape[-1]

    def backward(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * G
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _record((x, gamma, beta), out, backward)


def softmax_ce_loss(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean cross-entropy of ``logits[n, v]`` against integer ``targets[n]``.

    ``weights`` (optional, per row) turns it into a weighted mean, which is how
    padded positions are excluded.
    """
    if logits.ndim != 2:
        raise DimensionError(f"softmax_ce_loss wants [n, v] logits, got {logits.shape}")
    n, v = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise DimensionError(f"{n} logit rows but {t.shape[0]} targets")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target index out of range [0, {v})")
    w = np.ones(n, dtype=F64) if weights is None else np.asarray(weights, dtype=F64)
    denom = max(w.sum(), 1e-12)
    z = logits.data.astype(F64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    nll = lse - z[rows, t]
    loss = float((w * nll).sum() / denom)
    p = np.exp(z - lse[:, None])

    def backward(g):
        d = p.copy()
        d[rows, t] -= 1.0
        return (d * (w / denom)[:, None] * g,)

    return _record((logits,), loss, backward)


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mse_loss shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data.astype(F64) - b.data.astype(F64)
    n = max(diff.size, 1)
    loss = (diff * diff).sum() / n

    def backward(g):
        d = 2.0 * diff / n * g
        return (d if a.requires_grad else None, -d if b.requires_grad else None)

    return _record((a, b), loss, backward)


def straight_through(value: np.ndarray, source: Tensor) -> Tensor:
    """Tensor holding ``value`` whose gradient is copied unchanged onto ``source``.

    Bridges a non-differentiable stage: the forward result is whatever the
    stage produced, the backward Jacobian is the identity.
    """
    value = np.asarray(value, dtype=_COMPUTE.get())
    if value.shape != source.shape:
        raise DimensionError(f"bridge shape mismatch: {value.shape} vs {source.shape}")
    return _record((source,), value.copy(), lambda g: (g,))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3,
               coords: Iterable[int] | None = None, skip_kinks: bool = False) -> float:
    """Largest relative gap between the taped gradient and central differences.

    See :func:`grad_check_detail`; this returns only the worst error.
    """
    return grad_check_detail(f, x, eps, coords, skip_kinks)[0]


def grad_check_detail(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3,
                      coords: Iterable[int] | None = None,
                      skip_kinks: bool = False) -> tuple[float, int, int]:
    """``(worst error, coordinates compared, coordinates skipped)``.

    The taped gradient is computed on the normal float32 path.  The central
    differences re-evaluate ``f`` under :class:`float64_compute` so that the
    rounding of a float32 scalar output does not masquerade as a gradient
    error.  Per coordinate the error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``; ``coords``
    restricts the comparison to a subset of flat indices.

    With ``skip_kinks`` a coordinate is left out when some relu unit has a
    different sign at ``x + eps`` than at ``x - eps``: the difference then
    spans a kink and is not an estimate of the derivative at ``x``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    saved_flag = x.requires_grad
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
        if y.data.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got shape {y.shape}")
        tape.backward(y)
    analytic = (np.zeros(x.shape, F32) if x.grad is None else x.grad).reshape(-1).astype(F64)
    x.grad = None
    x.requires_grad = saved_flag
    original = x.data
    work = original.astype(F64)
    flat = work.reshape(-1)
    idx = range(flat.size) if coords is None else coords

    def evaluate() -> tuple[float, list]:
        log: list = []
        token = _KINK_LOG.set(log if skip_kinks else None)
        try:
            return float(f(x).data), log
        finally:
            _KINK_LOG.reset(token)

    worst = 0.0
    checked = skipped = 0
    try:
        x.data = work
        with float64_compute():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                up, up_masks = evaluate()
                flat[i] = orig - eps
                down, down_masks = evaluate()
                flat[i] = orig
                if skip_kinks and any(not np.array_equal(m, n) for m, n in zip(up_masks, down_masks)):
                    skipped += 1
                    continue
                numeric = (up - down) / (2.0 * eps)
                a = analytic[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
                checked += 1
    finally:
        x.data = original
    return worst, checked, skipped


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------


def stream(seed: int, *names) -> np.random.Generator:
    """Independent Philox generator keyed by ``seed`` and a path of names.

    The same (seed, names) always yields the same sequence, and distinct
    names give statistically independent streams.
    """
    h = hashlib.sha256(repr((int(seed),) + tuple(str(n) for n in names)).encode()).digest()
    key = int.from_bytes(h[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

_MAGIC = "numkit-ckpt 1"


class ManifestError(ValueError):
    """Checkpoint manifest is malformed or does not match expectations."""


def save_tensors(path, tensors: dict[str, "Tensor | np.ndarray"]) -> None:
    """Write named tensors: text manifest, blank line, raw little-endian f32 payloads."""
    lines = [_MAGIC, str(len(tensors))]
    payload = []
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=F32)
        if any(c.isspace() for c in name):
            raise ManifestError(f"tensor name may not contain whitespace: {name!r}")
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"{name} f32 {shape}")
        payload.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    head = ("\n".join(lines) + "\n\n").encode("utf-8")
    Path(path).write_bytes(head + b"".join(payload))


def load_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\n\n")
    if end < 0:
        raise ManifestError(f"{path}: no manifest terminator")
    lines = raw[:end].decode("utf-8").split("\n")
    if lines[0] != _MAGIC:
        raise ManifestError(f"{path}: bad magic {lines[0]!r}")
    count = int(lines[1])
    records = lines[2:]
    if len(records) != count:
        raise ManifestError(f"{path}: manifest lists {len(records)} records, header says {count}")
    out: dict[str, np.ndarray] = {}
    offset = end + 2
    for rec in records:
        parts = rec.split(" ")
        if len(parts) != 3 or parts[1] != "f32":
            raise ManifestError(f"{path}: bad record {rec!r}")
        name, _, dims = parts
        shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        n = int(np.prod(shape)) if shape else 1
        nbytes = 4 * n
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise ManifestError(f"{path}: truncated payload for {name}")
        out[name] = np.frombuffer(chunk, dtype="<f4").astype(F32).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise ManifestError(f"{path}: {len(raw) - offset} trailing bytes")
    return out


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------


class Momentum:
    """Gradient descent with heavy-ball momentum and optional global-norm clipping."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9,
                 clip: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad.astype(F64) ** 2).sum())
                                 for p in self.params if p.grad is not None)))

    def step(self) -> float:
        norm = self.grad_norm()
        factor = 1.0
        if self.clip is not None and norm > self.clip:
            factor = self.clip / norm
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad * F32(factor)
            p.data = (p.data - F32(self.lr) * v).astype(F32)
        return norm
