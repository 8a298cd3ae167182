"""Dense fp64 tensors with a reverse-mode tape, losses and an Adam optimizer.

Every learned computation in the package goes through this module. Arrays are
plain numpy ``float64``; the tape is a DAG of closures built on the fly.
"""

from __future__ import annotations

import contextlib
from collections.abc import Iterable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (evaluation, prototype building)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An fp64 array, optionally tracked for gradients.

    Leaves created with ``requires_grad=True`` own a zero-initialised ``grad``
    buffer that ``backward`` accumulates into.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- operations


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _result(a.data @ b.data, (a, b), bw)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _result(a.data * b.data, (a, b), bw)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sign(a) -> Tensor:
    # constant gate: no gradient ever flows through sign
    a = as_tensor(a)
    return Tensor(np.sign(a.data))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.logaddexp(0.0, a.data), (a,), lambda g: (g * _sigmoid(a.data),))


def identity(a) -> Tensor:
    return as_tensor(a)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "abs": abs_, "sign": sign, "relu": relu}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul take two operands; abs, sign, relu one."""
    fn = _ELEMENTWISE.get(op)
    if fn is None:
        raise UsageError(f"unknown elementwise op {op!r}")
    if op in ("add", "sub", "mul"):
        if b is None:
            raise UsageError(f"{op} needs two operands")
        return fn(a, b)
    return fn(a)


def _check_ids(ids, n_rows: int, num_segments: int, what: str) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 1 or ids.shape[0] != n_rows:
        raise DimensionError(f"{what}: need one id per row ({n_rows}), got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        bad = ids[(ids < 0) | (ids >= num_segments)][0]
        raise IndexError(f"{what}: segment id {bad} outside [0, {num_segments})")
    return ids


def segment_mean(x, segment_ids, num_segments: int, return_empty: bool = False):
    """Row-wise mean per segment; empty segments give zero rows.

    With ``return_empty=True`` returns ``(tensor, frozenset_of_empty_ids)``.
    """
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"segment_mean expects a matrix, got {x.shape}")
    ids = _check_ids(segment_ids, x.shape[0], num_segments, "segment_mean")
    counts = np.bincount(ids, minlength=num_segments).astype(np.float64)
    scale = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    sums = np.zeros((num_segments, x.shape[1]))
    np.add.at(sums, ids, x.data)
    out = _result(sums * scale[:, None], (x,), lambda g: ((g * scale[:, None])[ids],))
    if return_empty:
        return out, frozenset(np.flatnonzero(counts == 0).tolist())
    return out


def segment_max(x, segment_ids, num_segments: int) -> Tensor:
    """Column-wise max per segment; ties route the gradient to the lowest row."""
    x = as_tensor(x)
    n, d = x.shape
    ids = _check_ids(segment_ids, n, num_segments, "segment_max")
    best = np.full((num_segments, d), -np.inf)
    np.maximum.at(best, ids, x.data)
    rows = np.broadcast_to(np.arange(n)[:, None], (n, d))
    hit = np.where(x.data == best[ids], rows, n)
    arg = np.full((num_segments, d), n)
    np.minimum.at(arg, ids, hit)
    empty = np.bincount(ids, minlength=num_segments) == 0
    best[empty] = 0.0
    cols = np.broadcast_to(np.arange(d), (num_segments, d))
    valid = ~empty

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[arg[valid], cols[valid]] += g[valid]
        return (gx,)

    return _result(best, (x,), bw)


def gather_rows(x, idx) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp).reshape(-1)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise IndexError(f"gather_rows: index {bad} outside [0, {n})")

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(x.data[idx], (x,), bw)


def concat_rows(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        return tuple(g[lo:hi] if p.requires_grad else None
                     for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]))

    return _result(np.concatenate([p.data for p in parts], axis=0), parts, bw)


def columns(x, lo: int, hi: int) -> Tensor:
    """Column slice ``x[:, lo:hi]`` of a matrix."""
    x = as_tensor(x)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, lo:hi] = g
        return (gx,)

    return _result(x.data[:, lo:hi].copy(), (x,), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def sum_(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = max(x.data.size, 1)
    return _result(np.array(x.data.mean() if x.data.size else 0.0), (x,),
                   lambda g: (np.full(x.shape, float(g) / n),))


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -------------------------------------------------------------------- losses


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def cross_entropy(scores, target, mask=None) -> Tensor:
    """Mean softmax cross-entropy of ``scores`` (B x K) against class indices.

    ``mask`` (B x K bool) marks admissible classes per row; masked entries get
    zero probability.
    """
    scores = as_tensor(scores)
    if scores.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects B x K scores, got {scores.shape}")
    b, k = scores.shape
    target = np.asarray(target, dtype=np.intp).reshape(-1)
    if target.shape[0] != b:
        raise DimensionError(f"cross_entropy: {b} rows but {target.shape[0]} targets")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise IndexError(f"cross_entropy: class index outside [0, {k})")
    s = scores.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask[np.arange(b), target].all():
            raise IndexError("cross_entropy: target class is masked out")
        s = np.where(mask, s, -np.inf)
    shifted = s - s.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    value = float(np.mean(lse - shifted[rows, target])) if b else 0.0

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, target] -= 1.0
        return (p * (float(g) / max(b, 1)),)

    return _result(np.array(value), (scores,), bw)


def binary_ce(logits, target) -> Tensor:
    """Mean sigmoid binary cross-entropy on raw logits."""
    logits = as_tensor(logits)
    t = np.asarray(target, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"binary_ce: logits {logits.shape} vs target {t.shape}")
    z = logits.data
    n = max(z.size, 1)
    value = np.sum(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))) / n
    return _result(np.array(value), (logits,), lambda g: ((_sigmoid(z) - t) * (float(g) / n),))


def mse(pred, target) -> Tensor:
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise DimensionError(f"mse: prediction {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    n = max(diff.size, 1)
    return _result(np.array(np.sum(diff * diff) / n), (pred,), lambda g: (diff * (2.0 * float(g) / n),))


def losses(kind: str, pred, target, **kw) -> Tensor:
    if kind == "cross_entropy":
        return cross_entropy(pred, target, **kw)
    if kind == "mse":
        return mse(pred, target)
    if kind == "binary_ce":
        return binary_ce(pred, target)
    raise UsageError(f"unknown loss kind {kind!r}")


# ------------------------------------------------------------------ backward


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every tracked leaf's ``grad``."""
    if root.data.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order: list[Tensor] = []
    seen = {id(root)}
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, False))
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad += g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp


# ---------------------------------------------------------------- parameters


class ParameterStore:
    """Named leaf tensors, iterated in lexicographic name order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.step = 0

    def add(self, name: str, value, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise UsageError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=requires_grad)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: str = "") -> list[str]:
        return sorted(n for n in self._params if n.startswith(prefix))

    def items(self, prefix: str = ""):
        return [(n, self._params[n]) for n in self.names(prefix)]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: self._params[n].data.copy() for n in self.names()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for n, a in arrays.items():
            if n in self._params:
                if self._params[n].shape != a.shape:
                    raise DimensionError(f"{n}: stored {a.shape} vs model {self._params[n].shape}")
                self._params[n].data[...] = a
            else:
                self.add(n, a)


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Adam:
    """Bias-corrected adaptive moments over a fixed, sorted list of parameters."""

    def __init__(self, store: ParameterStore, names: Iterable[str] | None = None,
                 lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.names = sorted(names) if names is not None else store.names()
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(store[n].data) for n in self.names}
        self.v = {n: np.zeros_like(store[n].data) for n in self.names}

    def step(self) -> None:
        for n in self.names:
            if self.store[n].grad is None:
                raise UsageError(f"parameter {n!r} has no gradient buffer")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for n in self.names:
            p = self.store[n]
            g = p.grad
            m, v = self.m[n], self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            g[...] = 0.0
        self.store.step += 1


def optimizer_step(store: ParameterStore, state: Adam) -> None:
    if state.store is not store:
        raise UsageError("optimizer state belongs to a different parameter store")
    state.step()
