"""Dense 2-D float64 tensors with reverse-mode differentiation.

The operation set is fixed and each op carries a hand-written backward
rule: matmul, transpose, add (with single-row broadcast), scale (by a
float or by a 1x1 tensor), concat_rows, slice_rows, softmax_rows, tanh,
mean_all and sq_diff.  Graphs are rebuilt per forward pass; `backward`
walks the graph once from a scalar loss and accumulates gradients into
the leaves.

Also home to `Rng`, a counter-based (Philox) generator with named
sub-streams, so that adding a new consumer of randomness never shifts
the draws of existing ones.
"""

import hashlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """An operation was called outside its contract."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the contract requires finite ones."""


def _as_matrix(value):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {arr.shape}")
    return arr


class Tensor:
    """A node in the computation graph holding a (rows x cols) float64 array.

    Values are treated as immutable once the node is built; only the
    optimizer mutates `Parameter` values, between graph builds.
    """

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents")

    def __init__(self, value, requires_grad=False, name="", _parents=()):
        self.value = _as_matrix(value)
        if not np.isfinite(self.value).all():
            raise NumericError(f"non-finite values in tensor {name or '<anon>'}")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents

    @property
    def rows(self):
        return self.value.shape[0]

    @property
    def cols(self):
        return self.value.shape[1]

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        if self.value.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named leaf with a persistent gradient buffer and a trainable flag.

    `trainable=False` marks weights the optimizer must never touch; their
    values stay bit-identical for the life of the model.
    """

    __slots__ = ("trainable",)

    def __init__(self, value, name, trainable=True):
        super().__init__(value, requires_grad=bool(trainable), name=name)
        self.trainable = bool(trainable)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[:] = 0.0

    def freeze(self):
        self.trainable = False
        self.requires_grad = False

    def __repr__(self):
        return (f"Parameter({self.name!r}, shape={self.value.shape}, "
                f"trainable={self.trainable})")


def constant(value, name=""):
    """Wrap an array as a non-differentiable leaf."""
    return Tensor(value, requires_grad=False, name=name)


def _result(value, parents, name=""):
    parents = tuple((p, fn) for p, fn in parents if p.requires_grad)
    return Tensor(value, requires_grad=bool(parents), name=name, _parents=parents)


# ---------------------------------------------------------------------------
# operation set


def matmul(a, b):
    """Standard matrix product; inner dimensions must agree."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    out = a.value @ b.value
    return _result(out, [
        (a, lambda g, bv=b.value: g @ bv.T),
        (b, lambda g, av=a.value: av.T @ g),
    ])


def transpose(a):
    return _result(a.value.T, [(a, lambda g: g.T)])


def add(a, b):
    """Elementwise sum; `b` may be a single row broadcast over the rows of `a`."""
    if a.shape == b.shape:
        out = a.value + b.value
        return _result(out, [(a, lambda g: g), (b, lambda g: g)])
    if b.rows == 1 and b.cols == a.cols:
        out = a.value + b.value
        return _result(out, [
            (a, lambda g: g),
            (b, lambda g: g.sum(axis=0, keepdims=True)),
        ])
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def scale(a, factor):
    """Multiply every entry by `factor`, a python float or a 1x1 tensor."""
    if isinstance(factor, Tensor):
        if factor.shape != (1, 1):
            raise ShapeError(f"scale: tensor factor must be 1x1, got {factor.shape}")
        s = factor.value[0, 0]
        return _result(a.value * s, [
            (a, lambda g: g * s),
            (factor, lambda g, av=a.value: np.array([[float((g * av).sum())]])),
        ])
    s = float(factor)
    return _result(a.value * s, [(a, lambda g: g * s)])


def concat_rows(a, b):
    if a.cols != b.cols:
        raise ShapeError(f"concat_rows: column counts differ, {a.shape} vs {b.shape}")
    out = np.concatenate([a.value, b.value], axis=0)
    ra = a.rows
    return _result(out, [
        (a, lambda g: g[:ra]),
        (b, lambda g: g[ra:]),
    ])


def stack_rows(tensors):
    """Fold a sequence of tensors into one via repeated concat_rows."""
    tensors = list(tensors)
    if not tensors:
        raise ContractError("stack_rows: empty sequence")
    out = tensors[0]
    for t in tensors[1:]:
        out = concat_rows(out, t)
    return out


def slice_rows(a, start, stop):
    if not (0 <= start < stop <= a.rows):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {a.shape}")
    def backward(g, r=a.rows, c=a.cols, s=start, e=stop):
        full = np.zeros((r, c))
        full[s:e] = g
        return full
    return _result(a.value[start:stop].copy(), [(a, backward)])


def softmax_rows(a):
    """Row-wise softmax, shifted by the per-row max so large logits stay finite."""
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    def backward(g, y=out):
        return y * (g - (g * y).sum(axis=1, keepdims=True))
    return _result(out, [(a, backward)])


def tanh(a):
    out = np.tanh(a.value)
    return _result(out, [(a, lambda g, y=out: g * (1.0 - y * y))])


def mean_all(a):
    """Mean over all entries, as a 1x1 tensor."""
    n = a.value.size
    out = np.array([[a.value.sum() / n]])
    def backward(g, r=a.rows, c=a.cols, n=n):
        return np.full((r, c), g[0, 0] / n)
    return _result(out, [(a, backward)])


def sq_diff(a, b):
    """Elementwise squared difference (a - b)**2."""
    if a.shape != b.shape:
        raise ShapeError(f"sq_diff: shapes differ, {a.shape} vs {b.shape}")
    diff = a.value - b.value
    return _result(diff * diff, [
        (a, lambda g: 2.0 * diff * g),
        (b, lambda g: -2.0 * diff * g),
    ])


def mse(a, b):
    """Mean squared error between two same-shaped tensors, as a 1x1 tensor."""
    return mean_all(sq_diff(a, b))


def mean_rows(a):
    """Mean over rows as a 1 x cols tensor, expressed through matmul."""
    pool = constant(np.full((1, a.rows), 1.0 / a.rows))
    return matmul(pool, a)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable `requires_grad` leaf.

    `loss` must be a 1x1 node.  Intermediate gradients live only for the
    duration of the call; Parameter gradients accumulate until zeroed.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(loss): np.ones((1, 1))}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        for parent, fn in node._parents:
            contrib = fn(g)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + contrib
            else:
                grads[id(parent)] = contrib
    # non-Parameter leaves someone asked gradients for
    for node in order:
        if not node._parents and not isinstance(node, Parameter) and node.requires_grad:
            node.grad = grads.get(id(node), node.grad)


def zero_grads(params):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# deterministic randomness


GENERATOR_NAME = "philox"


def _stream_key(seed, path):
    digest = hashlib.blake2s(f"{seed}|{path}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


class Rng:
    """Seeded Philox generator addressed by (seed, stream path).

    The same (seed, path, draw sequence) produces bit-identical output on
    every platform.  Child streams are independent of the parent's draw
    position, so components can consume randomness in any order.
    """

    def __init__(self, seed, path="root"):
        self.seed = int(seed)
        self.path = path
        self._gen = np.random.Generator(np.random.Philox(key=_stream_key(self.seed, path)))

    def stream(self, label):
        return Rng(self.seed, f"{self.path}/{label}")

    def normal(self, rows, cols, std=1.0):
        return self._gen.standard_normal((rows, cols)) * std

    def unit_rows(self, rows, cols):
        """Gaussian rows normalized to unit euclidean length."""
        x = self._gen.standard_normal((rows, cols))
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    def integers(self, low, high, n):
        """`n` integers uniform over [low, high] inclusive."""
        return self._gen.integers(low, high + 1, size=n)

    def describe(self):
        return {"generator": GENERATOR_NAME, "seed": self.seed}
