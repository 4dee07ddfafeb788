"""Reverse-mode autodiff on dense float64 arrays.

Every operation builds a node that remembers its parents and how to push an
adjoint back to them; ``Tensor.backward`` walks the recorded graph in reverse
topological order. The op set is deliberately small: affine maps, ReLU,
row softmax, NLL, gather/concat/pooling and a few scalar reductions are all
the networks in this package need. Values are float64 throughout; gradient
checks at 1e-4 relative tolerance are not reliable in 32-bit.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "add_bias",
    "relu",
    "log",
    "gather_rows",
    "column",
    "concat_cols",
    "concat_rows",
    "stack_rows",
    "stack_cols",
    "broadcast_row",
    "scale_rows",
    "group_max_pool",
    "block_max_pool",
    "max_rows",
    "row_max",
    "mean_rows",
    "l2_normalize",
    "softmax_rows",
    "nll_loss",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "reduce_min",
    "counters",
    "reset_counters",
    "dump_tensor",
    "load_tensor_dump",
]

# Event counters for rare numeric paths; tests read these to confirm the
# paths stay rare. Keyed by short event names.
counters: dict[str, int] = {}


def reset_counters() -> None:
    counters.clear()


def _bump(key: str) -> None:
    counters[key] = counters.get(key, 0) + 1


class Tensor:
    """A dense float64 array plus an optional gradient accumulator.

    Tensors are immutable once produced by an operation: ops return fresh
    nodes and never write into their inputs. ``grad`` is populated only by
    ``backward`` and consumed (then cleared) by the optimizer.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data: np.ndarray | float | Sequence,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[], None] | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # Aliasing the incoming array is fine: gradients are only ever
        # reassigned (never mutated in place), so shared buffers stay intact.
        if self.grad is None:
            self.grad = np.asarray(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Reverse-accumulate gradients of this scalar into every parameter."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        if not np.isfinite(self.data):
            raise FloatingPointError("backward() on a non-finite value")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


def parameter(x, requires_grad: bool = True) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=requires_grad)


def _node(data: np.ndarray, parents: Iterable[Tensor]) -> Tensor:
    parents = tuple(parents)
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents if req else ())


def _check_finite(arr: np.ndarray, who: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{who}: non-finite input")


# ---------------------------------------------------------------------------
# elementwise / affine


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _node(a.data + b.data, (a, b))

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    out._backward = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _node(a.data - b.data, (a, b))

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _node(a.data * b.data, (a, b))

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = backward
    return out


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    out = _node(a.data * c, (a,))

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * c)

    out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}"
        )
    out = _node(a.data @ b.data, (a, b))

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out._backward = backward
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast bias: (n, d) + (d,)."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.shape[-1] != b.data.shape[0]:
        raise ValueError(f"add_bias: width {x.data.shape[-1]} vs bias {b.data.shape[0]}")
    out = _node(x.data + b.data, (x, b))

    def backward():
        g = out.grad
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0) if g.ndim == 2 else g)

    out._backward = backward
    return out


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _node(np.maximum(x.data, 0.0), (x,))

    def backward():
        if x.requires_grad:
            x._accumulate(out.grad * (x.data > 0.0))

    out._backward = backward
    return out


def log(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log with a floor inside, so probabilities can hit zero safely."""
    x = as_tensor(x)
    clamped = np.maximum(x.data, floor)
    out = _node(np.log(clamped), (x,))

    def backward():
        if x.requires_grad:
            x._accumulate(out.grad * (x.data > floor) / clamped)

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# gather / reshape / concat


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = _node(x.data[idx], (x,))

    def backward():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            np.add.at(g, idx, out.grad)
            x._accumulate(g)

    out._backward = backward
    return out


def column(x: Tensor, j: int) -> Tensor:
    """Column j of a matrix, as a 1-D tensor."""
    x = as_tensor(x)
    out = _node(x.data[:, j].copy(), (x,))

    def backward():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[:, j] = out.grad
            x._accumulate(g)

    out._backward = backward
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Column-concatenate matrices and/or 1-D vectors (treated as columns)."""
    parts = [as_tensor(p) for p in parts]
    blocks = [p.data if p.data.ndim == 2 else p.data[:, None] for p in parts]
    widths = [b.shape[1] for b in blocks]
    out = _node(np.concatenate(blocks, axis=1), parts)

    def backward():
        g = out.grad
        off = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                piece = g[:, off : off + w]
                p._accumulate(piece if p.data.ndim == 2 else piece[:, 0])
            off += w

    out._backward = backward
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    heights = [p.data.shape[0] for p in parts]
    out = _node(np.concatenate([p.data for p in parts], axis=0), parts)

    def backward():
        g = out.grad
        off = 0
        for p, h in zip(parts, heights):
            if p.requires_grad:
                p._accumulate(g[off : off + h])
            off += h

    out._backward = backward
    return out


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D vectors into a matrix, one per row."""
    vectors = [as_tensor(v) for v in vectors]
    out = _node(np.stack([v.data for v in vectors], axis=0), vectors)

    def backward():
        g = out.grad
        for i, v in enumerate(vectors):
            if v.requires_grad:
                v._accumulate(g[i])

    out._backward = backward
    return out


def stack_cols(vectors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D vectors into a matrix, one per column."""
    vectors = [as_tensor(v) for v in vectors]
    out = _node(np.stack([v.data for v in vectors], axis=1), vectors)

    def backward():
        g = out.grad
        for i, v in enumerate(vectors):
            if v.requires_grad:
                v._accumulate(g[:, i])

    out._backward = backward
    return out


def broadcast_row(v: Tensor, n: int) -> Tensor:
    """Tile a 1-D vector into n identical rows."""
    v = as_tensor(v)
    out = _node(np.tile(v.data, (n, 1)), (v,))

    def backward():
        if v.requires_grad:
            v._accumulate(out.grad.sum(axis=0))

    out._backward = backward
    return out


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row q of x by scalar weight w[q]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.shape[0] != w.data.shape[0] or w.data.ndim != 1:
        raise ValueError("scale_rows: weight must be 1-D with one entry per row")
    out = _node(x.data * w.data[:, None], (x, w))

    def backward():
        g = out.grad
        if x.requires_grad:
            x._accumulate(g * w.data[:, None])
        if w.requires_grad:
            w._accumulate((g * x.data).sum(axis=1))

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# pooling / reductions


def group_max_pool(x: Tensor, groups: np.ndarray) -> Tensor:
    """Max-pool rows of x over index groups.

    groups is (n, c) integer row indices into x; output row i is the
    componentwise max of x over groups[i]. Backward routes each output
    component to one achieving input row (first argmax), a valid subgradient.
    """
    x = as_tensor(x)
    groups = np.asarray(groups, dtype=np.intp)
    n, c = groups.shape
    d = x.data.shape[1]
    gathered = x.data[groups.reshape(-1)].reshape(n, c, d)
    arg = gathered.argmax(axis=1)  # (n, d)
    out = _node(np.take_along_axis(gathered, arg[:, None, :], axis=1)[:, 0, :], (x,))

    def backward():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            rows = np.take_along_axis(groups, arg, axis=1)  # (n, d) source row ids
            cols = np.broadcast_to(np.arange(d), (n, d))
            np.add.at(g, (rows.reshape(-1), cols.reshape(-1)), out.grad.reshape(-1))
            x._accumulate(g)

    out._backward = backward
    return out


def block_max_pool(x: Tensor, block: int) -> Tensor:
    """Max-pool consecutive row blocks: (m*block, d) -> (m, d).

    Equivalent to group_max_pool with groups = arange(m*block).reshape(m,
    block) but skips the identity gather; this is the encoders' hot path.
    """
    x = as_tensor(x)
    total, d = x.data.shape
    if block < 1 or total % block:
        raise ValueError(f"block_max_pool: {total} rows not divisible by {block}")
    m = total // block
    cube = x.data.reshape(m, block, d)
    arg = cube.argmax(axis=1)  # (m, d)
    rows = np.arange(m)
    out = _node(cube[rows[:, None], arg, np.arange(d)[None, :]], (x,))

    def backward():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            abs_rows = arg + (rows * block)[:, None]
            cols = np.broadcast_to(np.arange(d), (m, d))
            # (row, col) pairs are unique: blocks are disjoint and columns
            # distinct within a block, so plain assignment accumulates fully
            g[abs_rows.reshape(-1), cols.reshape(-1)] = out.grad.reshape(-1)
            x._accumulate(g)

    out._backward = backward
    return out


def max_rows(x: Tensor) -> Tensor:
    """Componentwise max over all rows: (n, d) -> (d,)."""
    x = as_tensor(x)
    arg = x.data.argmax(axis=0)
    out = _node(x.data[arg, np.arange(x.data.shape[1])], (x,))

    def backward():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[arg, np.arange(x.data.shape[1])] = out.grad
            x._accumulate(g)

    out._backward = backward
    return out


def row_max(x: Tensor) -> Tensor:
    """Per-row max: (n, k) -> (n,)."""
    x = as_tensor(x)
    arg = x.data.argmax(axis=1)
    n = x.data.shape[0]
    out = _node(x.data[np.arange(n), arg], (x,))

    def backward():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[np.arange(n), arg] = out.grad
            x._accumulate(g)

    out._backward = backward
    return out


def mean_rows(x: Tensor, idx: np.ndarray | None = None) -> Tensor:
    """Mean over (a subset of) rows: (n, d) -> (d,)."""
    x = as_tensor(x)
    if idx is None:
        sel = x.data
        count = x.data.shape[0]
    else:
        idx = np.asarray(idx, dtype=np.intp)
        sel = x.data[idx]
        count = len(idx)
    if count == 0:
        raise ValueError("mean_rows: empty selection")
    out = _node(sel.mean(axis=0), (x,))

    def backward():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            if idx is None:
                g += out.grad / count
            else:
                np.add.at(g, idx, np.tile(out.grad / count, (count, 1)))
            x._accumulate(g)

    out._backward = backward
    return out


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """v / ||v|| for a 1-D vector."""
    v = as_tensor(v)
    norm = float(np.linalg.norm(v.data))
    if norm < eps:
        raise ValueError("l2_normalize: zero vector")
    out = _node(v.data / norm, (v,))

    def backward():
        if v.requires_grad:
            g = out.grad
            v._accumulate(g / norm - v.data * (g @ v.data) / norm**3)

    out._backward = backward
    return out


def reduce_sum(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _node(np.asarray(x.data.sum()), (x,))

    def backward():
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, float(out.grad)))

    out._backward = backward
    return out


def reduce_mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _node(np.asarray(x.data.mean()), (x,))

    def backward():
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, float(out.grad) / x.data.size))

    out._backward = backward
    return out


def _reduce_extreme(xs: Sequence[Tensor], pick) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ValueError("empty reduction")
    vals = [float(x.data) for x in xs]
    k = pick(range(len(vals)), key=vals.__getitem__)
    out = _node(np.asarray(vals[k]), tuple(xs))

    def backward():
        if xs[k].requires_grad:
            xs[k]._accumulate(np.asarray(float(out.grad)))

    out._backward = backward
    return out


def reduce_max(xs: Sequence[Tensor]) -> Tensor:
    """Max over scalar tensors; subgradient flows to one achieving argument."""
    return _reduce_extreme(xs, max)


def reduce_min(xs: Sequence[Tensor]) -> Tensor:
    """Min over scalar tensors; subgradient flows to one achieving argument."""
    return _reduce_extreme(xs, min)


# ---------------------------------------------------------------------------
# softmax / NLL


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by row-max subtraction."""
    x = as_tensor(x)
    _check_finite(x.data, "softmax_rows")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out = _node(p, (x,))

    def backward():
        if x.requires_grad:
            g = out.grad
            dot = (g * p).sum(axis=1, keepdims=True)
            x._accumulate(p * (g - dot))

    out._backward = backward
    return out


def nll_loss(probabilities: Tensor, targets: np.ndarray, floor: float = 1e-12) -> Tensor:
    """Mean negative log-likelihood of per-row target classes.

    Rows of ``probabilities`` must already sum to 1 (softmax output); the log
    is floored at 1e-12 so confidently wrong rows stay finite.
    """
    p = as_tensor(probabilities)
    targets = np.asarray(targets, dtype=np.intp)
    n, k = p.data.shape
    if targets.shape != (n,):
        raise ValueError(f"nll_loss: expected {n} targets, got {targets.shape}")
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError("nll_loss: target index out of range")
    picked = p.data[np.arange(n), targets]
    clamped = np.maximum(picked, floor)
    out = _node(np.asarray(-np.log(clamped).mean()), (p,))

    def backward():
        if p.requires_grad:
            g = np.zeros_like(p.data)
            live = picked > floor
            g[np.arange(n), targets] = np.where(live, -1.0 / clamped, 0.0) / n
            p._accumulate(g * float(out.grad))

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# debug dump

def dump_tensor(t: Tensor) -> str:
    """Plain-text dump (shape line, then values) for test fixtures."""
    flat = " ".join(repr(float(v)) for v in t.data.reshape(-1))
    shape = " ".join(str(s) for s in t.data.shape)
    return f"shape {shape}\n{flat}\n"


def load_tensor_dump(text: str) -> Tensor:
    lines = text.strip().splitlines()
    shape = tuple(int(s) for s in lines[0].split()[1:])
    vals = np.array([float(v) for v in lines[1].split()] if len(lines) > 1 else [])
    return Tensor(vals.reshape(shape))
