"""Reverse-mode differentiation over dense float64 tensors.

A Graph is a flat tape: every primitive application appends one node, so
topological order is construction order and backward is a single sweep in
exact reverse construction order (deterministic, bit-reproducible). The
primitive set is fixed and small; each op carries its exact analytic
backward rule, which the test suite checks against central finite
differences.

No broadcasting beyond the row-wise bias add in `affine`; any other shape
mismatch raises. L2 normalization uses its closed-form Jacobian rather
than a composition of smaller ops, which avoids cancellation near unit
norm.
"""

from __future__ import annotations

import numpy as np

from .rng import Rng


class AutodiffError(ValueError):
    """Shape or usage violation in graph construction or backward."""


class Tensor:
    """Dense float64 array with an optional same-shape gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, node_id: int = -1):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keep 0-d scalars 0-d
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "inputs", "out", "backprop")

    def __init__(self, op, inputs, out, backprop):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backprop = backprop


def _shapes(*tensors):
    return " ".join(str(t.data.shape) for t in tensors)


class Graph:
    """Tape of primitive applications over Tensors."""

    def __init__(self):
        self.nodes: list[_Node] = []

    # -- construction -----------------------------------------------------

    def leaf(self, data, requires_grad: bool = False) -> Tensor:
        t = Tensor(data, requires_grad, node_id=len(self.nodes))
        self.nodes.append(_Node("leaf", (), t, None))
        return t

    def _record(self, op, inputs, out_data, backprop) -> Tensor:
        rg = any(t.requires_grad for t in inputs)
        out = Tensor(out_data, rg, node_id=len(self.nodes))
        self.nodes.append(_Node(op, inputs, out, backprop if rg else None))
        return out

    # -- primitives --------------------------------------------------------

    def affine(self, x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
        """x @ w + b with b broadcast over rows (the only broadcast allowed)."""
        if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
            raise AutodiffError(f"affine: incompatible shapes {_shapes(x, w)}")
        if b is not None and b.shape != (w.shape[1],):
            raise AutodiffError(
                f"affine: bias shape {b.shape} does not match output width {w.shape[1]}"
            )
        y = x.data @ w.data
        if b is not None:
            y = y + b.data

        def backprop(dy):
            if x.requires_grad:
                x.accumulate(dy @ w.data.T)
            if w.requires_grad:
                w.accumulate(x.data.T @ dy)
            if b is not None and b.requires_grad:
                b.accumulate(dy.sum(axis=0))

        inputs = (x, w) if b is None else (x, w, b)
        return self._record("affine", inputs, y, backprop)

    def tanh(self, x: Tensor) -> Tensor:
        y = np.tanh(x.data)

        def backprop(dy):
            if x.requires_grad:
                x.accumulate(dy * (1.0 - y * y))

        return self._record("tanh", (x,), y, backprop)

    def _elementwise(self, op, x, y, fwd, bx, by):
        if x.shape != y.shape:
            raise AutodiffError(f"{op}: shape mismatch {_shapes(x, y)}")
        out = fwd(x.data, y.data)

        def backprop(dy):
            if x.requires_grad:
                x.accumulate(bx(dy))
            if y.requires_grad:
                y.accumulate(by(dy))

        return self._record(op, (x, y), out, backprop)

    def add(self, x: Tensor, y: Tensor) -> Tensor:
        return self._elementwise("add", x, y, lambda a, b: a + b,
                                 lambda dy: dy, lambda dy: dy)

    def sub(self, x: Tensor, y: Tensor) -> Tensor:
        return self._elementwise("sub", x, y, lambda a, b: a - b,
                                 lambda dy: dy, lambda dy: -dy)

    def mul(self, x: Tensor, y: Tensor) -> Tensor:
        return self._elementwise("mul", x, y, lambda a, b: a * b,
                                 lambda dy: dy * y.data, lambda dy: dy * x.data)

    def scale(self, x: Tensor, c: float) -> Tensor:
        c = float(c)

        def backprop(dy):
            if x.requires_grad:
                x.accumulate(dy * c)

        return self._record("scale", (x,), x.data * c, backprop)

    def mean(self, x: Tensor, axis: int) -> Tensor:
        if not (0 <= axis < x.data.ndim):
            raise AutodiffError(f"mean: axis {axis} out of range for shape {x.shape}")
        n = x.shape[axis]
        y = x.data.mean(axis=axis)

        def backprop(dy):
            if x.requires_grad:
                x.accumulate(np.expand_dims(dy, axis) / n)

        return self._record("mean", (x,), y, backprop)

    def transpose(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2:
            raise AutodiffError(f"transpose: need rank 2, got shape {x.shape}")

        def backprop(dy):
            if x.requires_grad:
                x.accumulate(dy.T)

        return self._record("transpose", (x,), x.data.T, backprop)

    def normalize_rows(self, x: Tensor) -> Tensor:
        """L2-normalize each row. Rows must have norm > 1e-12."""
        if x.data.ndim != 2:
            raise AutodiffError(f"normalize_rows: need rank 2, got shape {x.shape}")
        r = np.sqrt((x.data * x.data).sum(axis=1))
        if (r <= 1e-12).any():
            bad = int(np.argmin(r))
            raise AutodiffError(f"normalize_rows: row {bad} has norm {r[bad]:.3e}")
        y = x.data / r[:, None]

        def backprop(dy):
            if x.requires_grad:
                # closed-form Jacobian: (dy - y (y . dy)) / r
                x.accumulate((dy - y * (y * dy).sum(axis=1, keepdims=True)) / r[:, None])

        return self._record("normalize_rows", (x,), y, backprop)

    def rowdot(self, a: Tensor, b: Tensor) -> Tensor:
        """Per-row dot products: (n,d),(n,d) -> (n,)."""
        if a.data.ndim != 2 or a.shape != b.shape:
            raise AutodiffError(f"rowdot: incompatible shapes {_shapes(a, b)}")
        y = (a.data * b.data).sum(axis=1)

        def backprop(dy):
            if a.requires_grad:
                a.accumulate(dy[:, None] * b.data)
            if b.requires_grad:
                b.accumulate(dy[:, None] * a.data)

        return self._record("rowdot", (a, b), y, backprop)

    def clamp01(self, x: Tensor) -> Tensor:
        """Clip to [0,1]; backward passes gradient only strictly inside."""
        y = np.clip(x.data, 0.0, 1.0)
        inside = (x.data > 0.0) & (x.data < 1.0)

        def backprop(dy):
            if x.requires_grad:
                x.accumulate(dy * inside)

        return self._record("clamp01", (x,), y, backprop)

    def softmax_xent(self, s: Tensor, targets) -> Tensor:
        """Mean over rows of softmax cross-entropy against integer targets."""
        if s.data.ndim != 2:
            raise AutodiffError(f"softmax_xent: need rank 2, got shape {s.shape}")
        t = np.asarray(targets, dtype=np.int64)
        n, m = s.shape
        if t.shape != (n,) or (t < 0).any() or (t >= m).any():
            raise AutodiffError(f"softmax_xent: bad targets for logits shape {s.shape}")
        z = s.data - s.data.max(axis=1, keepdims=True)
        ez = np.exp(z)
        p = ez / ez.sum(axis=1, keepdims=True)
        rows = np.arange(n)
        y = float(np.mean(-np.log(p[rows, t])))

        def backprop(dy):
            if s.requires_grad:
                g = p.copy()
                g[rows, t] -= 1.0
                s.accumulate(g * (float(dy) / n))

        return self._record("softmax_xent", (s,), y, backprop)

    def concat_rows(self, *xs: Tensor) -> Tensor:
        if len(xs) < 1 or any(x.data.ndim != 2 for x in xs):
            raise AutodiffError(f"concat_rows: need rank-2 inputs, got {_shapes(*xs)}")
        cols = xs[0].shape[1]
        if any(x.shape[1] != cols for x in xs):
            raise AutodiffError(f"concat_rows: column mismatch {_shapes(*xs)}")
        y = np.concatenate([x.data for x in xs], axis=0)
        offsets = np.cumsum([0] + [x.shape[0] for x in xs])

        def backprop(dy):
            for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
                if x.requires_grad:
                    x.accumulate(dy[lo:hi])

        return self._record("concat_rows", xs, y, backprop)

    # -- backward ----------------------------------------------------------

    def backward(self, seed: Tensor) -> None:
        """Fill grad slots of every requires_grad tensor reachable from seed.

        Grads accumulate additively across fan-out within one pass; calling
        backward again resets all grads first, so repeated calls are
        bit-identical.
        """
        if seed.data.shape != ():
            raise AutodiffError(f"backward: seed must be scalar, got shape {seed.shape}")
        for node in self.nodes:
            node.out.grad = None
        seed.grad = np.ones((), dtype=np.float64)
        for node in reversed(self.nodes):
            if node.backprop is not None and node.out.grad is not None:
                node.backprop(node.out.grad)


def grad_check(make_case, trials: int, eps: float = 1e-5, seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    `make_case(rng)` must return `(arrays, build)` where `arrays` is a list of
    float64 ndarrays (the differentiable leaves, mutated in place for the
    finite-difference probes) and `build(arrays)` constructs a fresh graph,
    returning `(graph, loss_tensor, leaf_tensors)` with leaves in the same
    order as `arrays`.

    The error metric is |a - n| / max(1, |a|, |n|), so near-zero gradients are
    compared absolutely.
    """
    if trials < 1:
        raise AutodiffError("grad_check: trials must be >= 1")
    if not (0.0 < eps <= 1e-3):
        raise AutodiffError("grad_check: eps must be in (0, 1e-3]")

    def loss_value(build, arrays, trial):
        _, loss, _ = build(arrays)
        v = float(loss.data)
        if not np.isfinite(v):
            raise AutodiffError(f"grad_check: non-finite loss in trial {trial}")
        return v

    worst = 0.0
    for trial in range(trials):
        rng = Rng((seed + trial) & ((1 << 64) - 1))
        arrays, build = make_case(rng)
        g, loss, leaves = build(arrays)
        if not np.isfinite(float(loss.data)):
            raise AutodiffError(f"grad_check: non-finite loss in trial {trial}")
        g.backward(loss)
        analytic = [
            leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            for leaf in leaves
        ]
        for arr, ana in zip(arrays, analytic):
            flat = arr.ravel()
            ana_flat = ana.ravel()
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + eps
                lp = loss_value(build, arrays, trial)
                flat[i] = keep - eps
                lm = loss_value(build, arrays, trial)
                flat[i] = keep
                num = (lp - lm) / (2.0 * eps)
                err = abs(ana_flat[i] - num) / max(1.0, abs(ana_flat[i]), abs(num))
                if err > worst:
                    worst = err
    return worst
