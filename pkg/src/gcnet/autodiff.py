"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every operation appends its backward closure to the node it
creates, and `backward()` replays the closures in reverse topological order.
The graph is rebuilt on every forward pass, so variable-length inputs need
no special handling.
"""

from __future__ import annotations

import hashlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A tensor contains NaN or Inf, which is an error state."""


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    return data


class Tensor:
    """A node in the computation graph, wrapping a float64 ndarray (<= 2 axes)."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g


class Param(Tensor):
    """A named leaf tensor that always tracks gradients."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(value, requires_grad=True)
        self.name = name

    def zero_grad(self) -> None:
        self.grad = None


def _out(data, parents, backward, op):
    data = _check_finite(np.asarray(data, dtype=np.float64), op)
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, _parents=parents if needs else (),
                  _backward=backward if needs else None)


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ out.grad)

    return _out(out_data, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad)
        if b.requires_grad:
            b.accumulate_grad(out.grad)

    return _out(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub shape mismatch: {a.data.shape} vs {b.data.shape}")

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad)
        if b.requires_grad:
            b.accumulate_grad(-out.grad)

    return _out(a.data - b.data, (a, b), backward, "sub")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"hadamard shape mismatch: {a.data.shape} vs {b.data.shape}")

    def backward(out):
        if a.requires_grad:
            a.accumulate_grad(out.grad * b.data)
        if b.requires_grad:
            b.accumulate_grad(out.grad * a.data)

    return _out(a.data * b.data, (a, b), backward, "hadamard")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-n bias vector to every row of an L x n matrix."""
    if x.data.ndim != 2 or b.data.shape != (x.data.shape[1],):
        raise ShapeError(f"add_bias shape mismatch: {x.data.shape} vs {b.data.shape}")

    def backward(out):
        if x.requires_grad:
            x.accumulate_grad(out.grad)
        if b.requires_grad:
            b.accumulate_grad(out.grad.sum(axis=0))

    return _out(x.data + b.data, (x, b), backward, "add_bias")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(out):
        x.accumulate_grad(out.grad * c)

    return _out(x.data * c, (x,), backward, "scale")


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = x.data > 0

    def backward(out):
        x.accumulate_grad(out.grad * mask)

    return _out(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))

    def backward(out):
        x.accumulate_grad(out.grad * y * (1.0 - y))

    return _out(y, (x,), backward, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(out):
        x.accumulate_grad(out.grad * (1.0 - y * y))

    return _out(y, (x,), backward, "tanh")


def concat_last(parts) -> Tensor:
    """Concatenate L x d_k matrices along columns, argument order preserved."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_last needs at least one part")
    first_dim = parts[0].data.shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != first_dim:
            raise ShapeError(
                f"concat_last first-dimension mismatch: {p.data.shape} vs length {first_dim}")
    widths = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward(out):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(out.grad[:, lo:hi])

    return _out(np.concatenate([p.data for p in parts], axis=1),
                tuple(parts), backward, "concat_last")


def concat_rows(parts) -> Tensor:
    """Stack matrices with equal column counts along rows."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    ncol = parts[0].data.shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[1] != ncol:
            raise ShapeError(
                f"concat_rows column mismatch: {p.data.shape} vs width {ncol}")
    heights = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + heights)

    def backward(out):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(out.grad[lo:hi, :])

    return _out(np.concatenate([p.data for p in parts], axis=0),
                tuple(parts), backward, "concat_rows")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(out):
        g = np.zeros_like(x.data)
        g[start:stop, :] = out.grad
        x.accumulate_grad(g)

    return _out(x.data[start:stop, :], (x,), backward, "slice_rows")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(out):
        g = np.zeros_like(x.data)
        g[:, start:stop] = out.grad
        x.accumulate_grad(g)

    return _out(x.data[:, start:stop], (x,), backward, "slice_cols")


def softmax_rows(logits: Tensor) -> Tensor:
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(out):
        dot = (out.grad * y).sum(axis=1, keepdims=True)
        logits.accumulate_grad(y * (out.grad - dot))

    return _out(y, (logits,), backward, "softmax_rows")


def logsumexp_rows(x: Tensor) -> Tensor:
    """Row-wise log(sum(exp(x))) as an L x 1 column, stabilized by the row max."""
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=1, keepdims=True)

    def backward(out):
        x.accumulate_grad(out.grad * (e / s))

    return _out(m + np.log(s), (x,), backward, "logsumexp_rows")


def take_per_row(x: Tensor, indices) -> Tensor:
    """Pick one column per row; returns an L x 1 column."""
    idx = np.asarray(indices, dtype=np.intp)
    rows = np.arange(x.data.shape[0])

    def backward(out):
        g = np.zeros_like(x.data)
        g[rows, idx] = out.grad[:, 0]
        x.accumulate_grad(g)

    return _out(x.data[rows, idx][:, None], (x,), backward, "take_per_row")


def sum_all(x: Tensor) -> Tensor:
    def backward(out):
        x.accumulate_grad(np.full_like(x.data, float(out.grad)))

    return _out(np.asarray(x.data.sum()), (x,), backward, "sum_all")


def dropout(x: Tensor, p: float, training: bool, rng: "Rng") -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-p) so inference is identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.generator.random(x.data.shape) >= p) / (1.0 - p)

    def backward(out):
        x.accumulate_grad(out.grad * keep)

    return _out(x.data * keep, (x,), backward, "dropout")


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into .grad for every node reachable from loss."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node)


# ---------------------------------------------------------------------------
# deterministic randomness


def derive_seed(master: int, label: str) -> int:
    """Stable 64-bit sub-seed from a master seed and a text label."""
    digest = hashlib.sha256(f"{master}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Deterministic generator: identical seed gives an identical stream."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, label: str) -> "Rng":
        return Rng(derive_seed(self.seed, label))


# ---------------------------------------------------------------------------
# gradient verification


class GradCheckReport:
    """Per-parameter worst relative error between analytic and numeric gradients."""

    def __init__(self, tol):
        self.tol = tol
        self.per_param = {}   # name -> (max relative error, flat index)

    def record(self, name, err, index):
        self.per_param[name] = (err, index)

    @property
    def max_error(self):
        return max((e for e, _ in self.per_param.values()), default=0.0)

    @property
    def passed(self):
        return all(e <= self.tol for e, _ in self.per_param.values())

    def worst(self):
        name = max(self.per_param, key=lambda n: self.per_param[n][0])
        err, index = self.per_param[name]
        return name, err, index

    def lines(self):
        for name in sorted(self.per_param):
            err, index = self.per_param[name]
            status = "ok" if err <= self.tol else "FAIL"
            yield f"{status:4s} {name:24s} max_rel_err={err:.3e} at flat index {index}"


def grad_check(f, params, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare backward() gradients of the scalar f() against central differences.

    f must be deterministic (dropout off); two baseline evaluations that
    disagree are rejected before any differencing happens.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    v0 = float(f().data)
    if float(f().data) != v0:
        raise ValueError("grad_check requires a deterministic function; "
                         "two evaluations at the same point differ")
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for p in params}

    report = GradCheckReport(tol)
    for p in params:
        flat = p.data.reshape(-1)
        g_ad = analytic[p.name].reshape(-1)
        worst_err, worst_idx = 0.0, 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(g_ad[i] - g_fd) / max(1e-8, abs(g_ad[i]) + abs(g_fd))
            if err > worst_err:
                worst_err, worst_idx = err, i
        report.record(p.name, worst_err, worst_idx)
    return report
