"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every trainable operation in the fusion, graph-refinement, decoder and
training modules is built from the ops in this file.  Tensors are immutable
values; calling an op on tracked inputs records the op so that a later
backward pass can replay it in reverse.  Any non-finite result raises
immediately instead of propagating NaN/Inf.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable op recording on this thread (forward values only)."""
    prev = _grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


class DimensionError(ValueError):
    """Shapes of the operands do not conform."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf."""


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} produced non-finite values")


class Tensor:
    """A row-major float64 array plus optional backward-graph bookkeeping.

    ``requires_grad`` marks a leaf whose gradient will be materialized by a
    backward pass.  Results of ops remember their parents only when at least
    one input is tracked, so untracked subgraphs cost nothing.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = ()):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents  # tuple of (Tensor, vjp) pairs

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on non-scalar shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"


def tensor(values) -> Tensor:
    return Tensor(values)


def _result(name: str, out: np.ndarray, parents: Iterable[tuple]) -> Tensor:
    _check_finite(name, out)
    if not _grad_enabled():
        return Tensor(out)
    kept = tuple((p, vjp) for p, vjp in parents if p.tracked)
    return Tensor(out, _parents=kept)


class GradTape:
    """Reverse-topological schedule plus gradient accumulators for one root.

    Visits each recorded op exactly once.  Accumulators are keyed by tensor
    identity and only ever created for tensors on a path to a tracked leaf.
    """

    def __init__(self, root: Tensor):
        if root.data.size != 1:
            raise DimensionError(
                f"backward root must be scalar, got shape {root.shape}")
        self.root = root
        self._order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self._order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                stack.append((parent, False))
        self._order.reverse()  # root first
        self.grads: dict[int, np.ndarray] = {}

    def run(self) -> None:
        """Accumulate gradients and assign .grad on requires_grad leaves."""
        self.grads[id(self.root)] = np.ones_like(self.root.data)
        for node in self._order:
            g = self.grads.get(id(node))
            if g is None:
                continue
            for parent, vjp in node._parents:
                contrib = vjp(g)
                acc = self.grads.get(id(parent))
                if acc is None:
                    self.grads[id(parent)] = contrib.copy()
                else:
                    acc += contrib
            if node.requires_grad:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g


def backward(loss: Tensor) -> None:
    """Run one reverse pass from a scalar loss, filling .grad on leaves."""
    GradTape(loss).run()


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and broadcasting ops
# ---------------------------------------------------------------------------

def _bcast_vjp(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to a broadcast operand's shape."""
    if g.shape == shape:
        return g
    if shape == () or shape == (1,) or shape == (1, 1):
        return np.sum(g).reshape(shape)
    if len(shape) == 2 and shape[0] == 1 and g.ndim == 2 and g.shape[1] == shape[1]:
        return np.sum(g, axis=0, keepdims=True)
    raise DimensionError(f"cannot reduce gradient {g.shape} to {shape}")


def _broadcast_ok(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"operand shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_ok(a, b)
    out = a.data + b.data
    return _result("add", out, [
        (a, lambda g: _bcast_vjp(g, a.shape)),
        (b, lambda g: _bcast_vjp(g, b.shape)),
    ])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_ok(a, b)
    out = a.data - b.data
    return _result("sub", out, [
        (a, lambda g: _bcast_vjp(g, a.shape)),
        (b, lambda g: -_bcast_vjp(g, b.shape)),
    ])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_ok(a, b)
    out = a.data * b.data
    return _result("mul", out, [
        (a, lambda g: _bcast_vjp(g * b.data, a.shape)),
        (b, lambda g: _bcast_vjp(g * a.data, b.shape)),
    ])


def smul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c
    return _result("smul", out, [(a, lambda g: g * c)])


def mul_mask(a: Tensor, mask: np.ndarray) -> Tensor:
    """Elementwise product with a constant mask; gradient flows only where
    the mask is nonzero (straight-through on the mask itself)."""
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != a.shape:
        raise DimensionError(f"mask shape {m.shape} != tensor shape {a.shape}")
    out = a.data * m
    return _result("mul_mask", out, [(a, lambda g: g * m)])


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0.0
    out = np.where(keep, a.data, 0.0)
    return _result("relu", out, [(a, lambda g: g * keep)])


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # exp overflow saturates to 0 correctly
        out = 1.0 / (1.0 + np.exp(-a.data))
    return _result("sigmoid", out, [(a, lambda g: g * out * (1.0 - out))])


# ---------------------------------------------------------------------------
# linear algebra and structure ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data
    return _result("matmul", out, [
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ])


def transpose(a: Tensor) -> Tensor:
    return _result("transpose", a.data.T.copy(), [(a, lambda g: g.T)])


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return _result("reshape", out.copy(), [(a, lambda g: g.reshape(old))])


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows by index (repeats allowed); also serves as embedding
    lookup and row tiling.  Gradient scatter-adds into the source rows."""
    indices = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2:
        raise DimensionError(f"gather_rows needs a 2-D tensor, got {a.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[0]):
        raise DimensionError(
            f"row index out of range for {a.shape[0]} rows")
    out = a.data[indices]

    def vjp(g: np.ndarray) -> np.ndarray:
        acc = np.zeros_like(a.data)
        np.add.at(acc, indices, g)
        return acc

    return _result("gather_rows", out, [(a, vjp)])


def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= j0 < j1 <= a.shape[1]):
        raise DimensionError(
            f"bad column slice [{j0}:{j1}] for shape {a.shape}")

    def vjp(g: np.ndarray) -> np.ndarray:
        acc = np.zeros_like(a.data)
        acc[:, j0:j1] = g
        return acc

    return _result("slice_cols", a.data[:, j0:j1].copy(), [(a, vjp)])


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_cols of zero tensors")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise DimensionError(
                f"concat_cols row mismatch: {[p.shape for p in parts]}")
    out = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def make_vjp(k: int) -> Callable[[np.ndarray], np.ndarray]:
        return lambda g: g[:, offsets[k]:offsets[k + 1]]

    return _result("concat_cols", out,
                   [(p, make_vjp(k)) for k, p in enumerate(parts)])


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(np.sum(a.data))
    return _result("sum_all", out, [(a, lambda g: np.full_like(a.data, float(g)))])


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(np.mean(a.data))
    return _result("mean_all", out,
                   [(a, lambda g: np.full_like(a.data, float(g) / n))])


def pick_cols(a: Tensor, cols) -> Tensor:
    """Entry (i, cols[i]) of each row, as an (m, 1) column."""
    indices = np.asarray(cols, dtype=np.intp)
    if a.data.ndim != 2 or indices.shape != (a.shape[0],):
        raise DimensionError(
            f"pick_cols needs one column index per row of {a.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[1]):
        raise DimensionError(f"column index out of range for {a.shape[1]} cols")
    rows = np.arange(a.shape[0])
    out = a.data[rows, indices].reshape(-1, 1)

    def vjp(g: np.ndarray) -> np.ndarray:
        acc = np.zeros_like(a.data)
        acc[rows, indices] = g.reshape(-1)
        return acc

    return _result("pick_cols", out, [(a, vjp)])


# ---------------------------------------------------------------------------
# softmax family and layer norm
# ---------------------------------------------------------------------------

def _softmax_raw(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def softmax_rows(x: Tensor, scale: float = 1.0) -> Tensor:
    """Row-wise softmax of scale*x, computed with max subtraction."""
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"softmax_rows needs m x n with n >= 1, got {x.shape}")
    scale = float(scale)
    y = _softmax_raw(x.data * scale)

    def vjp(g: np.ndarray) -> np.ndarray:
        dot = np.sum(g * y, axis=1, keepdims=True)
        return scale * y * (g - dot)

    return _result("softmax_rows", y, [(x, vjp)])


def masked_softmax_rows(x: Tensor, allow: np.ndarray, scale: float = 1.0) -> Tensor:
    """Row-wise softmax over allowed entries; blocked entries are exactly 0.

    Every row must allow at least one entry.
    """
    if x.data.ndim != 2:
        raise DimensionError(f"masked_softmax_rows needs 2-D input, got {x.shape}")
    mask = np.asarray(allow, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"mask shape {mask.shape} != input shape {x.shape}")
    if not mask.any(axis=1).all():
        raise DimensionError("masked_softmax_rows: some row blocks everything")
    scale = float(scale)
    z = np.where(mask, x.data * scale, -np.inf)
    shifted = z - np.max(z, axis=1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    y = e / np.sum(e, axis=1, keepdims=True)

    def vjp(g: np.ndarray) -> np.ndarray:
        dot = np.sum(g * y, axis=1, keepdims=True)
        return scale * y * (g - dot)

    return _result("masked_softmax_rows", y, [(x, vjp)])


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"log_softmax_rows needs m x n, got {x.shape}")
    with np.errstate(invalid="ignore"):
        shifted = x.data - np.max(x.data, axis=1, keepdims=True)
        lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
        out = shifted - lse
    soft = np.exp(out)

    def vjp(g: np.ndarray) -> np.ndarray:
        return g - soft * np.sum(g, axis=1, keepdims=True)

    return _result("log_softmax_rows", out, [(x, vjp)])


def picked_log_softmax_rows(x: Tensor, allow: np.ndarray, cols) -> Tensor:
    """Log-probability of one allowed column per row under the softmax
    restricted to allowed entries.  Returns an (m, 1) column."""
    if x.data.ndim != 2:
        raise DimensionError(f"picked_log_softmax_rows needs 2-D input, got {x.shape}")
    mask = np.asarray(allow, dtype=bool)
    indices = np.asarray(cols, dtype=np.intp)
    if mask.shape != x.shape:
        raise DimensionError(f"mask shape {mask.shape} != input shape {x.shape}")
    if indices.shape != (x.shape[0],):
        raise DimensionError("need exactly one picked column per row")
    rows = np.arange(x.shape[0])
    if not mask[rows, indices].all():
        raise DimensionError("picked columns must be allowed by the mask")
    z = np.where(mask, x.data, -np.inf)
    top = np.max(z, axis=1, keepdims=True)
    e = np.where(mask, np.exp(z - top), 0.0)
    denom = np.sum(e, axis=1, keepdims=True)
    soft = e / denom
    lse = np.log(denom) + top
    out = (x.data[rows, indices] - lse.reshape(-1)).reshape(-1, 1)

    def vjp(g: np.ndarray) -> np.ndarray:
        acc = -soft * g
        acc[rows, indices] += g.reshape(-1)
        return acc

    return _result("picked_log_softmax_rows", out, [(x, vjp)])


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor,
                    eps: float = 1e-5) -> Tensor:
    """Per-row normalization followed by a learned affine map."""
    if x.data.ndim != 2:
        raise DimensionError(f"layer_norm_rows needs 2-D input, got {x.shape}")
    d = x.shape[1]
    if gain.shape != (1, d) or bias.shape != (1, d):
        raise DimensionError(
            f"layer norm affine shapes {gain.shape}/{bias.shape} != (1, {d})")
    mu = np.mean(x.data, axis=1, keepdims=True)
    var = np.mean((x.data - mu) ** 2, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def vjp_x(g: np.ndarray) -> np.ndarray:
        gh = g * gain.data
        term = gh - np.mean(gh, axis=1, keepdims=True) \
            - xhat * np.mean(gh * xhat, axis=1, keepdims=True)
        return term * inv

    return _result("layer_norm_rows", out, [
        (x, vjp_x),
        (gain, lambda g: np.sum(g * xhat, axis=0, keepdims=True)),
        (bias, lambda g: np.sum(g, axis=0, keepdims=True)),
    ])


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[list[Tensor]], Tensor], params: Sequence[Tensor],
               eps: float = 1e-6) -> float:
    """Max relative disagreement between reverse-mode and central differences.

    ``f`` receives a list of tensors and must return a scalar Tensor.  The
    relative error uses a unit floor: |ad - fd| / max(1, |ad|, |fd|), so near-
    zero gradients are compared absolutely.
    """
    tracked = [Tensor(p.data.copy(), requires_grad=True) for p in params]
    return grad_check_inplace(lambda: f(tracked), tracked, eps)


def grad_check_inplace(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                       eps: float = 1e-6) -> float:
    """grad_check for live parameter tensors referenced by a closure.

    The reverse pass runs once on the real graph; the central-difference pass
    perturbs each parameter's storage in place with recording disabled.
    """
    if not (1e-8 <= eps <= 1e-4):
        raise ValueError(f"eps {eps} outside [1e-8, 1e-4]")
    saved_flags = [p.requires_grad for p in params]
    saved_grads = [p.grad for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    out = loss_fn()
    if out.data.size != 1:
        raise DimensionError(f"grad_check target must be scalar, got {out.shape}")
    _check_finite("grad_check objective", out.data)
    backward(out)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    worst = 0.0
    with no_grad():
        for pi, p in enumerate(params):
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            ad_flat = analytic[pi].reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                fp = loss_fn().item()
                flat[j] = orig - eps
                fm = loss_fn().item()
                flat[j] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError("grad_check objective went non-finite")
                fd = (fp - fm) / (2.0 * eps)
                rel = abs(ad_flat[j] - fd) / max(1.0, abs(ad_flat[j]), abs(fd))
                worst = max(worst, rel)
    for p, flag, grad in zip(params, saved_flags, saved_grads):
        p.requires_grad = flag
        p.grad = grad
    return worst
