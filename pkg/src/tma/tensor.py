"""Reverse-mode automatic differentiation over dense numpy arrays.

The graph is a lightweight tape: every operation returns a ``Tensor``
holding the forward value, its parent nodes, and a callback mapping the
output gradient to parent gradients. ``grad`` replays the tape in
reverse topological order and collects gradients for named parameters.

Training math is float64 end to end. Wrap inference-only evaluation in
``no_grad()`` to skip tape bookkeeping entirely; values are identical,
only provenance is dropped.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Mapping

import numpy as np

# Gradients for named parameters: name -> array of the parameter's shape.
GradientSet = dict[str, np.ndarray]

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Value plus provenance. ``data`` is a float64 ndarray (0-d for scalars)."""

    __slots__ = ("data", "parents", "vjp")

    def __init__(self, data, parents=(), vjp=None):
        self.data = data
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={tuple(np.shape(self.data))})"


def tensor(x) -> Tensor:
    """Wrap an array-like as a constant graph leaf (float64, row-major)."""
    return Tensor(np.ascontiguousarray(x, dtype=np.float64))


def parameter(x) -> Tensor:
    """Alias of ``tensor`` used where the leaf is meant to be trainable."""
    return tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -----------------------------------------------------------------------------
# Elementwise and affine ops
# -----------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b with numpy broadcasting."""
    val = a.data + b.data
    if not _grad_enabled:
        return Tensor(val)
    sa, sb = np.shape(a.data), np.shape(b.data)

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor(val, (a, b), vjp)


def add_n(ts: list[Tensor]) -> Tensor:
    """Left-associated sum of same-shape tensors (one graph node)."""
    val = ts[0].data
    for t in ts[1:]:
        val = val + t.data
    if not _grad_enabled:
        return Tensor(val)

    def vjp(g):
        return (g,) * len(ts)

    return Tensor(val, tuple(ts), vjp)


def cadd(a: Tensor, const: np.ndarray) -> Tensor:
    """a + const where const carries no gradient (e.g. weight noise)."""
    val = a.data + const
    if not _grad_enabled:
        return Tensor(val)
    sa = np.shape(a.data)

    def vjp(g):
        return (_unbroadcast(g, sa),)

    return Tensor(val, (a,), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a * b with broadcasting."""
    val = a.data * b.data
    if not _grad_enabled:
        return Tensor(val)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, np.shape(ad)), _unbroadcast(g * ad, np.shape(bd))

    return Tensor(val, (a, b), vjp)


def cmul(a: Tensor, const: np.ndarray) -> Tensor:
    """a * const where const carries no gradient (e.g. dropout masks)."""
    val = a.data * const
    if not _grad_enabled:
        return Tensor(val)
    sa = np.shape(a.data)

    def vjp(g):
        return (_unbroadcast(g * const, sa),)

    return Tensor(val, (a,), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    """a * s for a python scalar s."""
    val = a.data * s
    if not _grad_enabled:
        return Tensor(val)

    def vjp(g):
        return (g * s,)

    return Tensor(val, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy ``@`` semantics for 1-D/2-D operands."""
    ad, bd = a.data, b.data
    try:
        val = ad @ bd
    except ValueError as exc:
        raise ValueError(
            f"matmul dimension mismatch: {np.shape(ad)} @ {np.shape(bd)}"
        ) from exc
    if not _grad_enabled:
        return Tensor(val)

    if ad.ndim == 2 and bd.ndim == 2:

        def vjp(g):
            return g @ bd.T, ad.T @ g

    elif ad.ndim == 2 and bd.ndim == 1:

        def vjp(g):
            return g[:, None] * bd, ad.T @ g

    elif ad.ndim == 1 and bd.ndim == 2:

        def vjp(g):
            return bd @ g, ad[:, None] * g

    else:
        raise ValueError(
            f"matmul supports 1-D/2-D operands, got {ad.ndim}-D @ {bd.ndim}-D"
        )
    return Tensor(val, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    """2-D transpose."""
    val = a.data.T
    if not _grad_enabled:
        return Tensor(val)

    def vjp(g):
        return (g.T,)

    return Tensor(val, (a,), vjp)


# -----------------------------------------------------------------------------
# Nonlinearities
# -----------------------------------------------------------------------------


def tanh(a: Tensor) -> Tensor:
    val = np.tanh(a.data)
    if not _grad_enabled:
        return Tensor(val)

    def vjp(g):
        return (g * (1.0 - val * val),)

    return Tensor(val, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    # Clip at +-500 so exp cannot overflow; the sigmoid saturates to exact
    # 0.0/1.0 long before the clip changes anything.
    val = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500.0, 500.0)))
    if not _grad_enabled:
        return Tensor(val)

    def vjp(g):
        return (g * val * (1.0 - val),)

    return Tensor(val, (a,), vjp)


def _softmax_values(x: np.ndarray) -> np.ndarray:
    if x.size == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(x - x.max())
    out = e / e.sum()
    # exp underflow can produce exact zeros; keep entries strictly positive.
    return np.maximum(out, 5e-324)


def softmax(v):
    """Probability vector exp(v)/sum(exp(v)), shift-stable.

    Accepts a plain array (returns an array) or a ``Tensor`` (returns a
    graph node). Raises on empty input.
    """
    if not isinstance(v, Tensor):
        return _softmax_values(np.asarray(v, dtype=np.float64))
    val = _softmax_values(v.data)
    if not _grad_enabled:
        return Tensor(val)

    def vjp(g):
        return (val * (g - np.dot(val, g)),)

    return Tensor(val, (v,), vjp)


def log_clamped(a: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(a, floor)); derivative is zero in the clamped region."""
    clamped = np.maximum(a.data, floor)
    val = np.log(clamped)
    if not _grad_enabled:
        return Tensor(val)
    live = a.data >= floor

    def vjp(g):
        return (g * live / clamped,)

    return Tensor(val, (a,), vjp)


# -----------------------------------------------------------------------------
# Shape and indexing ops
# -----------------------------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries (scalar)."""
    val = a.data.sum()
    sa = np.shape(a.data)

    if not _grad_enabled:
        return Tensor(val)

    def vjp(g):
        return (np.broadcast_to(g, sa),)

    return Tensor(val, (a,), vjp)


def sum_squares(a: Tensor) -> Tensor:
    """Sum of squared entries (scalar), fused for weight penalties."""
    ad = a.data
    val = np.dot(ad.ravel(), ad.ravel())
    if not _grad_enabled:
        return Tensor(np.float64(val))

    def vjp(g):
        return (2.0 * g * ad,)

    return Tensor(np.float64(val), (a,), vjp)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over axis 0 of a (J, D) tensor -> (D,)."""
    n = a.data.shape[0]
    val = a.data.mean(axis=0)
    if not _grad_enabled:
        return Tensor(val)
    sa = a.data.shape

    def vjp(g):
        return (np.broadcast_to(g / n, sa),)

    return Tensor(val, (a,), vjp)


def row(a: Tensor, j: int) -> Tensor:
    """Row j of a 2-D tensor."""
    val = a.data[j]
    if not _grad_enabled:
        return Tensor(val)
    sa = a.data.shape

    def vjp(g):
        out = np.zeros(sa)
        out[j] = g
        return (out,)

    return Tensor(val, (a,), vjp)


def rows(a: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D tensor; gradient scatter-adds into them."""
    idx = np.asarray(idx, dtype=np.intp)
    val = a.data[idx]
    if not _grad_enabled:
        return Tensor(val)
    sa = a.data.shape

    def vjp(g):
        out = np.zeros(sa)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(val, (a,), vjp)


def pick(v: Tensor, i: int) -> Tensor:
    """Entry i of a vector (scalar)."""
    val = v.data[i]
    if not _grad_enabled:
        return Tensor(val)
    n = v.data.shape[0]

    def vjp(g):
        out = np.zeros(n)
        out[i] = g
        return (out,)

    return Tensor(val, (v,), vjp)


def stack_rows(vs: list[Tensor]) -> Tensor:
    """Stack (D,) vectors into a (J, D) matrix."""
    val = np.stack([v.data for v in vs])
    if not _grad_enabled:
        return Tensor(val)

    def vjp(g):
        return tuple(g[j] for j in range(len(vs)))

    return Tensor(val, tuple(vs), vjp)


def hconcat(ts: list[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along columns."""
    val = np.concatenate([t.data for t in ts], axis=1)
    if not _grad_enabled:
        return Tensor(val)
    widths = [t.data.shape[1] for t in ts]

    def vjp(g):
        outs, off = [], 0
        for w in widths:
            outs.append(g[:, off:off + w])
            off += w
        return tuple(outs)

    return Tensor(val, tuple(ts), vjp)


def reverse_rows(a: Tensor) -> Tensor:
    """Reverse a 2-D tensor along axis 0."""
    val = a.data[::-1].copy()
    if not _grad_enabled:
        return Tensor(val)

    def vjp(g):
        return (g[::-1],)

    return Tensor(val, (a,), vjp)


def segment(v: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop] of a vector."""
    val = v.data[start:stop]
    if not _grad_enabled:
        return Tensor(val)
    n = v.data.shape[0]

    def vjp(g):
        out = np.zeros(n)
        out[start:stop] = g
        return (out,)

    return Tensor(val, (v,), vjp)


def vconcat(ts: list[Tensor]) -> Tensor:
    """Concatenate tensors along axis 0 (vectors or matrices)."""
    val = np.concatenate([t.data for t in ts], axis=0)
    if not _grad_enabled:
        return Tensor(val)
    heights = [t.data.shape[0] for t in ts]

    def vjp(g):
        outs, off = [], 0
        for h in heights:
            outs.append(g[off:off + h])
            off += h
        return tuple(outs)

    return Tensor(val, tuple(ts), vjp)


# -----------------------------------------------------------------------------
# Backward pass
# -----------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the graph under ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            pid = id(p)
            if pid in seen:
                continue
            if not p.parents:  # leaves can be emitted immediately
                seen.add(pid)
                order.append(p)
            else:
                stack.append((p, False))
    return order


def grad(loss: Tensor, params: Mapping[str, Tensor]) -> GradientSet:
    """Gradient of a scalar loss for every named parameter.

    Parameters the loss does not depend on get zero gradients, so the
    returned key set always equals ``params``' key set.
    """
    if np.size(loss.data) != 1:
        raise ValueError(f"loss must be scalar, got shape {np.shape(loss.data)}")
    if not np.isfinite(loss.data):
        raise ValueError("loss is not finite")

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.float64(1.0)}
    by_id = {id(t): name for name, t in params.items()}
    out: GradientSet = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        name = by_id.get(id(node))
        if name is not None:
            out[name] = np.array(g, dtype=np.float64)
        if node.vjp is None:
            continue
        for p, pg in zip(node.parents, node.vjp(g)):
            pid = id(p)
            acc = grads.get(pid)
            grads[pid] = pg if acc is None else acc + pg
    for name, t in params.items():
        if name not in out:
            out[name] = np.zeros_like(t.data)
    return out


# -----------------------------------------------------------------------------
# Finite-difference verification
# -----------------------------------------------------------------------------


def finite_diff_errors(
    build_loss: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    max_coords: int = 10_000,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Worst relative error per parameter between tape and central differences.

    ``build_loss`` must rebuild the loss from the current parameter values
    on every call. Sweeps every coordinate when the total parameter count
    is below ``max_coords``; otherwise samples that many coordinates with
    ``rng``. Relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    if not params:
        return {}
    analytic = grad(build_loss(), params)
    total = sum(int(np.size(t.data)) for t in params.values())
    coords: list[tuple[str, int]] = []
    if total <= max_coords:
        for name, t in params.items():
            coords.extend((name, i) for i in range(int(np.size(t.data))))
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        names = list(params)
        weights = np.array([np.size(params[n].data) for n in names], dtype=np.float64)
        weights /= weights.sum()
        for _ in range(max_coords):
            name = names[rng.choice(len(names), p=weights)]
            coords.append((name, int(rng.integers(np.size(params[name].data)))))

    errors = {name: 0.0 for name in params}
    with no_grad():
        for name, i in coords:
            arr = params[name].data
            orig = arr.flat[i]
            arr.flat[i] = orig + eps
            up = float(build_loss().data)
            arr.flat[i] = orig - eps
            down = float(build_loss().data)
            arr.flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            a = float(analytic[name].flat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > errors[name]:
                errors[name] = err
    return errors


def finite_diff_max_rel_error(
    build_loss: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    max_coords: int = 10_000,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error over all checked coordinates (0.0 if no params)."""
    errs = finite_diff_errors(build_loss, params, eps, max_coords, rng)
    return max(errs.values(), default=0.0)
