"""Tape-based reverse-mode differentiation over float64 numpy arrays.

A :class:`Graph` records every operation as a node holding its cached
forward value and a vector-Jacobian product.  :class:`Var` is a thin handle
(graph, node id) with operator overloading so losses read like numpy code::

    g = Graph()
    x = g.leaf(np.array([1.0, 2.0, 3.0]))
    loss = (x * x).sum()
    g.backward(loss)
    g.grad(x)          # -> [2., 4., 6.]

Parameters are bound with :meth:`Graph.param`; their gradients are added
into a caller-owned buffer when :meth:`Graph.backward` runs.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class GraphError(ValueError):
    """Raised for malformed operations (shape mismatch, bad backward call)."""


class NonFiniteError(GraphError):
    """Raised when a NaN or Inf value would enter the graph."""


def as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite entries in array of shape {arr.shape}")
    return arr


def _suffix_compatible(big: tuple, small: tuple) -> bool:
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    ones = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if ones:
        grad = grad.sum(axis=ones, keepdims=True)
    return grad


class Var:
    __slots__ = ("graph", "id")
    __array_priority__ = 100.0

    def __init__(self, graph: "Graph", node_id: int):
        self.graph = graph
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.graph.values[self.id]

    @property
    def shape(self) -> tuple:
        return self.graph.values[self.id].shape

    def __repr__(self):
        return f"Var(id={self.id}, kind={self.graph.kinds[self.id]!r}, shape={self.shape})"

    def __add__(self, other):
        return self.graph.add(self, other)

    def __radd__(self, other):
        return self.graph.add(other, self)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __rsub__(self, other):
        return self.graph.sub(other, self)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    def __rmul__(self, other):
        return self.graph.mul(other, self)

    def __truediv__(self, other):
        return self.graph.div(self, other)

    def __rtruediv__(self, other):
        return self.graph.div(other, self)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __neg__(self):
        return self.graph.mul(self, -1.0)

    def __getitem__(self, index):
        return self.graph.slice(self, index)

    def sum(self, axis=None):
        return self.graph.sum(self, axis)

    def mean(self, axis=None):
        return self.graph.mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.graph.reshape(self, shape)

    def transpose(self, *axes):
        return self.graph.transpose(self, axes or None)


class Graph:
    """Append-only record of operations; inputs of node ``i`` always have ids < ``i``."""

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.kinds: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[Callable | None] = []
        self.needs_grad: list[bool] = []
        self.grads: list[np.ndarray | None] | None = None
        self._sinks: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.values)

    # -- node construction -------------------------------------------------

    # large intermediates are not scanned; a NaN in them reaches the next
    # reduction or fused op, which is
    _UNSCANNED = frozenset({"add", "sub", "mul", "div", "minimum", "relu", "abs", "square", "sqrt",
                            "sigmoid", "softplus", "smooth_l1", "reshape", "transpose", "broadcast",
                            "concat", "slice", "upsample", "stop_gradient", "matmul", "conv1d"})

    def _push(self, kind, value, parents=(), vjp=None, needs_grad=None, check=None) -> Var:
        if check is None:
            check = kind not in self._UNSCANNED
        if check and not np.isfinite(value).all():
            raise NonFiniteError(f"{kind}: produced non-finite output of shape {value.shape}")
        if needs_grad is None:
            needs_grad = any(self.needs_grad[p] for p in parents)
        self.values.append(value)
        self.kinds.append(kind)
        self.parents.append(tuple(parents))
        self.vjps.append(vjp if needs_grad else None)
        self.needs_grad.append(needs_grad)
        return Var(self, len(self.values) - 1)

    def _wrap(self, x) -> Var:
        if isinstance(x, Var):
            if x.graph is not self:
                raise GraphError("Var belongs to a different graph")
            return x
        return self.constant(x)

    def leaf(self, value) -> Var:
        """Differentiable input whose gradient is read back with :meth:`grad`."""
        return self._push("leaf", as_array(value).copy(), needs_grad=True)

    def constant(self, value) -> Var:
        return self._push("const", as_array(value), needs_grad=False)

    def param(self, data: np.ndarray, grad_sink: np.ndarray) -> Var:
        """Bind a parameter array; ``grad_sink`` (same shape) receives += gradient."""
        if data.shape != grad_sink.shape:
            raise GraphError(f"param: data {data.shape} vs sink {grad_sink.shape}")
        # parameter buffers are validated when loaded or updated, not per graph
        v = self._push("param", data, needs_grad=True, check=False)
        self._sinks[v.id] = grad_sink
        return v

    def custom(self, kind: str, inputs: Sequence, value: np.ndarray,
               vjp: Callable[[np.ndarray], Sequence]) -> Var:
        """Fused op with a hand-written vector-Jacobian product.

        ``vjp(g)`` must return one gradient (or None) per input.
        """
        ins = [self._wrap(x) for x in inputs]
        return self._push(kind, np.asarray(value, dtype=np.float64), [v.id for v in ins], vjp)

    # -- elementwise -------------------------------------------------------

    def _binary(self, kind, a, b, fwd, da, db):
        a, b = self._wrap(a), self._wrap(b)
        av, bv = a.value, b.value
        try:
            np.broadcast_shapes(av.shape, bv.shape)
        except ValueError:
            raise GraphError(f"{kind}: incompatible shapes {av.shape} and {bv.shape}") from None
        out = fwd(av, bv)
        need_a, need_b = self.needs_grad[a.id], self.needs_grad[b.id]

        def vjp(g):
            return (_unbroadcast(da(g, av, bv, out), av.shape) if need_a else None,
                    _unbroadcast(db(g, av, bv, out), bv.shape) if need_b else None)
        return self._push(kind, out, (a.id, b.id), vjp)

    def add(self, a, b) -> Var:
        return self._binary("add", a, b, np.add,
                            lambda g, x, y, o: g, lambda g, x, y, o: g)

    def sub(self, a, b) -> Var:
        return self._binary("sub", a, b, np.subtract,
                            lambda g, x, y, o: g, lambda g, x, y, o: -g)

    def mul(self, a, b) -> Var:
        return self._binary("mul", a, b, np.multiply,
                            lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)

    def div(self, a, b) -> Var:
        b_val = self._wrap(b).value
        if np.any(b_val == 0.0):
            raise GraphError("div: zero in denominator")
        return self._binary("div", a, b, np.divide,
                            lambda g, x, y, o: g / y, lambda g, x, y, o: -g * o / y)

    def minimum(self, a, b) -> Var:
        """Elementwise min; ties select ``a``."""
        return self._binary("minimum", a, b, np.minimum,
                            lambda g, x, y, o: g * (x <= y), lambda g, x, y, o: g * (x > y))

    def _unary(self, kind, x, fwd, dfn):
        x = self._wrap(x)
        xv = x.value
        out = fwd(xv)
        return self._push(kind, out, (x.id,), lambda g: (dfn(g, xv, out),))

    def relu(self, x) -> Var:
        # subgradient at 0 is 0
        return self._unary("relu", x, lambda v: np.maximum(v, 0.0), lambda g, v, o: g * (v > 0))

    def abs(self, x) -> Var:
        return self._unary("abs", x, np.abs, lambda g, v, o: g * np.sign(v))

    def square(self, x) -> Var:
        return self._unary("square", x, np.square, lambda g, v, o: 2.0 * g * v)

    def sqrt(self, x) -> Var:
        x = self._wrap(x)
        if np.any(x.value <= 0.0):
            raise GraphError("sqrt: non-positive input (gradient undefined)")
        return self._unary("sqrt", x, np.sqrt, lambda g, v, o: 0.5 * g / o)

    def sigmoid(self, x) -> Var:
        def fwd(v):
            return 0.5 * (1.0 + np.tanh(0.5 * v))
        return self._unary("sigmoid", x, fwd, lambda g, v, o: g * o * (1.0 - o))

    def softplus(self, x) -> Var:
        def fwd(v):
            return np.logaddexp(0.0, v)
        return self._unary("softplus", x, fwd, lambda g, v, o: g * 0.5 * (1.0 + np.tanh(0.5 * v)))

    def smooth_l1(self, x, beta: float = 1.0) -> Var:
        """Elementwise Huber-style penalty: 0.5 x^2 / beta inside |x| < beta, |x| - beta/2 outside."""
        def fwd(v):
            a = np.abs(v)
            c = np.minimum(a, beta)
            return c * (a - 0.5 * c) / beta

        def dfn(g, v, o):
            return g * np.clip(v / beta, -1.0, 1.0)
        return self._unary("smooth_l1", x, fwd, dfn)

    def stop_gradient(self, x) -> Var:
        x = self._wrap(x)
        return self._push("stop_gradient", x.value, (x.id,), None, needs_grad=False)

    # -- reductions and shape ops -----------------------------------------

    def sum(self, x, axis=None) -> Var:
        x = self._wrap(x)
        shape = x.shape
        out = np.asarray(x.value.sum(axis=axis))

        def vjp(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        return self._push("sum", out, (x.id,), vjp)

    def mean(self, x, axis=None) -> Var:
        x = self._wrap(x)
        shape = x.shape
        out = np.asarray(x.value.mean(axis=axis))
        n = x.value.size / max(out.size, 1)

        def vjp(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / n, shape).copy(),)
        return self._push("mean", out, (x.id,), vjp)

    def reshape(self, x, shape) -> Var:
        x = self._wrap(x)
        old = x.shape
        try:
            out = x.value.reshape(shape)
        except ValueError as exc:
            raise GraphError(f"reshape: cannot reshape {old} to {shape}") from exc
        return self._push("reshape", out, (x.id,), lambda g: (g.reshape(old),))

    def transpose(self, x, axes=None) -> Var:
        x = self._wrap(x)
        out = np.transpose(x.value, axes)
        inv = None if axes is None else np.argsort(axes)
        return self._push("transpose", out, (x.id,), lambda g: (np.transpose(g, inv),))

    def broadcast(self, x, shape) -> Var:
        """Expand leading dimensions only."""
        x = self._wrap(x)
        shape = tuple(shape)
        if not _suffix_compatible(shape, x.shape):
            raise GraphError(f"broadcast: {x.shape} is not a suffix of {shape}")
        out = np.broadcast_to(x.value, shape).copy()
        old = x.shape
        return self._push("broadcast", out, (x.id,), lambda g: (_unbroadcast(g, old),))

    def concat(self, xs: Sequence, axis: int = 0) -> Var:
        xs = [self._wrap(x) for x in xs]
        try:
            out = np.concatenate([x.value for x in xs], axis=axis)
        except ValueError as exc:
            raise GraphError(f"concat: shapes {[x.shape for x in xs]} on axis {axis}") from exc
        bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

        def vjp(g):
            return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                         for i in range(len(xs)))
        return self._push("concat", out, [x.id for x in xs], vjp)

    def slice(self, x, index) -> Var:
        x = self._wrap(x)
        shape = x.shape
        out = np.array(x.value[index], dtype=np.float64)

        def vjp(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)
        return self._push("slice", out, (x.id,), vjp)

    def upsample_nearest(self, x, factor: int = 2, axis: int = -1) -> Var:
        """Repeat every element along ``axis`` ``factor`` times."""
        x = self._wrap(x)
        axis = axis % x.value.ndim
        out = np.repeat(x.value, factor, axis=axis)
        shape = x.shape
        split = shape[:axis + 1] + (factor,) + shape[axis + 1:]

        def vjp(g):
            return (g.reshape(split).sum(axis=axis + 1),)
        return self._push("upsample", out, (x.id,), vjp)

    # -- linear algebra ----------------------------------------------------

    def matmul(self, a, b) -> Var:
        a, b = self._wrap(a), self._wrap(b)
        av, bv = a.value, b.value
        if av.ndim < 1 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
            raise GraphError(f"matmul: inner dimensions differ, {av.shape} @ {bv.shape}")
        if bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
            raise GraphError(f"matmul: batch dimensions differ, {av.shape} @ {bv.shape}")
        out = av @ bv
        need_a, need_b = self.needs_grad[a.id], self.needs_grad[b.id]

        def vjp(g):
            ga = g @ np.swapaxes(bv, -1, -2) if need_a else None
            if not need_b:
                gb = None
            elif bv.ndim == 2:
                a2 = av.reshape(-1, av.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(av, -1, -2) @ g
            return ga, gb
        return self._push("matmul", out, (a.id, b.id), vjp)

    def conv1d(self, x, w, b=None, stride: int = 1, padding: int = 0, time_major: bool = False) -> Var:
        """Cross-correlation over time.

        x: (batch, c_in, time) or (c_in, time); w: (c_out, c_in, kernel); b: (c_out,).
        With ``time_major`` the input and output are (batch, time, channels) instead.
        Grouped form (time-major only): x (groups, batch, time, c_in) with
        w (groups, c_out, c_in, kernel) and b (groups, c_out); each group has its own kernel.
        Output length is ``(time + 2*padding - kernel) // stride + 1``.
        """
        x, w = self._wrap(x), self._wrap(w)
        ins = [x, w] + ([self._wrap(b)] if b is not None else [])
        xv, wv = x.value, w.value
        grouped = wv.ndim == 4
        squeeze = xv.ndim == 2
        if grouped:
            if not time_major or xv.ndim != 4 or xv.shape[0] != wv.shape[0]:
                raise GraphError(f"conv1d: grouped input {x.shape} incompatible with kernel {w.shape}")
            gw4 = wv
        else:
            if squeeze:
                xv = xv[None]
            if not time_major:
                xv = xv.transpose(0, 2, 1)
            xv = xv[None]
            gw4 = wv[None]
        if xv.ndim != 4 or gw4.ndim != 4 or xv.shape[3] != gw4.shape[2]:
            raise GraphError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
        if stride not in (1, 2):
            raise GraphError(f"conv1d: unsupported stride {stride}")
        groups, n, t, cin = xv.shape
        _, cout, _, k = gw4.shape
        tout = (t + 2 * padding - k) // stride + 1
        if tout < 1:
            raise GraphError(f"conv1d: empty output for time {t}, kernel {k}, padding {padding}")
        bias_shape = (groups, cout) if grouped else (cout,)
        if b is not None and ins[2].shape != bias_shape:
            raise GraphError(f"conv1d: bias {ins[2].shape}, expected {bias_shape}")
        if padding:
            xp = np.zeros((groups, n, t + 2 * padding, cin))
            xp[:, :, padding:padding + t] = xv
        else:
            xp = xv
        span = stride * (tout - 1) + 1
        if k == 1 and stride == 1:
            cols = xp.reshape(groups, n * tout, cin)
        else:
            cols = np.stack([xp[:, :, j:j + span:stride] for j in range(k)], axis=3).reshape(groups, n * tout, k * cin)
        w2 = gw4.transpose(0, 3, 2, 1).reshape(groups, k * cin, cout)
        out = cols @ w2
        if b is not None:
            out += ins[2].value.reshape(groups, 1, cout)
        out = out.reshape(groups, n, tout, cout)
        if not grouped:
            out = out[0]
            if not time_major:
                out = out.transpose(0, 2, 1)
            if squeeze:
                out = out[0]

        need_x = self.needs_grad[x.id]

        def vjp(g):
            g4 = g
            if not grouped:
                g4 = g[None] if squeeze else g
                if not time_major:
                    g4 = g4.transpose(0, 2, 1)
                g4 = g4[None]
            g2 = g4.reshape(groups, n * tout, cout)
            gw = (np.swapaxes(cols, 1, 2) @ g2).reshape(groups, k, cin, cout).transpose(0, 3, 2, 1)
            gcols = (g2 @ np.swapaxes(w2, 1, 2)).reshape(groups, n, tout, k, cin) if need_x else None
            if not need_x:
                gx = None
            elif k == 1 and stride == 1 and not padding:
                gx = gcols.reshape(groups, n, t, cin)
            else:
                gxp = np.zeros(xp.shape)
                for j in range(k):
                    gxp[:, :, j:j + span:stride] += gcols[:, :, :, j]
                gx = gxp[:, :, padding:padding + t] if padding else gxp
            gb = g2.sum(axis=1)
            if not grouped:
                gw, gb = gw[0], gb[0]
                if gx is not None:
                    gx = gx[0]
                    if not time_major:
                        gx = gx.transpose(0, 2, 1)
                    if squeeze:
                        gx = gx[0]
            grads = [gx, gw]
            if b is not None:
                grads.append(gb)
            return tuple(grads)
        return self._push("conv1d", out, [v.id for v in ins], vjp)

    # -- backward ----------------------------------------------------------

    def backward(self, root: Var) -> None:
        if root.graph is not self:
            raise GraphError("backward: root belongs to a different graph")
        if self.grads is not None:
            raise GraphError("backward: already called on this graph; call reset_grads() first")
        if root.value.size != 1:
            raise GraphError(f"backward: root must be scalar, got shape {root.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.values)
        grads[root.id] = np.ones(root.shape)
        for i in range(root.id, -1, -1):
            g = grads[i]
            vjp = self.vjps[i]
            if g is None or vjp is None:
                continue
            for p, gp in zip(self.parents[i], vjp(g)):
                if gp is None or not self.needs_grad[p]:
                    continue
                grads[p] = gp if grads[p] is None else grads[p] + gp
        for nid, sink in self._sinks.items():
            if grads[nid] is not None:
                sink += grads[nid]
        self.grads = grads

    def reset_grads(self) -> None:
        self.grads = None

    def grad(self, x: Var) -> np.ndarray:
        if self.grads is None:
            raise GraphError("grad: backward has not run")
        g = self.grads[x.id] if x.id < len(self.grads) else None
        return np.zeros(x.shape) if g is None else g


def stop_gradient(x: Var) -> Var:
    return x.graph.stop_gradient(x)


def numeric_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    """Central differences with step ``rel_step * max(1, |x_i|)``."""
    x = np.array(x, dtype=np.float64, order="C")
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = rel_step * max(1.0, abs(orig))
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


# entries far below the gradient's own scale are compared at that floor, not against zero
ERROR_FLOOR = 1e-6
SCALE_FLOOR = 1e-3


def relative_error(analytic, fd) -> np.ndarray:
    """``|analytic - fd| / max(|analytic|, |fd|, floor)`` elementwise.

    ``floor`` is ``max(ERROR_FLOOR, SCALE_FLOOR * max|fd|)`` over the whole array.
    """
    analytic, fd = np.asarray(analytic, dtype=np.float64), np.asarray(fd, dtype=np.float64)
    floor = max(ERROR_FLOOR, SCALE_FLOOR * float(np.abs(fd).max(initial=0.0)))
    return np.abs(analytic - fd) / np.maximum(floor, np.maximum(np.abs(analytic), np.abs(fd)))


def gradient_error(build: Callable[..., Var], inputs: Sequence[np.ndarray]) -> float:
    """Max :func:`relative_error` over every input element.

    ``build(g, *vars)`` must return a scalar Var built on graph ``g``.
    """
    inputs = [np.array(v, dtype=np.float64, order="C") for v in inputs]
    g = Graph()
    leaves = [g.leaf(v) for v in inputs]
    root = build(g, *leaves)
    g.backward(root)
    worst = 0.0
    for i, v in enumerate(inputs):
        def f(xi, i=i):
            gg = Graph()
            args = [gg.constant(xi if j == i else inputs[j]) for j in range(len(inputs))]
            return float(build(gg, *args).value)
        fd = numeric_gradient(f, v)
        an = g.grad(leaves[i])
        err = relative_error(an, fd)
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
