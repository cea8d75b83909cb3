"""Tape-based reverse-mode automatic differentiation on dense numpy arrays.

Every backward rule is written against duck-typed operands: when it receives
plain arrays it computes numbers, and when it receives :class:`Var` objects it
records new nodes on the tape. The second path is what makes :func:`vjp`
differentiable (``create_graph=True``), which the trace of the velocity
Jacobian relies on.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class TapeError(ValueError):
    """Raised for shape mismatches, cross-tape inputs and stale nodes."""


class Op:
    """A primitive: ``forward(*values, **attrs)`` and ``backward(g, xs, out, attrs, needs)``.

    With ``stash`` the forward returns ``(value, extras)`` and the extras are
    merged into the node's attrs for use by the numeric backward.
    """

    __slots__ = ("name", "forward", "backward", "stash")

    def __init__(self, name: str, forward: Callable, backward: Callable, stash: bool = False):
        self.name = name
        self.forward = forward
        self.backward = backward
        self.stash = stash

    def __repr__(self):
        return f"Op({self.name})"


class Var:
    """A node on a :class:`Tape`: a value plus the record of how it was made."""

    __slots__ = ("value", "tape", "index", "op", "parents", "attrs", "requires_grad", "cache")
    __array_priority__ = 1000  # make ndarray <op> Var defer to Var

    def __init__(self, value, tape, index, op=None, parents=(), attrs=None, requires_grad=False):
        self.value = value
        self.tape = tape
        self.index = index
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.requires_grad = requires_grad
        self.cache = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def T(self) -> "Var":
        return transpose(self)

    def __repr__(self):
        kind = self.op.name if self.op is not None else "leaf"
        return f"Var({kind}, shape={self.shape}, index={self.index})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Append-only list of recorded nodes; recording order is topological order."""

    def __init__(self):
        self.nodes: list[Var] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, requires_grad: bool = True) -> Var:
        value = np.array(value, dtype=np.float64)
        var = Var(value, self, len(self.nodes), requires_grad=requires_grad)
        self.nodes.append(var)
        return var

    def constant(self, value) -> Var:
        return self.leaf(value, requires_grad=False)

    def record(self, op: Op, inputs: Sequence[Var], attrs=None) -> Var:
        nodes = self.nodes
        requires_grad = False
        for x in inputs:
            if x.tape is not self:
                raise TapeError(f"{op.name}: input belongs to a different tape")
            if x.index >= len(nodes) or nodes[x.index] is not x:
                raise TapeError(f"{op.name}: input was discarded from the tape")
            requires_grad = requires_grad or x.requires_grad
        if attrs is None:
            value = op.forward(*[x.value for x in inputs])
        else:
            value = op.forward(*[x.value for x in inputs], **attrs)
        if op.stash:
            value, extras = value
            attrs = {**attrs, **extras} if attrs else extras
        var = Var(value, self, len(nodes), op, tuple(inputs), attrs, requires_grad)
        nodes.append(var)
        return var

    def mark(self) -> int:
        return len(self.nodes)

    def truncate(self, mark: int) -> None:
        """Drop every node recorded after ``mark`` (e.g. a rejected solver step)."""
        del self.nodes[mark:]


# ---------------------------------------------------------------------------
# operand coercion


def _check_same(name, a, b):
    if a.shape != b.shape:
        raise TapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _as_var(x, tape: Tape) -> Var:
    if isinstance(x, Var):
        return x
    return tape.constant(x)


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# ---------------------------------------------------------------------------
# op table.  backward(g, xs, out, attrs, needs) -> tuple of cotangents


def _add_bwd(g, xs, out, attrs, needs):
    return g, g


def _sub_bwd(g, xs, out, attrs, needs):
    return g, (-g if needs[1] else None)


def _mul_bwd(g, xs, out, attrs, needs):
    a, b = xs
    return (g * b if needs[0] else None), (g * a if needs[1] else None)


def _div_bwd(g, xs, out, attrs, needs):
    a, b = xs
    ga = g / b if needs[0] else None
    gb = -(g * out) / b if needs[1] else None
    return ga, gb


def _neg_bwd(g, xs, out, attrs, needs):
    return (-g,)


def _scale_bwd(g, xs, out, attrs, needs):
    return (g * attrs["c"],)


def _shift_bwd(g, xs, out, attrs, needs):
    return (g,)


def _smul_bwd(g, xs, out, attrs, needs):
    s, x = xs
    gs = total(g * x) if needs[0] else None
    gx = s * g if needs[1] else None
    return gs, gx


def _sadd_bwd(g, xs, out, attrs, needs):
    return (total(g) if needs[0] else None), g


def _matmul_bwd(g, xs, out, attrs, needs):
    a, b = xs
    ga = g @ _t(b) if needs[0] else None
    gb = _t(a) @ g if needs[1] else None
    return ga, gb


def _transpose_bwd(g, xs, out, attrs, needs):
    return (_t(g),)


def _tanh_bwd(g, xs, out, attrs, needs):
    if isinstance(out, Var):
        # 1 - tanh^2 is shared by every cotangent pulled through this node
        d = _cached(out, "dtanh", lambda: 1.0 - out * out)
        return (g * d,)
    return (g * (1.0 - out * out),)


def _sigmoid_bwd(g, xs, out, attrs, needs):
    return (g * (out * (1.0 - out)),)


def _softplus_bwd(g, xs, out, attrs, needs):
    return (g * sigmoid(xs[0]),)


def _exp_bwd(g, xs, out, attrs, needs):
    return (g * out,)


def _log_bwd(g, xs, out, attrs, needs):
    return (g / xs[0],)


def _square_bwd(g, xs, out, attrs, needs):
    return (g * (2.0 * xs[0]),)


def _sum_bwd(g, xs, out, attrs, needs):
    return (fill(g, attrs["shape"]),)


def _mean_bwd(g, xs, out, attrs, needs):
    shape = attrs["shape"]
    return (fill(g * (1.0 / int(np.prod(shape))), shape),)


def _fill_bwd(g, xs, out, attrs, needs):
    return (total(g),)


def _sum_rows_bwd(g, xs, out, attrs, needs):
    return (tile_rows(g, attrs["n"]),)


def _tile_rows_bwd(g, xs, out, attrs, needs):
    return (sum_rows(g),)


def _add_row_bwd(g, xs, out, attrs, needs):
    return g, (sum_rows(g) if needs[1] else None)


def _mul_row_bwd(g, xs, out, attrs, needs):
    x, r = xs
    gx = mul_row(g, r) if needs[0] else None
    gr = sum_rows(g * x) if needs[1] else None
    return gx, gr


def _concat_bwd(g, xs, out, attrs, needs):
    grads = []
    start = 0
    for x, need in zip(xs, needs):
        width = x.shape[1]
        grads.append(take_cols(g, start, start + width) if need else None)
        start += width
    return tuple(grads)


def _take_bwd(g, xs, out, attrs, needs):
    return (pad_cols(g, attrs["start"], attrs["ncols"]),)


def _pad_bwd(g, xs, out, attrs, needs):
    start = attrs["start"]
    return (take_cols(g, start, start + xs[0].shape[1]),)


def _lincomb_bwd(g, xs, out, attrs, needs):
    return tuple(c * g if need else None for c, need in zip(attrs["coeffs"], needs))


def _pad_fwd(x, start, ncols):
    out = np.zeros((x.shape[0], ncols))
    out[:, start:start + x.shape[1]] = x
    return out


def _lincomb_fwd(*xs, coeffs):
    acc = coeffs[0] * xs[0]
    for c, x in zip(coeffs[1:], xs[1:]):
        acc = acc + c * x
    return acc


def _sigmoid_np(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


ADD = Op("add", np.add, _add_bwd)
SUB = Op("sub", np.subtract, _sub_bwd)
MUL = Op("mul", np.multiply, _mul_bwd)
DIV = Op("div", np.divide, _div_bwd)
NEG = Op("neg", np.negative, _neg_bwd)
SCALE = Op("scale", lambda x, c: c * x, _scale_bwd)
SHIFT = Op("shift", lambda x, c: x + c, _shift_bwd)
SMUL = Op("scalar_mul", lambda s, x: s * x, _smul_bwd)
SADD = Op("scalar_add", lambda s, x: s + x, _sadd_bwd)
MATMUL = Op("matmul", np.matmul, _matmul_bwd)
TRANSPOSE = Op("transpose", np.transpose, _transpose_bwd)
TANH = Op("tanh", np.tanh, _tanh_bwd)
SIGMOID = Op("sigmoid", _sigmoid_np, _sigmoid_bwd)
SOFTPLUS = Op("softplus", lambda x: np.logaddexp(0.0, x), _softplus_bwd)
EXP = Op("exp", np.exp, _exp_bwd)
LOG = Op("log", np.log, _log_bwd)
SQUARE = Op("square", np.square, _square_bwd)
SUM = Op("sum", lambda x, shape: np.asarray(x.sum()), _sum_bwd)
MEAN = Op("mean", lambda x, shape: np.asarray(x.mean()), _mean_bwd)
FILL = Op("fill", lambda s, shape: np.full(shape, float(s)), _fill_bwd)
SUM_ROWS = Op("sum_rows", lambda x, n: x.sum(axis=0), _sum_rows_bwd)
TILE_ROWS = Op("tile_rows", lambda x, n: np.tile(x, (n, 1)), _tile_rows_bwd)
ADD_ROW = Op("add_row", np.add, _add_row_bwd)
MUL_ROW = Op("mul_row", np.multiply, _mul_row_bwd)
CONCAT = Op("concat", lambda *xs: np.concatenate(xs, axis=1), _concat_bwd)
TAKE = Op("slice", lambda x, start, stop, ncols: x[:, start:stop].copy(), _take_bwd)
PAD = Op("pad", _pad_fwd, _pad_bwd)
LINCOMB = Op("lincomb", _lincomb_fwd, _lincomb_bwd)


def _cached(var: Var, key: str, make: Callable[[], Var]) -> Var:
    cache = var.cache
    if cache is None:
        cache = var.cache = {}
    hit = cache.get(key)
    nodes = var.tape.nodes
    if hit is not None and hit.index < len(nodes) and nodes[hit.index] is hit:
        return hit
    hit = cache[key] = make()
    return hit


# ---------------------------------------------------------------------------
# public op functions (accept Var or ndarray; ndarrays are computed directly)


def add(a, b):
    if isinstance(a, Var) or isinstance(b, Var):
        if _is_number(b):
            return a.tape.record(SHIFT, (a,), {"c": float(b)})
        if _is_number(a):
            return b.tape.record(SHIFT, (b,), {"c": float(a)})
        tape = a.tape if isinstance(a, Var) else b.tape
        a, b = _as_var(a, tape), _as_var(b, tape)
        if a.shape == b.shape:
            return tape.record(ADD, (a, b))
        if a.shape == ():
            return tape.record(SADD, (a, b))
        if b.shape == ():
            return tape.record(SADD, (b, a))
        raise TapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


def sub(a, b):
    if isinstance(a, Var) or isinstance(b, Var):
        if _is_number(b):
            return a.tape.record(SHIFT, (a,), {"c": -float(b)})
        if _is_number(a):
            return add(neg(b), a)
        tape = a.tape if isinstance(a, Var) else b.tape
        a, b = _as_var(a, tape), _as_var(b, tape)
        if a.shape == b.shape:
            return tape.record(SUB, (a, b))
        if a.shape == () or b.shape == ():
            return add(a, neg(b))
        raise TapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return a - b


def mul(a, b):
    if isinstance(a, Var) or isinstance(b, Var):
        if _is_number(b):
            return a.tape.record(SCALE, (a,), {"c": float(b)})
        if _is_number(a):
            return b.tape.record(SCALE, (b,), {"c": float(a)})
        tape = a.tape if isinstance(a, Var) else b.tape
        a, b = _as_var(a, tape), _as_var(b, tape)
        if a.shape == b.shape:
            return tape.record(MUL, (a, b))
        if a.shape == ():
            return tape.record(SMUL, (a, b))
        if b.shape == ():
            return tape.record(SMUL, (b, a))
        raise TapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return a * b


def div(a, b):
    if isinstance(a, Var) or isinstance(b, Var):
        if _is_number(b):
            return mul(a, 1.0 / float(b))
        tape = a.tape if isinstance(a, Var) else b.tape
        a, b = _as_var(a, tape), _as_var(b, tape)
        _check_same("div", a, b)
        return tape.record(DIV, (a, b))
    return a / b


def neg(x):
    if isinstance(x, Var):
        return x.tape.record(NEG, (x,))
    return -x


def matmul(a, b):
    if isinstance(a, Var) or isinstance(b, Var):
        tape = a.tape if isinstance(a, Var) else b.tape
        a, b = _as_var(a, tape), _as_var(b, tape)
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise TapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        return tape.record(MATMUL, (a, b))
    return a @ b


def transpose(x):
    if isinstance(x, Var):
        return _cached(x, "T", lambda: x.tape.record(TRANSPOSE, (x,)))
    return x.T


def _t(x):
    return transpose(x) if isinstance(x, Var) else x.T


def _unary(op, np_fn):
    def fn(x):
        if isinstance(x, Var):
            return x.tape.record(op, (x,))
        return np_fn(x)

    fn.__name__ = op.name
    return fn


tanh = _unary(TANH, np.tanh)
sigmoid = _unary(SIGMOID, _sigmoid_np)
softplus = _unary(SOFTPLUS, lambda x: np.logaddexp(0.0, x))
exp = _unary(EXP, np.exp)
log = _unary(LOG, np.log)
square = _unary(SQUARE, np.square)


def total(x):
    """Sum of all entries, as a 0-d value."""
    if isinstance(x, Var):
        return x.tape.record(SUM, (x,), {"shape": x.shape})
    return np.asarray(np.sum(x))


def mean(x):
    if isinstance(x, Var):
        return x.tape.record(MEAN, (x,), {"shape": x.shape})
    return np.asarray(np.mean(x))


def fill(s, shape):
    """Broadcast a 0-d value to ``shape``."""
    if isinstance(s, Var):
        if s.shape != ():
            raise TapeError("fill: source must be 0-d")
        return s.tape.record(FILL, (s,), {"shape": tuple(shape)})
    return np.full(shape, float(s))


def sum_rows(x):
    """Column-wise sum of an (n, k) matrix, giving shape (k,)."""
    if isinstance(x, Var):
        return x.tape.record(SUM_ROWS, (x,), {"n": x.shape[0]})
    return x.sum(axis=0)


def tile_rows(r, n: int):
    if isinstance(r, Var):
        return r.tape.record(TILE_ROWS, (r,), {"n": n})
    return np.tile(r, (n, 1))


def _row_check(name, x, r):
    if x.value.ndim != 2 or r.shape != (x.shape[1],):
        raise TapeError(f"{name}: row shape {r.shape} does not match {x.shape}")


def add_row(x, r):
    """x + r with the vector r added to every row of x."""
    if isinstance(x, Var) or isinstance(r, Var):
        tape = x.tape if isinstance(x, Var) else r.tape
        x, r = _as_var(x, tape), _as_var(r, tape)
        _row_check("add_row", x, r)
        return tape.record(ADD_ROW, (x, r))
    return x + r


def mul_row(x, r):
    """x * r with every row of x scaled elementwise by the vector r."""
    if isinstance(x, Var) or isinstance(r, Var):
        tape = x.tape if isinstance(x, Var) else r.tape
        x, r = _as_var(x, tape), _as_var(r, tape)
        _row_check("mul_row", x, r)
        return tape.record(MUL_ROW, (x, r))
    return x * r


def concat_cols(xs: Sequence):
    if any(isinstance(x, Var) for x in xs):
        tape = next(x.tape for x in xs if isinstance(x, Var))
        xs = [_as_var(x, tape) for x in xs]
        rows = {x.shape[0] for x in xs}
        if len(rows) != 1 or any(x.value.ndim != 2 for x in xs):
            raise TapeError("concat: inputs must be 2-d with equal row counts")
        return tape.record(CONCAT, tuple(xs))
    return np.concatenate(xs, axis=1)


def take_cols(x, start: int, stop: int):
    if isinstance(x, Var):
        ncols = x.shape[1]
        if not 0 <= start < stop <= ncols:
            raise TapeError(f"slice: [{start}:{stop}] out of range for {ncols} columns")
        return x.tape.record(TAKE, (x,), {"start": start, "stop": stop, "ncols": ncols})
    return x[:, start:stop]


def pad_cols(x, start: int, ncols: int):
    if isinstance(x, Var):
        return x.tape.record(PAD, (x,), {"start": start, "ncols": ncols})
    return _pad_fwd(x, start, ncols)


def lincomb(coeffs: Sequence[float], xs: Sequence):
    """sum_i coeffs[i] * xs[i] for equally-shaped operands; zero coefficients are skipped."""
    pairs = [(float(c), x) for c, x in zip(coeffs, xs) if c != 0.0]
    if not pairs:
        raise TapeError("lincomb: all coefficients are zero")
    cs = [c for c, _ in pairs]
    xs = [x for _, x in pairs]
    if any(isinstance(x, Var) for x in xs):
        tape = next(x.tape for x in xs if isinstance(x, Var))
        xs = [_as_var(x, tape) for x in xs]
        shape = xs[0].shape
        if any(x.shape != shape for x in xs):
            raise TapeError("lincomb: shape mismatch")
        return tape.record(LINCOMB, tuple(xs), {"coeffs": tuple(cs)})
    return _lincomb_fwd(*xs, coeffs=cs)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x)


# ---------------------------------------------------------------------------
# reverse passes


def _accumulate(store, key, g):
    prev = store.get(key)
    store[key] = g if prev is None else prev + g


def backward(output: Var) -> dict:
    """Gradients of a scalar ``output`` with respect to every trainable leaf.

    Returns a dict mapping leaf :class:`Var` to an ndarray; leaves the output
    does not depend on get zeros.
    """
    if output.shape != ():
        raise TapeError(f"backward: output must be scalar, got shape {output.shape}")
    nodes = output.tape.nodes
    cot = {output.index: np.ones(())}
    grads = {}
    for i in range(output.index, -1, -1):
        node = nodes[i]
        if node.op is None:
            if node.requires_grad:
                g = cot.pop(i, None)
                grads[node] = np.zeros_like(node.value) if g is None else g
            continue
        g = cot.pop(i, None)
        if g is None or not node.requires_grad:
            continue
        parents = node.parents
        needs = [p.requires_grad for p in parents]
        pgrads = node.op.backward(g, [p.value for p in parents], node.value, node.attrs, needs)
        for p, pg, need in zip(parents, pgrads, needs):
            if need and pg is not None:
                _accumulate(cot, p.index, pg)
    for node in nodes[output.index + 1:]:
        if node.op is None and node.requires_grad:
            grads[node] = np.zeros_like(node.value)
    return grads


def vjp(output: Var, cotangent, wrt: Sequence[Var], create_graph: bool = True) -> list:
    """Vector-Jacobian products ``cotangent^T d output / d w`` for each w in ``wrt``.

    With ``create_graph`` the products are recorded on the tape (differentiable
    Vars); otherwise plain arrays are returned.
    """
    tape = output.tape
    if tuple(np.shape(value(cotangent))) != output.shape:
        raise TapeError(f"vjp: cotangent shape {np.shape(value(cotangent))} != output shape {output.shape}")
    for w in wrt:
        if w.tape is not tape:
            raise TapeError("vjp: wrt variable belongs to a different tape")
    nodes = tape.nodes
    stop = output.index
    start = min(w.index for w in wrt)
    dep = set(w.index for w in wrt)
    for i in range(start + 1, stop + 1):
        node = nodes[i]
        if i in dep:
            continue
        for p in node.parents:
            if p.index in dep:
                dep.add(i)
                break
    if stop not in dep:
        return [_zeros_like(w, create_graph) for w in wrt]

    if create_graph:
        g0 = cotangent if isinstance(cotangent, Var) else tape.constant(cotangent)
    else:
        g0 = value(cotangent)
    cot = {stop: g0}
    targets = {w.index for w in wrt}
    found = {}
    for i in range(stop, start - 1, -1):
        if i not in dep:
            continue
        g = cot.pop(i, None)
        if g is None:
            continue
        if i in targets:
            found[i] = g
        node = nodes[i]
        if node.op is None:
            continue
        parents = node.parents
        needs = [p.index in dep for p in parents]
        if not any(needs):
            continue
        if create_graph:
            pgrads = node.op.backward(g, parents, node, node.attrs, needs)
        else:
            pgrads = node.op.backward(g, [p.value for p in parents], node.value, node.attrs, needs)
        for p, pg, need in zip(parents, pgrads, needs):
            if need and pg is not None:
                _accumulate(cot, p.index, pg)
    return [found[w.index] if w.index in found else _zeros_like(w, create_graph) for w in wrt]


def _zeros_like(w: Var, create_graph: bool):
    z = np.zeros_like(w.value)
    return w.tape.constant(z) if create_graph else z


def grad(output: Var, wrt: Iterable[Var]) -> list[np.ndarray]:
    """Numeric gradients of a scalar output with respect to ``wrt``."""
    if output.shape != ():
        raise TapeError(f"grad: output must be scalar, got shape {output.shape}")
    return vjp(output, np.ones(()), list(wrt), create_graph=False)
