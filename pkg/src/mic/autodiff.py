"""Reverse-mode differentiation over dense float64 matrices.

Every value is a 2-D ``numpy`` array.  Operations accept either plain arrays
or :class:`Var` handles; when at least one argument is a ``Var`` the result is
recorded on that variable's :class:`Tape` and a ``Var`` is returned, otherwise
the plain array result is returned.  The same model code therefore serves both
training (taped) and evaluation (untaped).
"""

from __future__ import annotations

import warnings
from typing import Callable, Mapping

import numpy as np

EPS_NORM = 1e-12


class ShapeError(ValueError):
    pass


class DegenerateRowWarning(RuntimeWarning):
    """Raised (as a warning) when a row is too short to normalize."""


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {a.shape}")
    return a


class Var:
    __slots__ = ("value", "tape", "id", "name")

    def __init__(self, value: np.ndarray, tape: "Tape", id_: int, name: str | None = None):
        self.value = value
        self.tape = tape
        self.id = id_
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var#{self.id}{tag}{self.value.shape}"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Define-by-run record of primitive operations.

    Nodes are numbered in creation order, so the op list is topologically
    sorted by construction and backward is a single reverse sweep.
    """

    def __init__(self):
        self._ops: list[tuple[int, tuple[int, ...], tuple[Callable, ...]]] = []
        self._count = 0
        self.leaves: dict[str, Var] = {}

    def __len__(self):
        return len(self._ops)

    def _new(self, value, name=None) -> Var:
        v = Var(value, self, self._count, name)
        self._count += 1
        return v

    def leaf(self, value, name: str | None = None) -> Var:
        v = self._new(as_matrix(value), name)
        if name is not None:
            if name in self.leaves:
                raise KeyError(f"duplicate leaf name {name!r}")
            self.leaves[name] = v
        return v

    def bind(self, arrays: Mapping[str, np.ndarray]) -> dict[str, Var]:
        return {k: self.leaf(v, k) for k, v in arrays.items()}

    def record(self, value, inputs: tuple[Var, ...], vjps: tuple[Callable, ...]) -> Var:
        out = self._new(value)
        self._ops.append((out.id, tuple(v.id for v in inputs), vjps))
        return out


def backward(loss: Var, wrt: Mapping[str, Var] | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every named leaf of its tape.

    Leaves that the loss does not depend on get an all-zero gradient.
    """
    if not isinstance(loss, Var):
        raise TypeError("loss is not recorded on a tape")
    if loss.value.shape != (1, 1):
        raise ShapeError(f"loss must be 1x1, got {loss.value.shape}")
    tape = loss.tape
    grads: dict[int, np.ndarray] = {loss.id: np.ones((1, 1))}
    for out_id, in_ids, vjps in reversed(tape._ops):
        if out_id > loss.id:
            continue
        g = grads.pop(out_id, None)
        if g is None:
            continue
        for i, vjp in zip(in_ids, vjps):
            gi = vjp(g)
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    leaves = tape.leaves if wrt is None else wrt
    out = {}
    for name, v in leaves.items():
        g = grads.get(v.id)
        out[name] = np.zeros_like(v.value) if g is None else g
    return out


# --- helpers ---------------------------------------------------------------

def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else as_matrix(x)


def _record(out, args, vjps):
    tape = None
    for a in args:
        if isinstance(a, Var):
            tape = a.tape
            break
    if tape is None:
        return out
    ins, fns = [], []
    for a, fn in zip(args, vjps):
        if isinstance(a, Var):
            if a.tape is not tape:
                raise ValueError("operands live on different tapes")
            ins.append(a)
            fns.append(fn)
    return tape.record(out, tuple(ins), tuple(fns))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a, b):
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}")


# --- primitives ------------------------------------------------------------

def matmul(a, b):
    av, bv = value(a), value(b)
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shape mismatch {av.shape} x {bv.shape}")
    return _record(av @ bv, (a, b), (lambda g: g @ bv.T, lambda g: av.T @ g))


def add(a, b):
    av, bv = value(a), value(b)
    _check_broadcast(av, bv)
    return _record(av + bv, (a, b),
                   (lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value(a), value(b)
    _check_broadcast(av, bv)
    return _record(av - bv, (a, b),
                   (lambda g: _unbroadcast(g, av.shape), lambda g: -_unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = value(a), value(b)
    _check_broadcast(av, bv)
    return _record(av * bv, (a, b),
                   (lambda g: _unbroadcast(g * bv, av.shape), lambda g: _unbroadcast(g * av, bv.shape)))


def scale(a, c: float):
    av = value(a)
    return _record(av * c, (a,), (lambda g: g * c,))


def relu(a):
    av = value(a)
    mask = av > 0
    return _record(np.where(mask, av, 0.0), (a,), (lambda g: g * mask,))


def square(a):
    av = value(a)
    return _record(av * av, (a,), (lambda g: 2.0 * av * g,))


def sqrt(a, floor: float = 0.0):
    """sqrt(a + floor); ``floor`` keeps the derivative finite at zero."""
    av = value(a) + floor
    if np.any(av < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(av)
    return _record(out, (a,), (lambda g: g * 0.5 / np.maximum(out, 1e-300),))


def exp(a):
    out = np.exp(value(a))
    return _record(out, (a,), (lambda g: g * out,))


def log(a):
    av = value(a)
    return _record(np.log(av), (a,), (lambda g: g / av,))


def transpose(a):
    av = value(a)
    return _record(av.T.copy(), (a,), (lambda g: g.T,))


def total(a):
    """Sum of all entries as a 1x1 matrix."""
    av = value(a)
    return _record(np.array([[av.sum()]]), (a,), (lambda g: np.full(av.shape, g[0, 0]),))


def mean(a):
    av = value(a)
    n = av.size
    return _record(np.array([[av.sum() / n]]), (a,), (lambda g: np.full(av.shape, g[0, 0] / n),))


def sum_rows(a):
    """Row sums, shape (n, 1)."""
    av = value(a)
    return _record(av.sum(axis=1, keepdims=True), (a,), (lambda g: np.broadcast_to(g, av.shape).copy(),))


def gather_rows(a, idx):
    av = value(a)
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return out

    return _record(av[idx], (a,), (vjp,))


def logsumexp_rows(a, mask=None):
    """Row-wise log-sum-exp over the entries where ``mask`` is true."""
    av = value(a)
    if mask is None:
        mask = np.ones(av.shape, dtype=bool)
    if not np.all(mask.any(axis=1)):
        raise ValueError("every row needs at least one unmasked entry")
    masked = np.where(mask, av, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    w = np.exp(masked - m)
    s = w.sum(axis=1, keepdims=True)
    soft = w / s
    return _record(m + np.log(s), (a,), (lambda g: g * soft,))


def grad_reverse(a):
    """Identity forward, negated gradient backward."""
    av = value(a)
    return _record(av, (a,), (lambda g: -g,))


def l2_normalize(a):
    """Scale every row to unit length.

    Rows with norm <= EPS_NORM are replaced by the first basis vector, get a
    zero gradient and trigger a :class:`DegenerateRowWarning`.
    """
    av = value(a)
    norms = np.sqrt((av * av).sum(axis=1, keepdims=True))
    bad = (norms <= EPS_NORM).reshape(-1)
    safe = np.where(norms > EPS_NORM, norms, 1.0)
    out = av / safe
    if bad.any():
        warnings.warn(f"{int(bad.sum())} row(s) below norm {EPS_NORM}; using e1",
                      DegenerateRowWarning, stacklevel=2)
        out[bad] = 0.0
        out[bad, 0] = 1.0

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        gi = (g - out * dot) / safe
        gi[bad] = 0.0
        return gi

    return _record(out, (a,), (vjp,))


# --- verification ----------------------------------------------------------

def numeric_grad(fn: Callable[[Mapping], object], params: Mapping[str, np.ndarray],
                 eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of a scalar ``fn`` w.r.t. every entry of ``params``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = {k: as_matrix(v).copy() for k, v in params.items()}
    out = {}
    for name, p in params.items():
        flat = p.reshape(-1)
        g = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(value(fn(params))[0, 0])
            flat[i] = orig - eps
            down = float(value(fn(params))[0, 0])
            flat[i] = orig
            g[i] = (up - down) / (2 * eps)
        out[name] = g.reshape(p.shape)
    return out


def max_rel_error(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray]) -> float:
    """max |a - n| / max(1, |n|) over all shared entries."""
    worst = 0.0
    for k, n in numeric.items():
        a = np.asarray(analytic[k])
        worst = max(worst, float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n)), initial=0.0)))
    return worst


def finite_diff_check(build: Callable[[Mapping], object], params: Mapping[str, np.ndarray],
                      eps: float = 1e-5, max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between taped and central-difference gradients.

    ``build`` maps a dict of parameters (arrays or Vars) to a scalar loss.  The
    error per entry is ``|analytic - numeric| / max(1, |numeric|)``.  With
    ``max_entries`` only that many randomly chosen entries per parameter are
    probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = {k: as_matrix(v).copy() for k, v in params.items()}
    tape = Tape()
    loss = build(tape.bind(params))
    analytic = backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        ga = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(value(build(params))[0, 0])
            flat[i] = orig - eps
            down = float(value(build(params))[0, 0])
            flat[i] = orig
            num = (up - down) / (2 * eps)
            worst = max(worst, abs(ga[i] - num) / max(1.0, abs(num)))
    return worst
