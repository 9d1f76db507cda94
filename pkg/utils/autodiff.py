# utils/autodiff.py - Reverse-mode differentiation tape over real and complex arrays
"""
A small reverse-mode engine that records array operations on a `Tape` and
replays them backwards.

Complex values are differentiated as pairs of reals. The adjoint stored for a
complex node z = x + iy is the single complex number

    dL/dx + i dL/dy

so a holomorphic step w = f(z) pulls back as  g_z = g_w * conj(f'(z)),
conjugation pulls back as  g_z = conj(g_w),  and a real parent keeps only the
real part of whatever flows into it. Linear solves are one primitive whose
backward pass is a single solve against the conjugate-transposed matrix.

Every operation below accepts plain numpy values as well; with no tracked
operand it simply returns the numpy result, so solver code is written once
and runs either plain or on a tape.
"""
import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg as sla
from scipy.special import expit

from utils.errors import SingularSystemError, TapeError

logger = logging.getLogger(__name__)

# condition numbers above this are treated as numerically singular
SINGULAR_CONDITION = 1e15


class Tracked:
    """
    Handle to a value recorded on a tape. `adjoint` stays zero until a
    backward pass reaches the node.
    """

    __slots__ = ("tape", "index", "value", "adjoint")
    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value
        self.adjoint = np.zeros_like(value)

    # --- array-like surface ---
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def size(self):
        return self.value.size

    @property
    def real(self):
        return real(self)

    @property
    def imag(self):
        return imag(self)

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def item(self):
        return self.value.item()

    def conj(self):
        return conj(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self):
        return f"Tracked(index={self.index}, value={self.value!r})"

    # --- operators ---
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
        return matvec(self, other)

    def __rmatmul__(self, other):
        return matvec(other, self)

    def __getitem__(self, key):
        return getitem(self, key)


class _Node:
    __slots__ = ("parents", "vjp")

    def __init__(self, parents: Tuple[int, ...], vjp: Optional[Callable]):
        self.parents = parents
        self.vjp = vjp


class Gradients:
    """Adjoints of the recorded inputs after a backward pass"""

    def __init__(self, adjoints: Dict[int, np.ndarray], inputs: List[Tracked]):
        self._adjoints = adjoints
        self._inputs = inputs

    def __getitem__(self, x: Tracked) -> np.ndarray:
        if x.index not in self._adjoints:
            raise KeyError(f"node {x.index} is not a recorded input")
        return self._adjoints[x.index]

    def get(self, x: Tracked, default=None):
        return self._adjoints.get(x.index, default)

    def pair(self, x: Tracked) -> Tuple[np.ndarray, np.ndarray]:
        """(d/dRe, d/dIm) of the output with respect to `x`"""
        g = np.asarray(self[x])
        if np.iscomplexobj(g):
            return g.real.copy(), g.imag.copy()
        return g.copy(), np.zeros_like(g)

    def __iter__(self):
        return iter(self._inputs)

    def __len__(self):
        return len(self._inputs)


class Tape:
    """
    Append-only record of primitive operations. Operands always precede the
    results that use them, so one reverse sweep visits each node once.
    One tape serves one computation; after `backward` it is finished.
    """

    def __init__(self):
        self._nodes: List[_Node] = []
        self._handles: List[Tracked] = []
        self._inputs: List[Tracked] = []
        self.finished = False

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.finished = True
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, value) -> Tracked:
        """Start tracking `value` as an independent input"""
        handle = self._push(_as_array(value), (), None)
        self._inputs.append(handle)
        return handle

    def watch(self, params: Dict[str, np.ndarray]) -> Dict[str, Tracked]:
        """Record every array of a parameter dict, in key order"""
        return {name: self.record(arr) for name, arr in params.items()}

    def _push(self, value: np.ndarray, parents: Tuple[int, ...], vjp: Optional[Callable]) -> Tracked:
        if self.finished:
            raise TapeError("cannot record on a finished tape")
        index = len(self._nodes)
        self._nodes.append(_Node(parents, vjp))
        handle = Tracked(self, index, value)
        self._handles.append(handle)
        return handle

    def backward(self, output) -> Gradients:
        """
        Propagate d(output) back to every recorded input.
        `output` must be a real scalar; an output that does not depend on the
        inputs yields zero gradients and a warning.
        """
        if self.finished:
            raise TapeError("backward called on a finished tape")
        zeros = {x.index: np.zeros_like(x.value) for x in self._inputs}

        if not isinstance(output, Tracked):
            logger.warning("backward: output is a constant, all gradients are zero")
            self.finished = True
            return Gradients(zeros, list(self._inputs))
        if output.tape is not self:
            raise TapeError("output was recorded on a different tape")
        out_value = output.value
        if out_value.size != 1:
            raise TapeError(f"backward needs a scalar output, got shape {out_value.shape}")
        if np.iscomplexobj(out_value):
            scalar = complex(out_value.reshape(()))
            if abs(scalar.imag) > 1e-12 * (1.0 + abs(scalar.real)):
                raise TapeError(f"backward needs a real-valued output, got {scalar}")

        adjoints: List[Optional[np.ndarray]] = [None] * len(self._nodes)
        adjoints[output.index] = np.ones(out_value.shape, dtype=np.float64)
        for i in range(output.index, -1, -1):
            g = adjoints[i]
            node = self._nodes[i]
            if g is None or node.vjp is None:
                continue
            contributions = node.vjp(g)
            for parent, contrib in zip(node.parents, contributions):
                if contrib is None:
                    continue
                contrib = _fit(contrib, self._handles[parent].value)
                if adjoints[parent] is None:
                    adjoints[parent] = contrib
                else:
                    adjoints[parent] = adjoints[parent] + contrib

        self.finished = True
        for handle, adj in zip(self._handles, adjoints):
            if adj is not None:
                handle.adjoint = adj

        reached = False
        result = {}
        for x in self._inputs:
            adj = adjoints[x.index]
            if adj is None:
                result[x.index] = zeros[x.index]
            else:
                reached = True
                result[x.index] = adj
        if self._inputs and not reached:
            logger.warning("backward: output does not depend on any recorded input, gradients are zero")
        return Gradients(result, list(self._inputs))


class Factorization:
    """
    LU factorization of a constant square matrix, reused across solves.
    Solves against it are tape primitives (see `solve`).
    """

    def __init__(self, matrix: np.ndarray):
        matrix = np.asarray(matrix)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError(f"square matrix required, got shape {matrix.shape}")
        self.matrix = matrix
        self.n = matrix.shape[0]
        self.condition = float(np.linalg.cond(matrix)) if self.n else 1.0
        if not np.isfinite(self.condition) or self.condition > SINGULAR_CONDITION:
            raise SingularSystemError(self.condition)
        self._lu = sla.lu_factor(matrix, check_finite=False)

    def _apply(self, b: np.ndarray, trans: int) -> np.ndarray:
        b = np.asarray(b)
        moved = np.moveaxis(b, -1, 0)
        flat = moved.reshape(self.n, -1)
        x = sla.lu_solve(self._lu, flat, trans=trans, check_finite=False)
        return np.moveaxis(x.reshape(moved.shape), 0, -1)

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self._apply(b, 0)

    def solve_h(self, b: np.ndarray) -> np.ndarray:
        """Solve against the conjugate transpose"""
        return self._apply(b, 2)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _as_array(value) -> np.ndarray:
    arr = np.array(value)
    if arr.dtype.kind in "biu":
        arr = arr.astype(np.float64)
    return arr


def value(x) -> np.ndarray:
    """Underlying numpy value of a tracked or plain operand"""
    return x.value if isinstance(x, Tracked) else np.asarray(x)


def is_tracked(x) -> bool:
    return isinstance(x, Tracked)


def _tape_of(*operands) -> Optional[Tape]:
    tape = None
    for x in operands:
        if isinstance(x, Tracked):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operands were recorded on different tapes")
    return tape


def _fit(contrib, target: np.ndarray) -> np.ndarray:
    """Undo broadcasting and drop the imaginary part for real targets"""
    c = np.asarray(contrib)
    while c.ndim > target.ndim:
        c = c.sum(axis=0)
    for axis, size in enumerate(target.shape):
        if size == 1 and c.shape[axis] != 1:
            c = c.sum(axis=axis, keepdims=True)
    if not np.iscomplexobj(target):
        c = c.real
    return np.array(c, dtype=target.dtype if target.dtype.kind in "fc" else np.float64)


def _op(operands: Sequence, out: np.ndarray, vjps: Sequence[Callable]):
    """Push `out` with one pullback per tracked operand"""
    tape = _tape_of(*operands)
    if tape is None:
        return out
    parents, fns = [], []
    for x, fn in zip(operands, vjps):
        if isinstance(x, Tracked):
            parents.append(x.index)
            fns.append(fn)

    def vjp(g):
        return tuple(fn(g) for fn in fns)

    return tape._push(np.asarray(out), tuple(parents), vjp)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    return _op((a, b), value(a) + value(b), (lambda g: g, lambda g: g))


def sub(a, b):
    return _op((a, b), value(a) - value(b), (lambda g: g, lambda g: -g))


def mul(a, b):
    av, bv = value(a), value(b)
    return _op((a, b), av * bv, (lambda g: g * np.conj(bv), lambda g: g * np.conj(av)))


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    return _op((a, b), out, (lambda g: g / np.conj(bv), lambda g: -g * np.conj(out / bv)))


def neg(a):
    return _op((a,), -value(a), (lambda g: -g,))


def conj(a):
    return _op((a,), np.conj(value(a)), (lambda g: np.conj(g),))


def real(a):
    return _op((a,), np.real(value(a)).copy(), (lambda g: g,))


def imag(a):
    return _op((a,), np.imag(value(a)).copy(), (lambda g: 1j * g,))


def abs_(a):
    av = value(a)
    out = np.abs(av)
    safe = np.where(out > 0, out, 1.0)
    unit = np.where(out > 0, av / safe, 0.0)
    return _op((a,), out, (lambda g: g * unit,))


def abs2(a):
    """|a|^2, real valued"""
    av = value(a)
    return _op((a,), (av * np.conj(av)).real, (lambda g: 2.0 * g * av,))


def exp(a):
    out = np.exp(value(a))
    return _op((a,), out, (lambda g: g * np.conj(out),))


def log(a):
    av = value(a)
    return _op((a,), np.log(av), (lambda g: g / np.conj(av),))


def tanh(a):
    out = np.tanh(value(a))
    return _op((a,), out, (lambda g: g * (1.0 - out * out),))


def sigmoid(a):
    out = expit(value(a))
    return _op((a,), out, (lambda g: g * out * (1.0 - out),))


def softplus(a):
    av = value(a)
    return _op((a,), np.logaddexp(0.0, av), (lambda g: g * expit(av),))


def relu(a):
    """max(a, 0) elementwise; the pullback is zero wherever a <= 0"""
    av = value(a)
    mask = (av > 0).astype(np.float64)
    return _op((a,), av * mask, (lambda g: g * mask,))


# ---------------------------------------------------------------------------
# reductions and structure
# ---------------------------------------------------------------------------

def sum_(a, axis=None):
    av = value(a)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, av.shape)
        return np.broadcast_to(np.expand_dims(g, axis), av.shape)

    return _op((a,), np.asarray(av.sum(axis=axis)), (vjp,))


def mean(a, axis=None):
    av = value(a)
    count = av.size if axis is None else av.shape[axis]
    return div(sum_(a, axis), float(count))


def amax(a):
    """Maximum over all entries of a real array; ties go to the first index"""
    av = value(a)
    flat = int(np.argmax(av))

    def vjp(g):
        ga = np.zeros(av.shape, dtype=np.float64)
        ga.flat[flat] = np.asarray(g).reshape(())
        return ga

    return _op((a,), np.asarray(av.flat[flat]), (vjp,))


def getitem(a, key):
    av = value(a)

    def vjp(g):
        ga = np.zeros(av.shape, dtype=np.result_type(av.dtype, np.asarray(g).dtype))
        np.add.at(ga, key, g)
        return ga

    return _op((a,), np.array(av[key]), (vjp,))


def take(a, indices, axis: int = 0):
    av = value(a)
    idx = np.asarray(indices)
    axis = axis % av.ndim

    def vjp(g):
        ga = np.zeros(av.shape, dtype=np.result_type(av.dtype, np.asarray(g).dtype))
        moved = np.moveaxis(ga, axis, 0)
        g_moved = np.moveaxis(np.asarray(g), list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, g_moved)
        return ga

    return _op((a,), np.take(av, idx, axis=axis), (vjp,))


def scatter(a, indices, size: int):
    """Place the entries of vector `a` at `indices` of a zero vector of length `size`"""
    av = value(a)
    idx = np.asarray(indices)
    out = np.zeros(size, dtype=av.dtype if av.dtype.kind in "fc" else np.float64)
    out[idx] = av
    return _op((a,), out, (lambda g: np.asarray(g)[idx],))


def stack(items: Sequence, axis: int = 0):
    values = [value(x) for x in items]
    out = np.stack(values, axis=axis)
    vjps = [(lambda g, i=i: np.take(g, i, axis=axis)) for i in range(len(items))]
    return _op(tuple(items), out, vjps)


def concatenate(items: Sequence, axis: int = 0):
    values = [value(x) for x in items]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])
    vjps = [
        (lambda g, lo=bounds[i], hi=bounds[i + 1]: np.take(g, np.arange(lo, hi), axis=axis))
        for i in range(len(items))
    ]
    return _op(tuple(items), out, vjps)


def reshape(a, shape):
    av = value(a)
    return _op((a,), av.reshape(shape), (lambda g: np.asarray(g).reshape(av.shape),))


def transpose(a, axes=None):
    av = value(a)
    out = np.transpose(av, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _op((a,), out, (lambda g: np.transpose(g, inverse),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matvec(A, x):
    """Batched matrix-vector product  y[..., i] = sum_j A[..., i, j] x[..., j]"""
    Av, xv = value(A), value(x)
    out = np.einsum("...ij,...j->...i", Av, xv)
    return _op(
        (A, x),
        out,
        (
            lambda g: np.asarray(g)[..., :, None] * np.conj(xv)[..., None, :],
            lambda g: np.einsum("...ij,...i->...j", np.conj(Av), g),
        ),
    )


def _dense_solve(Av: np.ndarray, bv: np.ndarray) -> np.ndarray:
    try:
        x = np.linalg.solve(Av, bv[..., None])[..., 0]
    except np.linalg.LinAlgError:
        raise SingularSystemError(float(np.max(np.linalg.cond(Av))))
    if not np.all(np.isfinite(x)):
        raise SingularSystemError(float(np.max(np.linalg.cond(Av))))
    return x


def solve(A, b):
    """
    x = A^-1 b as a single tape primitive. `A` is a `Factorization` (constant),
    a constant array or a tracked array; batches of systems are supported.

    Pullback: g_b = A^-H g_x and, when A is tracked, g_A = -g_b x^H.
    """
    bv = value(b)
    if isinstance(A, Factorization):
        x = A.solve(bv)
        return _op((b,), x, (lambda g: A.solve_h(g),))

    Av = value(A)
    x = _dense_solve(Av, bv)
    AH = np.conj(np.swapaxes(Av, -1, -2))
    cache = {}

    def pull_b(g):
        if "gb" not in cache:
            cache["gb"] = _dense_solve(AH, np.asarray(g))
        return cache["gb"]

    def pull_A(g):
        gb = pull_b(g)
        return -gb[..., :, None] * np.conj(x)[..., None, :]

    return _op((A, b), x, (pull_A, pull_b))
