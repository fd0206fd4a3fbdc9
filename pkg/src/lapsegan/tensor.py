"""Dense N-d tensors with reverse-mode autodiff over a dynamically recorded tape.

All math in the package flows through this module. Each operation records its
inputs and a backward closure on the result tensor; ``backward`` replays the
recorded graph in reverse topological order and accumulates gradients into
every leaf that requires them. The tape is rebuilt on every forward pass
(define-by-run), so alternating objectives reuse the same code paths.

Axis convention is row-major (N, C, T, H, W) with a leading batch axis.
Training runs at float32; gradient checking runs at float64.
"""
from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, DomainError, IntegrityError

_grad_enabled = True


@contextmanager
def no_grad():
    """Suspend tape recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-d real array with an optional gradient slot.

    ``values`` is treated as immutable once wrapped (the optimizer mutates
    leaf parameters only between passes); ``grad`` mutates by accumulation
    during backward. The embedded graph node is the triple
    (``_op`` tag, ``_parents`` refs, ``_backward`` closure).
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, values, requires_grad=False, dtype=None):
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @staticmethod
    def _from_op(values, parents, backward, op):
        """Wrap an op result, recording the graph node if the tape is live."""
        out = Tensor.__new__(Tensor)
        out.values = values
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
            out._op = op
        return out

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self):
        return self.values.size

    @property
    def ndim(self):
        return self.values.ndim

    def item(self):
        return self.values.item()

    def __repr__(self):
        return (f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}, "
                f"requires_grad={self.requires_grad}, op={self._op!r})")

    def detach(self):
        """A view of the same values cut off from the recorded graph."""
        out = Tensor.__new__(Tensor)
        out.values = self.values
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._op = "detach"
        return out

    # -- operator sugar ------------------------------------------------

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
        return neg(self)

    def sum(self, axes=None):
        return reduce("sum", self, axes)

    def mean(self, axes=None):
        return reduce("mean", self, axes)

    def reshape(self, new_shape):
        return reshape(self, new_shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def abs(self):
        return abs_(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _accumulate(t, g):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.values)
        t.grad += g


def _binary_operands(a, b):
    """Validate a binary op's operands: equal shapes, or b a plain scalar."""
    if isinstance(b, Tensor):
        if a.values.shape != b.values.shape:
            raise DimensionError(
                f"elementwise shape mismatch: {a.values.shape} vs {b.values.shape}")
        if a.values.dtype != b.values.dtype:
            raise ContractError(
                f"dtype mismatch: {a.values.dtype} vs {b.values.dtype}")
        return b, b.values
    if np.ndim(b) != 0:
        raise DimensionError("second operand must be a tensor of equal shape or a scalar")
    return None, a.values.dtype.type(b)


# -- elementwise ops ----------------------------------------------------


def add(a, b):
    a = as_tensor(a)
    bt, bv = _binary_operands(a, b)
    out = a.values + bv

    def backward(g):
        _accumulate(a, g)
        if bt is not None:
            _accumulate(bt, g)

    parents = (a, bt) if bt is not None else (a,)
    return Tensor._from_op(out, parents, backward, "add")


def sub(a, b):
    a_is_tensor = isinstance(a, Tensor)
    if a_is_tensor:
        bt, bv = _binary_operands(a, b)
        out = a.values - bv

        def backward(g):
            _accumulate(a, g)
            if bt is not None:
                _accumulate(bt, -g)

        parents = (a, bt) if bt is not None else (a,)
        return Tensor._from_op(out, parents, backward, "sub")
    # scalar - tensor
    b = as_tensor(b)
    sv = b.values.dtype.type(a)
    out = sv - b.values

    def backward(g):
        _accumulate(b, -g)

    return Tensor._from_op(out, (b,), backward, "sub")


def mul(a, b):
    """Elementwise product; with a python scalar this is scalar-mul."""
    a = as_tensor(a)
    bt, bv = _binary_operands(a, b)
    out = a.values * bv

    def backward(g):
        _accumulate(a, g * bv)
        if bt is not None:
            _accumulate(bt, g * a.values)

    parents = (a, bt) if bt is not None else (a,)
    return Tensor._from_op(out, parents, backward, "mul")


def neg(a):
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, -g)

    return Tensor._from_op(-a.values, (a,), backward, "neg")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.values)

    def backward(g):
        _accumulate(a, g * out)

    return Tensor._from_op(out, (a,), backward, "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.values <= 0):
        raise DomainError("log requires strictly positive values")
    out = np.log(a.values)

    def backward(g):
        _accumulate(a, g / a.values)

    return Tensor._from_op(out, (a,), backward, "log")


def log1p(a):
    """log(1 + x), accurate for |x| near 0 where log(add(x, 1)) loses bits."""
    a = as_tensor(a)
    if np.any(a.values <= -1):
        raise DomainError("log1p requires values > -1")
    out = np.log1p(a.values)

    def backward(g):
        _accumulate(a, g / (1.0 + a.values))

    return Tensor._from_op(out, (a,), backward, "log1p")


def abs_(a):
    """|x| with the subgradient at 0 defined as 0."""
    a = as_tensor(a)
    out = np.abs(a.values)

    def backward(g):
        _accumulate(a, g * np.sign(a.values))

    return Tensor._from_op(out, (a,), backward, "abs")


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient passes only where the input was in range."""
    a = as_tensor(a)
    out = np.clip(a.values, lo, hi)
    inside = (a.values >= lo) & (a.values <= hi)

    def backward(g):
        _accumulate(a, g * inside)

    return Tensor._from_op(out, (a,), backward, "clamp")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-mul": mul,
    "neg": neg,
    "exp": exp,
    "log": log,
    "log1p": log1p,
    "abs": abs_,
}


def elementwise(kind, a, b=None):
    """Dispatch an elementwise op by kind tag."""
    if kind not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    fn = _ELEMENTWISE[kind]
    return fn(a) if b is None else fn(a, b)


# -- reductions and shape ops --------------------------------------------


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if np.ndim(axes) == 0:
        axes = (int(axes),)
    else:
        axes = tuple(int(ax) for ax in axes)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} invalid for rank {ndim}")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise DimensionError(f"repeated axis in {axes}")
    return tuple(sorted(norm))


def reduce(kind, a, axes=None):
    """sum or mean over the given axes (all axes when None)."""
    if kind not in ("sum", "mean"):
        raise ContractError(f"unknown reduce kind {kind!r}")
    a = as_tensor(a)
    axes = _normalize_axes(axes, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.values.sum(axis=axes)
    if kind == "mean":
        out = out / a.values.dtype.type(count)

    def backward(g):
        gx = np.expand_dims(g, axes) if axes else g
        gx = np.broadcast_to(gx, a.values.shape)
        if kind == "mean":
            gx = gx / a.values.dtype.type(count)
        _accumulate(a, gx)

    return Tensor._from_op(out, (a,), backward, kind)


def reshape(a, new_shape):
    a = as_tensor(a)
    new_shape = tuple(int(s) for s in new_shape)
    if int(np.prod(new_shape, dtype=np.int64)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} to {new_shape}")
    out = a.values.reshape(new_shape)

    def backward(g):
        _accumulate(a, g.reshape(a.values.shape))

    return Tensor._from_op(out, (a,), backward, "reshape")


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"axes {axes} is not a permutation of rank {a.ndim}")
    out = np.ascontiguousarray(a.values.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, np.ascontiguousarray(g.transpose(inverse)))

    return Tensor._from_op(out, (a,), backward, "transpose")


def matmul_batched(a, b):
    """Per-batch matrix product: (N,M,S) x (N,S,K) -> (N,M,K)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3:
        raise DimensionError("matmul_batched expects rank-3 operands")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"batch extents differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[2] != b.shape[1]:
        raise DimensionError(f"inner extents differ: {a.shape[2]} vs {b.shape[1]}")
    out = a.values @ b.values

    def backward(g):
        _accumulate(a, g @ b.values.transpose(0, 2, 1))
        _accumulate(b, a.values.transpose(0, 2, 1) @ g)

    return Tensor._from_op(out, (a, b), backward, "matmul_batched")


# -- backward pass --------------------------------------------------------


def backward(root):
    """Accumulate gradients of a scalar root into every requires_grad leaf."""
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward root does not require grad; nothing to do")

    # Iterative post-order DFS; graphs can be deep (layer chains).
    order = []
    seen = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()

    root.grad = np.ones_like(root.values)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def grad_check(f, x, step=1e-5, floor=1e-6, sample=None, rng=None):
    """Worst relative error between the analytic gradient of ``f`` and
    central finite differences, probed per element of ``x``.

    ``f`` must be a deterministic scalar-valued function of one tensor.
    ``floor`` guards the relative-error denominator against elements whose
    true gradient is ~0. With ``sample`` set, only that many randomly chosen
    elements are probed (for large inputs); pass ``rng`` to seed the choice.
    Run at float64: finite differences are unreliable at float32.
    """
    x0 = np.array(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ContractError("grad_check target must be scalar-valued")
    backward(out)
    analytic = (leaf.grad if leaf.grad is not None else np.zeros_like(x0)).ravel()

    n = x0.size
    if sample is not None and sample < n:
        if rng is None:
            rng = np.random.default_rng(0)
        idxs = rng.choice(n, size=sample, replace=False)
    else:
        idxs = range(n)

    flat = x0.ravel()
    worst = 0.0
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + step
        fp = f(Tensor(x0)).item()
        flat[i] = orig - step
        fm = f(Tensor(x0)).item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * step)
        a = analytic[i]
        denom = max(abs(a), abs(numeric), floor)
        err = abs(a - numeric) / denom
        if err > worst:
            worst = err
    return worst


# -- binary serialization --------------------------------------------------

_MAGIC = b"MDT1"
_DTYPE_BY_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODE_BY_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}


def write_array(fp, arr):
    """Write one array: magic, u32 rank, u32 extents (LE), u8 dtype code, raw values."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODE_BY_KIND:
        raise ContractError(f"unserializable dtype {arr.dtype}")
    code = _CODE_BY_KIND[arr.dtype]
    fp.write(_MAGIC)
    fp.write(struct.pack("<I", arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fp.write(struct.pack("B", code))
    fp.write(arr.astype(_DTYPE_BY_CODE[code], copy=False).tobytes(order="C"))


def _read_exact(fp, n, what):
    data = fp.read(n)
    if len(data) != n:
        raise IntegrityError(f"truncated tensor block while reading {what}")
    return data


def read_array(fp):
    """Read one array written by ``write_array``."""
    magic = _read_exact(fp, 4, "magic")
    if magic != _MAGIC:
        raise IntegrityError(f"bad tensor magic {magic!r}")
    rank, = struct.unpack("<I", _read_exact(fp, 4, "rank"))
    if rank > 32:
        raise IntegrityError(f"implausible tensor rank {rank}")
    extents = struct.unpack(f"<{rank}I", _read_exact(fp, 4 * rank, "extents"))
    code, = struct.unpack("B", _read_exact(fp, 1, "dtype"))
    if code not in _DTYPE_BY_CODE:
        raise IntegrityError(f"unknown dtype code {code}")
    dtype = _DTYPE_BY_CODE[code]
    count = int(np.prod(extents, dtype=np.int64)) if rank else 1
    raw = _read_exact(fp, count * dtype.itemsize, "values")
    arr = np.frombuffer(raw, dtype=dtype).reshape(extents)
    # native byte order, writable copy
    return np.ascontiguousarray(arr.astype(dtype.newbyteorder("="), copy=True))


def save_array(path, arr):
    with open(path, "wb") as fp:
        write_array(fp, arr)


def load_array(path):
    with open(path, "rb") as fp:
        return read_array(fp)
