"""Dense tensors recorded on an explicit tape for reverse-mode gradients.

Values are plain NumPy arrays; every differentiable operation appends one
node to the active tape.  A tape is scoped to a single forward pass and can
be backpropagated exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericError


class Tensor:
    """Immutable dense array, optionally tied to a node on a Tape."""

    __slots__ = ("data", "tape", "node")

    # make ndarray <op> Tensor defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, data, tape=None, node=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Copy of the value with no tape connection (zero gradient)."""
        return Tensor(self.data)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def __repr__(self):
        tag = "" if self.node is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}{tag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    """Append-only record of one forward pass; single-writer."""

    __slots__ = ("_parents", "_fns", "_consumed")

    def __init__(self):
        self._parents: list[tuple] = []
        self._fns: list = []
        self._consumed = False

    def __len__(self):
        return len(self._parents)

    def _push(self, parents, fn) -> int:
        self._parents.append(parents)
        self._fns.append(fn)
        return len(self._parents) - 1

    def leaf(self, data, dtype=None) -> Tensor:
        """Register an input (parameter or constant wanting a gradient)."""
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        nid = self._push((), None)
        return Tensor(arr, self, nid)

    def backward(self, loss: Tensor) -> "GradMap":
        """Run reverse accumulation from a scalar loss on this tape."""
        if self._consumed:
            raise ContractError("tape already backpropagated; record a new forward pass")
        if loss.tape is not self or loss.node is None:
            raise ContractError("loss does not live on this tape")
        if loss.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        self._consumed = True
        grads: list = [None] * len(self._parents)
        grads[loss.node] = np.ones_like(loss.data)
        for nid in range(loss.node, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            fn = self._fns[nid]
            if fn is None:
                continue
            for pid, pg in zip(self._parents[nid], fn(g)):
                if pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
        return GradMap(self, grads)


class GradMap:
    """Gradients keyed by tape node; unreachable tensors read as zero."""

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def get(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape or t.node is None:
            return np.zeros_like(t.data)
        g = self._grads[t.node]
        if g is None:
            return np.zeros_like(t.data)
        return np.broadcast_to(g, t.data.shape).astype(t.dtype, copy=False)


# ---------------------------------------------------------------------------
# recording helpers


class _Rec:
    """Collects tape dependencies for one operation's output."""

    __slots__ = ("tape", "parents", "fns")

    def __init__(self, *inputs):
        tape = None
        for t in inputs:
            if isinstance(t, Tensor) and t.tape is not None:
                if tape is None:
                    tape = t.tape
                elif tape is not t.tape:
                    raise ContractError("inputs recorded on different tapes")
        self.tape = tape
        self.parents = []
        self.fns = []

    def dep(self, t, fn):
        if isinstance(t, Tensor) and t.node is not None:
            self.parents.append(t.node)
            self.fns.append(fn)

    def out(self, data) -> Tensor:
        if self.tape is None or not self.parents:
            return Tensor(data)
        fns = tuple(self.fns)
        nid = self.tape._push(tuple(self.parents), lambda g: [f(g) for f in fns])
        return Tensor(data, self.tape, nid)


def _as_tensor(x, like=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if isinstance(like, Tensor) else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes introduced or stretched by broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    r = _Rec(a, b)
    r.dep(a, lambda g: _unbroadcast(g, a.data.shape))
    r.dep(b, lambda g: _unbroadcast(g, b.data.shape))
    return r.out(a.data + b.data)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    r = _Rec(a, b)
    r.dep(a, lambda g: _unbroadcast(g, a.data.shape))
    r.dep(b, lambda g: _unbroadcast(-g, b.data.shape))
    return r.out(a.data - b.data)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    r = _Rec(a, b)
    r.dep(a, lambda g: _unbroadcast(g * b.data, a.data.shape))
    r.dep(b, lambda g: _unbroadcast(g * a.data, b.data.shape))
    return r.out(a.data * b.data)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    r = _Rec(a, b)
    r.dep(a, lambda g: _unbroadcast(g / b.data, a.data.shape))
    r.dep(b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
    return r.out(a.data / b.data)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    r = _Rec(a)
    r.dep(a, lambda g: -g)
    return r.out(-a.data)


# ---------------------------------------------------------------------------
# matrix products


def matmul(a, b) -> Tensor:
    """2-D matrix product with gradients for both operands."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    r = _Rec(a, b)
    r.dep(a, lambda g: g @ b.data.T)
    r.dep(b, lambda g: a.data.T @ g)
    return r.out(a.data @ b.data)


def bmm(a, b) -> Tensor:
    """Batched matrix product: (B,m,k) @ (B,k,n) -> (B,m,n)."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm shapes incompatible: {a.shape} x {b.shape}")
    r = _Rec(a, b)
    r.dep(a, lambda g: g @ np.swapaxes(b.data, 1, 2))
    r.dep(b, lambda g: np.swapaxes(a.data, 1, 2) @ g)
    return r.out(a.data @ b.data)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    r = _Rec(a)
    r.dep(a, lambda g: g * mask)
    return r.out(a.data * mask)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    r = _Rec(a)
    r.dep(a, lambda g: g * out * (1.0 - out))
    return r.out(out)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    r = _Rec(a)
    r.dep(a, lambda g: g * out)
    return r.out(out)


def log(a) -> Tensor:
    a = _as_tensor(a)
    r = _Rec(a)
    r.dep(a, lambda g: g / a.data)
    return r.out(np.log(a.data))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    r = _Rec(a)
    r.dep(a, lambda g: g * (0.5 / out))
    return r.out(out)


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)
    r = _Rec(a)
    r.dep(a, lambda g: g * sign)
    return r.out(np.abs(a.data))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    a = _as_tensor(a)
    out = np.logaddexp(np.zeros((), dtype=a.dtype), a.data)
    r = _Rec(a)
    r.dep(a, lambda g: g / (1.0 + np.exp(-a.data)))
    return r.out(out)


def sin(a) -> Tensor:
    a = _as_tensor(a)
    r = _Rec(a)
    r.dep(a, lambda g: g * np.cos(a.data))
    return r.out(np.sin(a.data))


def cos(a) -> Tensor:
    a = _as_tensor(a)
    r = _Rec(a)
    r.dep(a, lambda g: -g * np.sin(a.data))
    return r.out(np.cos(a.data))


def maximum(a, b) -> Tensor:
    a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    pick_a = a.data >= b.data
    r = _Rec(a, b)
    r.dep(a, lambda g: _unbroadcast(g * pick_a, a.data.shape))
    r.dep(b, lambda g: _unbroadcast(g * ~pick_a, b.data.shape))
    return r.out(np.where(pick_a, a.data, b.data))


def minimum(a, b) -> Tensor:
    a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    pick_a = a.data <= b.data
    r = _Rec(a, b)
    r.dep(a, lambda g: _unbroadcast(g * pick_a, a.data.shape))
    r.dep(b, lambda g: _unbroadcast(g * ~pick_a, b.data.shape))
    return r.out(np.where(pick_a, a.data, b.data))


def clamp(a, lo, hi) -> Tensor:
    """Clip to [lo, hi]; gradient is zero outside the interval."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    r = _Rec(a)
    r.dep(a, lambda g: g * inside)
    return r.out(np.clip(a.data, lo, hi))


def logit(a, eps=1e-7) -> Tensor:
    """Inverse sigmoid with clamping away from {0, 1}."""
    a = clamp(a, eps, 1.0 - eps)
    return log(a) - log(1.0 - a)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=False)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=False)

    r = _Rec(a)
    r.dep(a, bwd)
    return r.out(out)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    r = _Rec(a)
    r.dep(a, lambda g: g.reshape(a.data.shape))
    return r.out(a.data.reshape(shape))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    inv = tuple(np.argsort(axes))
    r = _Rec(a)
    r.dep(a, lambda g: g.transpose(inv))
    return r.out(a.data.transpose(axes))


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)
    r = _Rec(*tensors)
    for i, t in enumerate(tensors):
        lo, hi = offsets[i], offsets[i + 1]

        def bwd(g, lo=lo, hi=hi):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        r.dep(t, bwd)
    return r.out(np.concatenate(datas, axis=axis))


def narrow(a, axis, start, length) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = _as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bwd(g):
        z = np.zeros_like(a.data)
        z[sl] = g
        return z

    r = _Rec(a)
    r.dep(a, bwd)
    return r.out(a.data[sl])


def getitem(a, key) -> Tensor:
    """Basic indexing on axis 0 (int, slice, or index array)."""
    a = _as_tensor(a)
    if isinstance(key, (list, np.ndarray)):
        return take_rows(a, np.asarray(key))

    def bwd(g):
        z = np.zeros_like(a.data)
        z[key] = g
        return z

    r = _Rec(a)
    r.dep(a, bwd)
    return r.out(a.data[key])


def take_rows(a, idx) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def bwd(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return z

    r = _Rec(a)
    r.dep(a, bwd)
    return r.out(a.data[idx])


def stop_grad(a) -> Tensor:
    return Tensor(_as_tensor(a).data)


# ---------------------------------------------------------------------------
# composite layers


def softmax(a, axis=-1) -> Tensor:
    """Max-subtracted stable softmax along `axis`."""
    a = _as_tensor(a)
    if a.data.size == 0 or a.shape[axis] < 1:
        raise DimensionError(f"softmax needs a non-empty axis, got shape {a.shape}")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input contains non-finite values")
    shifted = a - a.data.max(axis=axis, keepdims=True)
    e = exp(shifted)
    return e / tsum(e, axis=axis, keepdims=True)


def layer_norm(x, gain, bias, eps=1e-5) -> Tensor:
    """Per-vector normalization over the last axis, then affine."""
    x = _as_tensor(x)
    d = x.shape[-1]
    if d < 1:
        raise DimensionError("layer_norm needs a non-empty last axis")
    if eps <= 0:
        raise DimensionError("layer_norm eps must be positive")
    mu = tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tmean(centered * centered, axis=-1, keepdims=True)
    normed = centered / sqrt(var + eps)
    return normed * gain + bias


def bilinear_sample(grid, points) -> Tensor:
    """Sample a (H, W, d) grid at P normalized (x, y) points.

    Cell (i, j) has center ((j+0.5)/W, (i+0.5)/H); coordinates outside the
    grid are clamped to the border.  Gradients flow to the grid values and
    to the point coordinates.
    """
    grid = _as_tensor(grid)
    points = _as_tensor(points, grid)
    if grid.ndim != 3 or grid.data.size == 0:
        raise DimensionError(f"bilinear_sample grid must be non-empty H x W x d, got {grid.shape}")
    if points.ndim != 2 or points.shape[1] != 2:
        raise DimensionError(f"points must be P x 2, got {points.shape}")
    if not np.all(np.isfinite(points.data)):
        raise NumericError("bilinear_sample points contain non-finite values")
    h, w, d = grid.shape
    px = points.data[:, 0]
    py = points.data[:, 1]

    u = px * w - 0.5
    v = py * h - 0.5
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    j0 = np.minimum(np.floor(uc), w - 2 if w > 1 else 0).astype(np.intp)
    i0 = np.minimum(np.floor(vc), h - 2 if h > 1 else 0).astype(np.intp)
    j0 = np.maximum(j0, 0)
    i0 = np.maximum(i0, 0)
    j1 = np.minimum(j0 + 1, w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    tx = (uc - j0).astype(grid.dtype)
    ty = (vc - i0).astype(grid.dtype)

    g = grid.data
    c00 = g[i0, j0]
    c01 = g[i0, j1]
    c10 = g[i1, j0]
    c11 = g[i1, j1]
    txe = tx[:, None]
    tye = ty[:, None]
    out = ((1 - txe) * (1 - tye) * c00 + txe * (1 - tye) * c01
           + (1 - txe) * tye * c10 + txe * tye * c11)

    flat_idx00 = i0 * w + j0
    flat_idx01 = i0 * w + j1
    flat_idx10 = i1 * w + j0
    flat_idx11 = i1 * w + j1

    def bwd_grid(go):
        z = np.zeros((h * w, d), dtype=g.dtype)
        np.add.at(z, flat_idx00, go * (1 - txe) * (1 - tye))
        np.add.at(z, flat_idx01, go * txe * (1 - tye))
        np.add.at(z, flat_idx10, go * (1 - txe) * tye)
        np.add.at(z, flat_idx11, go * txe * tye)
        return z.reshape(h, w, d)

    # interior mask: clamped coordinates have zero derivative
    du_active = ((u > 0.0) & (u < w - 1.0)).astype(g.dtype) * w
    dv_active = ((v > 0.0) & (v < h - 1.0)).astype(g.dtype) * h

    def bwd_points(go):
        dtx = ((1 - tye) * (c01 - c00) + tye * (c11 - c10))
        dty = ((1 - txe) * (c10 - c00) + txe * (c11 - c01))
        gx = (go * dtx).sum(axis=1) * du_active
        gy = (go * dty).sum(axis=1) * dv_active
        return np.stack([gx, gy], axis=1)

    r = _Rec(grid, points)
    r.dep(grid, bwd_grid)
    r.dep(points, bwd_points)
    return r.out(out)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    """Outcome of comparing tape gradients against central differences."""

    max_rel_err: float
    tol: float
    checked: int
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def check_gradient(f, x, h=1e-6, tol=1e-4, coords=None) -> GradCheckReport:
    """Compare the tape gradient of scalar f at x with central differences.

    f receives a leaf Tensor and must return a scalar Tensor; it is called
    once analytically and twice per checked coordinate.  `coords` limits the
    check to a subset of flat indices (default: all of them).
    """
    x0 = np.asarray(x, dtype=np.float64)
    tape = Tape()
    xt = tape.leaf(x0)
    y = f(xt)
    if y.data.size != 1:
        raise ContractError("check_gradient requires a scalar-valued function")
    analytic = tape.backward(y).get(xt).ravel()

    flat = x0.ravel()
    if coords is None:
        coords = range(flat.size)

    def feval(arr):
        t = Tape()
        return float(f(t.leaf(arr)).data.reshape(()))

    max_err = 0.0
    failures = []
    checked = 0
    for i in coords:
        checked += 1
        xp = x0.copy().ravel()
        xp[i] += h
        fp = feval(xp.reshape(x0.shape))
        xm = x0.copy().ravel()
        xm[i] -= h
        fm = feval(xm.reshape(x0.shape))
        numeric = (fp - fm) / (2.0 * h)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
        if err > max_err:
            max_err = err
        if err > tol:
            failures.append((int(i), float(a), float(numeric), float(err)))
    return GradCheckReport(max_rel_err=max_err, tol=tol, checked=checked, failures=failures)
