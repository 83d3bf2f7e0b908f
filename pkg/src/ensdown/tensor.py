"""Dense float64 arrays with reverse-mode automatic differentiation.

Small numpy-backed tape engine: enough ops to express a conv net with a
Gaussian head and differentiate its loss. Deliberately restrictive --
no broadcasting beyond bias addition, no views into tracked storage,
everything float64.
"""

from __future__ import annotations

import itertools

import numpy as np

_SEQ = itertools.count()


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


class GraphError(RuntimeError):
    """Backward pass requested on an unusable graph."""


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode autodiff.

    ``requires_grad`` marks leaves whose gradients are wanted; outputs of
    operations on tracked tensors are tracked automatically. Gradients
    accumulate in ``.grad`` (None until first accumulation).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        # asarray with order="C" keeps 0-d shapes (ascontiguousarray would not)
        arr = np.asarray(data, dtype=np.float64, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = None
        self._seq = next(_SEQ)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag}, op={self._op!r})"

    # arithmetic sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, shape):
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"operation '{op}' produced non-finite values")
    return arr


def _from_op(data, parents, vjp, op: str) -> Tensor:
    out = Tensor(_check_finite(np.asarray(data, dtype=np.float64), op))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    out._op = op
    return out


class GradTape:
    """Execution-ordered record of the operations reachable from a root.

    Tensors are numbered at creation, and an operation's output is always
    created after its inputs, so ascending creation order is a valid
    execution order. ``replay_backward`` visits each recorded operation
    exactly once, in reverse.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "GradTape":
        seen = {id(root)}
        stack = [root]
        ops = []
        while stack:
            t = stack.pop()
            if t._parents:
                ops.append(t)
                for p in t._parents:
                    if id(p) not in seen:
                        seen.add(id(p))
                        stack.append(p)
        ops.sort(key=lambda t: t._seq)
        return cls(ops)

    def replay_backward(self, visit=None):
        for node in reversed(self.nodes):
            gout = node.grad
            if gout is None:
                # no consumer contributed a gradient; nothing flows upstream
                node._parents, node._vjp = (), None
                continue
            if visit is not None:
                visit(node)
            for parent, g in zip(node._parents, node._vjp(gout)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            node._parents, node._vjp, node.grad = (), None, None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked leaf reachable from a scalar loss.

    The tape is consumed: a second backward through the same graph raises.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not connected to any tensor with requires_grad=True")
    if loss._op is not None and loss._vjp is None:
        raise GraphError("tape already consumed; rebuild the graph before calling backward again")
    tape = GradTape.trace(loss)
    loss.grad = np.ones_like(loss.data)
    tape.replay_backward()


# ---------------------------------------------------------------------------
# elementwise and reduction ops

def add(a, b) -> Tensor:
    """Elementwise sum; the only broadcast allowed is a trailing bias vector."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        def vjp(g):
            return g, g
        return _from_op(a.data + b.data, (a, b), vjp, "add")
    if b.data.ndim == 1 and a.data.ndim == 2 and a.shape[1] == b.shape[0]:
        def vjp(g):
            return g, g.sum(axis=0)
        return _from_op(a.data + b.data, (a, b), vjp, "add_bias")
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        return g, -g

    return _from_op(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product with an equal-shaped tensor or a python scalar."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)

        def vjp(g):
            return (g * c,)

        return _from_op(a.data * c, (a,), vjp, "scale")
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        return g * b.data, g * a.data

    return _from_op(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / float(b))
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}")
    out = a.data / b.data

    def vjp(g):
        return g / b.data, -g * out / b.data

    return _from_op(out, (a, b), vjp, "div")


def add_scalar(a, c: float) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (g,)

    return _from_op(a.data + float(c), (a,), vjp, "add_scalar")


def square(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (g * (2.0 * a.data),)

    return _from_op(a.data * a.data, (a,), vjp, "square")


def log(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (g / a.data,)

    return _from_op(np.log(a.data), (a,), vjp, "log")


def relu(a) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken to be 0."""
    a = _as_tensor(a)
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _from_op(np.where(mask, a.data, 0.0), (a,), vjp, "relu")


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed stably; derivative is the logistic sigmoid."""
    a = _as_tensor(a)

    def vjp(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
        return (g * sig,)

    return _from_op(np.logaddexp(0.0, a.data), (a,), vjp, "softplus")


def tsum(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (np.full_like(a.data, float(g)),)

    return _from_op(a.data.sum(), (a,), vjp, "sum")


def tmean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size

    def vjp(g):
        return (np.full_like(a.data, float(g) / n),)

    return _from_op(a.data.mean(), (a,), vjp, "mean")


# ---------------------------------------------------------------------------
# shape ops

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.data.shape

    def vjp(g):
        return (g.reshape(old),)

    return _from_op(a.data.reshape(shape), (a,), vjp, "reshape")


def flatten(a) -> Tensor:
    """[N, C, H, W] -> [N, C*H*W], row-major; invertible via reshape."""
    a = _as_tensor(a)
    if a.data.ndim != 4:
        raise ShapeError(f"flatten expects a 4-d tensor, got shape {a.shape}")
    n = a.shape[0]
    return reshape(a, (n, a.data.size // n))


def slice_cols(a, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a 2-d tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols expects a 2-d tensor, got shape {a.shape}")
    if not (0 <= start <= stop <= a.shape[1]):
        raise ShapeError(f"slice_cols: bad range [{start}, {stop}) for shape {a.shape}")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _from_op(a.data[:, start:stop].copy(), (a,), vjp, "slice_cols")


# ---------------------------------------------------------------------------
# linear-algebra ops

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _from_op(a.data @ b.data, (a, b), vjp, "matmul")


def dense(x, weights, bias) -> Tensor:
    """Affine map x @ W + b for x [N, F], W [F, O], b [O]."""
    return add(matmul(x, weights), bias)


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Zero-padded 'same' patches of x [N,C,H,W] as [N, C*kh*kw, H*W]."""
    n, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    xp[:, :, ph:ph + h, pw:pw + w] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # win: [N, C, H, W, kh, kw] -> [N, C, kh, kw, H, W] -> flat patches
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, h * w)


def _corr_same(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Raw 'same' cross-correlation of x [N,Ci,H,W] with k [Co,Ci,kh,kw]."""
    n, _, h, w = x.shape
    co = k.shape[0]
    patches = _im2col(x, k.shape[2], k.shape[3])
    out = np.matmul(k.reshape(co, -1), patches)  # [N, Co, H*W]
    return out.reshape(n, co, h, w)


def conv2d(x, kernels, bias, padding: str = "same") -> Tensor:
    """Cross-correlation with 'same' zero padding and stride 1.

    x [N, C_in, H, W], kernels [C_out, C_in, kH, kW] with odd kH, kW,
    bias [C_out]. Output [N, C_out, H, W].
    """
    x, kernels, bias = _as_tensor(x), _as_tensor(kernels), _as_tensor(bias)
    if padding != "same":
        raise ShapeError(f"conv2d supports only 'same' padding, got {padding!r}")
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d [N,C,H,W], got shape {x.shape}")
    if kernels.data.ndim != 4:
        raise ShapeError(f"conv2d kernels must be 4-d [Co,Ci,kH,kW], got shape {kernels.shape}")
    n, ci, h, w = x.shape
    co, ci_k, kh, kw = kernels.shape
    if ci_k != ci:
        raise ShapeError(f"conv2d: input has {ci} channels but kernels expect {ci_k}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel dims must be odd, got {kh}x{kw}")
    if bias.data.shape != (co,):
        raise ShapeError(f"conv2d bias must have shape ({co},), got {bias.shape}")

    patches = _im2col(x.data, kh, kw)  # cached for the kernel gradient
    out = np.matmul(kernels.data.reshape(co, -1), patches).reshape(n, co, h, w)
    out += bias.data[:, None, None]

    def vjp(g):
        gx = gk = gb = None
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if kernels.requires_grad:
            g_flat = g.reshape(n, co, h * w)
            # tensordot lowers to BLAS; einsum here would not
            gk = np.tensordot(g_flat, patches, axes=([0, 2], [0, 2])).reshape(kernels.data.shape)
        if x.requires_grad:
            # gradient w.r.t. input is the 'same' correlation of g with the
            # spatially flipped, channel-transposed kernels
            k_t = np.ascontiguousarray(kernels.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = _corr_same(g, k_t)
        return gx, gk, gb

    return _from_op(out, (x, kernels, bias), vjp, "conv2d")


# ---------------------------------------------------------------------------
# gradient verification

def finite_diff_check(f, params, epsilon: float = 1e-5, floor: float = 1e-6) -> float:
    """Compare the backward-pass gradient of ``f()`` against central differences.

    ``f`` must rebuild and return the scalar loss Tensor from the current
    ``.data`` of ``params`` on each call. Returns the worst per-coordinate
    relative error |g - fd| / max(|g|, |fd|, floor).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.ravel()
        ga_flat = ga.ravel()
        for i in range(flat.size):
            v = flat[i]
            flat[i] = v + epsilon
            f_plus = float(f().data)
            flat[i] = v - epsilon
            f_minus = float(f().data)
            flat[i] = v
            fd = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(ga_flat[i] - fd) / max(abs(ga_flat[i]), abs(fd), floor)
            worst = max(worst, err)
    return worst
