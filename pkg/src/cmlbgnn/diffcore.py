"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the primitives the model needs are provided. Operations record onto
the active :class:`Tape`; outside a tape nothing is recorded, which is how
evaluation runs without gradient bookkeeping.

    with Tape() as tape:
        loss = f(params)
    tape.backward(loss)
"""

import contextvars
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigError, DimensionError, DomainError, EvaluationError

_ACTIVE_TAPE = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    # make numpy defer to our reflected operators (ndarray * Tensor -> Tensor)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise DomainError(f"non-finite value in tensor{' ' + name if name else ''}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records primitive applications in creation (hence topological) order."""

    def __init__(self):
        self.nodes = []
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        return False

    def backward(self, out):
        if out.data.size != 1:
            raise DimensionError(f"backward needs a scalar output, got shape {out.shape}")
        if not out.requires_grad:
            return
        out.grad = np.ones_like(out.data)
        for node in reversed(self.nodes):
            if node.grad is not None:
                node._backward(node.grad)
        # free intermediate buffers; leaf grads stay
        for node in self.nodes:
            if node is not out:
                node.grad = None
            node._backward = None
            node._parents = ()


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _result(data, parents, backward):
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise DomainError("operation produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out.name = None
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        tape.nodes.append(out)
    return out


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def neg(a):
    return mul(a, -1.0)


def pow_scalar(a, p):
    a = as_tensor(a)
    if p < 0 and (a.data <= 0).any():
        raise DomainError("negative power of a non-positive entry")

    def bw(g):
        _accum(a, g * p * a.data ** (p - 1))

    return _result(a.data**p, (a,), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not conform")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), bw)


def linear(x, W, b):
    """y = x W + b over the last axis of ``x``; leading axes are batch."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(
            f"linear: x{x.shape} W{W.shape} b{b.shape} do not conform"
        )

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            _accum(x, g @ W.data.T)
        if W.requires_grad:
            _accum(W, x.data.reshape(-1, x.shape[-1]).T @ g2)
        if b.requires_grad:
            _accum(b, g2.sum(axis=0))

    return _result(x.data @ W.data + b.data, (x, W, b), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), bw)


def transpose(a):
    """Swap the last two axes."""
    a = as_tensor(a)

    def bw(g):
        _accum(a, np.swapaxes(g, -1, -2))

    return _result(np.swapaxes(a.data, -1, -2), (a,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, cuts, axis=axis)):
            _accum(t, part)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def index(a, idx):
    """Basic (slice/integer) indexing."""
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        _accum(a, full)

    return _result(a.data[idx], (a,), bw)


def clip(a, lo, hi):
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _accum(a, g * inside)

    return _result(np.clip(a.data, lo, hi), (a,), bw)


# ---------------------------------------------------------------------------
# elementwise maps
# ---------------------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def elementwise(op_name, x, slope=0.01):
    x = as_tensor(x)
    d = x.data
    if op_name == "sigmoid":
        y = _sigmoid(d)
        dy = lambda: y * (1.0 - y)
    elif op_name == "tanh":
        y = np.tanh(d)
        dy = lambda: 1.0 - y * y
    elif op_name == "leaky_relu":
        y = np.where(d > 0, d, slope * d)
        dy = lambda: np.where(d > 0, 1.0, slope)
    elif op_name == "exp":
        with np.errstate(over="ignore"):  # overflow surfaces as a DomainError from _result
            y = np.exp(d)
        dy = lambda: y
    elif op_name == "log":
        if (d <= 0).any():
            raise DomainError("log of a non-positive entry")
        y = np.log(d)
        dy = lambda: 1.0 / d
    elif op_name == "softplus":
        y = np.logaddexp(0.0, d)
        dy = lambda: _sigmoid(d)
    elif op_name == "abs":
        y = np.abs(d)
        dy = lambda: np.sign(d)
    else:
        raise ValueError(f"unknown elementwise op {op_name!r}")

    def bw(g):
        _accum(x, g * dy())

    return _result(y, (x,), bw)


def sigmoid(x):
    return elementwise("sigmoid", x)


def tanh(x):
    return elementwise("tanh", x)


def leaky_relu(x, slope=0.01):
    return elementwise("leaky_relu", x, slope)


def exp(x):
    return elementwise("exp", x)


def log(x):
    return elementwise("log", x)


def softplus(x):
    return elementwise("softplus", x)


# ---------------------------------------------------------------------------
# fused kernels
# ---------------------------------------------------------------------------


def pairwise_absdiff(h):
    """[B, V, D] -> [B, V, V, D] with entry (b, i, j) = |h_bi - h_bj|.

    The derivative of |0| is taken as 0.
    """
    h = as_tensor(h)
    if h.ndim != 3:
        raise DimensionError(f"pairwise_absdiff expects [B, V, D], got {h.shape}")

    def bw(g):
        _accum(h, _kernels.absdiff_bwd(h.data, g))

    return _result(_kernels.absdiff_fwd(h.data), (h,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Standardise over the last axis, then apply a per-feature affine map."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    D = x.shape[-1]
    if gain.shape != (D,) or bias.shape != (D,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({D},)")
    xhat, rstd = _kernels.layernorm_fwd(x.data.reshape(-1, D), eps)

    def bw(g):
        g2 = g.reshape(-1, D)
        if gain.requires_grad:
            _accum(gain, (g2 * xhat).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g2.sum(axis=0))
        if x.requires_grad:
            _accum(x, _kernels.layernorm_bwd(xhat, rstd, g2 * gain.data).reshape(x.shape))

    y = xhat.reshape(x.shape) * gain.data + bias.data
    return _result(y, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream.

    A stream is fully described by ``(seed, counter, path)``; calling
    :meth:`sub` derives an independent child keyed by extra integers, so
    draws never depend on evaluation order.
    """

    seed: int
    counter: int = 0
    path: tuple = field(default=())

    def sub(self, *keys):
        return RngStream(self.seed, self.counter, self.path + tuple(int(k) for k in keys))

    def advance(self, n=1):
        return RngStream(self.seed, self.counter + n, self.path)

    def generator(self):
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, self.counter, *self.path]
        return np.random.default_rng(np.random.SeedSequence(entropy))

    def normal(self, shape):
        return self.generator().standard_normal(shape)

    def uniform(self, shape):
        return self.generator().random(shape)


def dropout(x, rate, train, rng, u=None):
    """Inverted dropout: survivors are scaled by 1/(1 - rate) at train time.

    ``u`` optionally supplies the uniform draws instead of ``rng``.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    if u is None:
        u = rng.uniform(x.shape)
    keep = (u >= rate) / (1.0 - rate)
    return mul(x, keep)


def gaussian_sample(mu, sigma2, rng, eps=None):
    """Reparameterised draw mu + sqrt(sigma2) * eps with eps ~ N(0, 1).

    Where sigma2 is exactly zero the derivative w.r.t. sigma2 is taken as 0.
    """
    mu, sigma2 = as_tensor(mu), as_tensor(sigma2)
    if (sigma2.data < 0).any():
        raise DomainError("negative variance")
    if eps is None:
        eps = rng.normal(np.broadcast_shapes(mu.shape, sigma2.shape))
    sd = np.sqrt(sigma2.data)

    def bw(g):
        _accum(mu, _unbroadcast(g, mu.shape))
        if sigma2.requires_grad:
            with np.errstate(divide="ignore", invalid="ignore"):
                d = np.where(sd > 0, eps / (2.0 * np.where(sd > 0, sd, 1.0)), 0.0)
            _accum(sigma2, _unbroadcast(g * d, sigma2.shape))

    return _result(mu.data + sd * eps, (mu, sigma2), bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_param: dict
    n_entries: int

    @property
    def passed(self):
        return self.max_rel_error < self.tol

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"max relative error {self.max_rel_error:.3e} over {self.n_entries} entries "
            f"(tol {self.tol:.0e}): {verdict}"
        )


def rel_error(a, n, floor):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(f, params, eps=1e-6, tol=1e-4, floor=1e-8):
    """Compare tape gradients of scalar ``f()`` against central differences.

    ``f`` takes no arguments and must read ``params`` by reference; it has to
    be deterministic (fix every RngStream it uses). Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")

    def value():
        try:
            out = f()
        except DomainError as exc:
            raise EvaluationError(f"f failed to evaluate: {exc}") from exc
        v = float(np.asarray(out.data if isinstance(out, Tensor) else out).reshape(()))
        if not np.isfinite(v):
            raise EvaluationError("f returned a non-finite value")
        return v

    for p in params:
        p.requires_grad = True
        p.zero_grad()
    with Tape() as tape:
        out = f()
    tape.backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    per_param = {}
    worst = 0.0
    count = 0
    for k, (p, ga) in enumerate(zip(params, analytic)):
        gn = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = value()
            flat[i] = old - eps
            fm = value()
            flat[i] = old
            gn.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
        err = float(rel_error(ga, gn, floor).max()) if gn.size else 0.0
        per_param[p.name or f"param{k}"] = {"analytic": ga, "numeric": gn, "max_rel_error": err}
        worst = max(worst, err)
        count += gn.size
    return GradCheckReport(worst, tol, per_param, count)
