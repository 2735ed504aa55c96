"""Dense float64 tensors with reverse-mode automatic differentiation.

Feature maps follow the [C,H,W] convention, with an optional leading set
axis ([N,C,H,W]) so a whole image set can move through an op in one call.
The only implicit broadcasts are the per-channel bias inside conv2d, the
per-channel affine inside batch_norm, and the explicit gate/expand ops;
every other shape mismatch raises immediately.

Gradients are exact reverse-mode: each op records vector-Jacobian-product
closures for the parents that need gradients, and backward() walks the
graph once in reverse topological order using a local adjoint table, so
repeated backward calls over a shared graph never contaminate each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import NumericalError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A dense float64 array plus an optional backprop record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()  # tuple of (parent Tensor, vjp closure)
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def sum(self) -> "Tensor":
        return sum_all(self)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, op: str, links) -> Tensor:
    """Wrap an op result; links is [(parent, vjp)] for all parents."""
    out = Tensor(data)
    needed = tuple((p, vjp) for p, vjp in links if p.requires_grad)
    if needed:
        out.requires_grad = True
        out._parents = needed
        out._op = op
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, "add", [(a, lambda g: g), (b, lambda g: g)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _result(a.data - b.data, "sub", [(a, lambda g: g), (b, lambda g: -g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return _result(
        a.data * b.data,
        "mul",
        [(a, lambda g: g * b.data), (b, lambda g: g * a.data)],
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, "scale", [(a, lambda g: g * c)])


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data + c, "add_scalar", [(a, lambda g: g)])


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(
        np.asarray(a.data.sum()),
        "sum",
        [(a, lambda g: np.broadcast_to(g, shape))],
    )


def sum_channels(a: Tensor) -> Tensor:
    """Sum over the channel axis: [C,H,W] -> [H,W] or [N,C,H,W] -> [N,H,W]."""
    if a.data.ndim == 3:
        axis = 0
    elif a.data.ndim == 4:
        axis = 1
    else:
        raise ValueError(f"sum_channels: expected 3D or 4D input, got {a.shape}")
    shape = a.shape
    return _result(
        a.data.sum(axis=axis),
        "sum_channels",
        [(a, lambda g: np.broadcast_to(np.expand_dims(g, axis), shape))],
    )


# ---------------------------------------------------------------------------
# activations


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x)."""
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = x * phi_cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return g * (phi_cdf + x * pdf)

    return _result(out, "gelu", [(a, vjp)])


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    return _result(s, "sigmoid", [(a, lambda g: g * s * (1.0 - s))])


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    x = a.data
    out = np.where(x > 0, x, slope * x)
    return _result(out, "leaky_relu", [(a, lambda g: g * np.where(x > 0, 1.0, slope))])


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, k: int, p: int) -> np.ndarray:
    """[n,c,h,w] -> [n, c*k*k, ho*wo] patch matrix for stride-1 correlation."""
    n, c, h, w = x.shape
    ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p > 0 else x
    cols = np.empty((n, c, k, k, ho * wo))
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx, :] = xp[:, :, dy : dy + ho, dx : dx + wo].reshape(n, c, -1)
    return cols.reshape(n, c * k * k, ho * wo)


def conv2d(input: Tensor, weight: Tensor, bias: Tensor | None, padding: int = 0) -> Tensor:
    """Cross-correlation of [C_in,H,W] or [N,C_in,H,W] with [C_out,C_in,k,k].

    Stride is fixed at 1; padding=(k-1)//2 preserves the spatial size.
    """
    squeeze = input.data.ndim == 3
    x = input.data[None] if squeeze else input.data
    if x.ndim != 4:
        raise ValueError(f"conv2d: expected 3D or 4D input, got {input.shape}")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d: weight must be [C_out,C_in,k,k], got {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_w, k, _ = weight.shape
    if k % 2 != 1:
        raise ValueError(f"conv2d: kernel size must be odd, got {k}")
    if cin != cin_w:
        raise ValueError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    p = int(padding)
    if not 0 <= p <= k - 1:
        raise ValueError(f"conv2d: padding must lie in [0, k-1], got {p}")
    ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {k} too large for padded input {h}x{w}")

    cols = _im2col(x, k, p)  # [n, cin*k*k, ho*wo]
    wmat = weight.data.reshape(cout, cin * k * k)
    out = np.matmul(wmat, cols)  # [n, cout, ho*wo]
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)

    def vjp_input(g):
        # dX is the full correlation of dOut with the flipped weight
        g4 = g.reshape(n, cout, ho, wo)
        wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # [cin,cout,k,k]
        gcols = _im2col(g4, k, k - 1 - p)
        dx = np.matmul(wflip.reshape(cin, cout * k * k), gcols).reshape(n, cin, h, w)
        return dx[0] if squeeze else dx

    def vjp_weight(g):
        dm = np.ascontiguousarray(g.reshape(n, cout, ho * wo).transpose(1, 0, 2)).reshape(
            cout, n * ho * wo
        )
        ck = np.ascontiguousarray(cols.transpose(1, 0, 2)).reshape(cin * k * k, n * ho * wo)
        return (dm @ ck.T).reshape(weight.shape)

    def vjp_bias(g):
        return g.reshape(n, cout, ho * wo).sum(axis=(0, 2))

    links = [(input, vjp_input), (weight, vjp_weight)]
    if bias is not None:
        links.append((bias, vjp_bias))
    out_t = _result(out[0] if squeeze else out, "conv2d", links)
    return out_t


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Running per-channel moments, updated with EMA momentum in train mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), momentum)

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.mean.copy(), self.var.copy(), self.momentum)


def batch_norm(
    input: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
    eps: float = 1e-5,
    update_running: bool | None = None,
) -> Tensor:
    """Per-channel normalization over the spatial axes.

    In train mode each [C,H,W] map is standardized by its own spatial
    moments (a leading set axis is normalized per element) and the running
    stats take one EMA step from the batch-mean moments; eval mode applies
    the running stats. Biased variance throughout.
    """
    if eps <= 0:
        raise ValueError(f"batch_norm: eps must be positive, got {eps}")
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: unknown mode {mode!r}")
    squeeze = input.data.ndim == 3
    x = input.data[None] if squeeze else input.data
    if x.ndim != 4:
        raise ValueError(f"batch_norm: expected 3D or 4D input, got {input.shape}")
    n, c, h, w = x.shape
    if h * w == 0:
        raise ValueError("batch_norm: zero spatial extent")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: affine params must have shape ({c},)")
    if update_running is None:
        update_running = mode == "train"

    gm = gamma.data[None, :, None, None]
    if mode == "train":
        mu = x.mean(axis=(2, 3), keepdims=True)
        var = x.var(axis=(2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv
        if update_running:
            m = state.momentum
            state.mean = (1.0 - m) * state.mean + m * mu.mean(axis=0).reshape(c)
            state.var = (1.0 - m) * state.var + m * var.mean(axis=0).reshape(c)
    else:
        inv = 1.0 / np.sqrt(state.var[None, :, None, None] + eps)
        xhat = (x - state.mean[None, :, None, None]) * inv
    out = gm * xhat + beta.data[None, :, None, None]

    def vjp_input(g):
        g4 = g[None] if squeeze else g
        gx = g4 * gm
        if mode == "train":
            dx = inv * (
                gx
                - gx.mean(axis=(2, 3), keepdims=True)
                - xhat * (gx * xhat).mean(axis=(2, 3), keepdims=True)
            )
        else:
            dx = gx * inv
        return dx[0] if squeeze else dx

    def vjp_gamma(g):
        g4 = g[None] if squeeze else g
        return (g4 * xhat).sum(axis=(0, 2, 3))

    def vjp_beta(g):
        g4 = g[None] if squeeze else g
        return g4.sum(axis=(0, 2, 3))

    links = [(input, vjp_input), (gamma, vjp_gamma), (beta, vjp_beta)]
    return _result(out[0] if squeeze else out, "batch_norm", links)


# ---------------------------------------------------------------------------
# set ops


def stack_set(tensors) -> Tensor:
    """Stack n same-shape tensors into one [n,...] tensor."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("stack_set: empty set")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"stack_set: shape mismatch {t.shape} vs {shape}")
    data = np.stack([t.data for t in tensors])
    links = [(t, (lambda g, i=i: g[i])) for i, t in enumerate(tensors)]
    return _result(data, "stack_set", links)


def index_set(t: Tensor, i: int) -> Tensor:
    """Select element i along the leading set axis."""
    n = t.shape[0]
    if not 0 <= i < n:
        raise ValueError(f"index_set: index {i} out of range for set of {n}")

    def vjp(g):
        z = np.zeros_like(t.data)
        z[i] = g
        return z

    return _result(t.data[i], "index_set", [(t, vjp)])


def expand_set(t: Tensor, n: int) -> Tensor:
    """Repeat a [C,H,W] tensor along a new leading set axis of length n."""
    if n < 1:
        raise ValueError(f"expand_set: n must be >= 1, got {n}")
    data = np.broadcast_to(t.data[None], (n,) + t.shape).copy()
    return _result(data, "expand_set", [(t, lambda g: g.sum(axis=0))])


def max_over_set(t: Tensor) -> Tensor:
    """Elementwise max over the leading set axis; ties go to the lowest index."""
    if t.data.ndim < 2:
        raise ValueError(f"max_over_set: expected a set axis, got shape {t.shape}")
    winners = np.argmax(t.data, axis=0)  # argmax takes the first occurrence
    out = np.take_along_axis(t.data, winners[None], axis=0)[0]

    def vjp(g):
        dz = np.zeros_like(t.data)
        np.put_along_axis(dz, winners[None], g[None], axis=0)
        return dz

    return _result(out, "max_over_set", [(t, vjp)])


def set_max_pool(tensors) -> Tensor:
    """Elementwise max across a set of same-shape tensors."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("set_max_pool: empty set")
    return max_over_set(stack_set(tensors))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis ([C,H,W] axis 0, [N,C,H,W] axis 1)."""
    if a.data.ndim != b.data.ndim:
        raise ValueError(f"concat_channels: rank mismatch {a.shape} vs {b.shape}")
    if a.data.ndim == 3:
        axis = 0
        if a.shape[1:] != b.shape[1:]:
            raise ValueError(f"concat_channels: spatial mismatch {a.shape} vs {b.shape}")
    elif a.data.ndim == 4:
        axis = 1
        if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise ValueError(f"concat_channels: set/spatial mismatch {a.shape} vs {b.shape}")
    else:
        raise ValueError(f"concat_channels: expected 3D or 4D inputs, got {a.shape}")
    ca = a.shape[axis]
    data = np.concatenate([a.data, b.data], axis=axis)

    def take(g, lo, hi):
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(lo, hi)
        return g[tuple(sl)]

    return _result(
        data,
        "concat_channels",
        [(a, lambda g: take(g, 0, ca)), (b, lambda g: take(g, ca, None))],
    )


def slice_channels(t: Tensor, lo: int, hi: int) -> Tensor:
    """Channel-axis slice, the inverse of concat_channels."""
    axis = 0 if t.data.ndim == 3 else 1
    sl = [slice(None)] * t.data.ndim
    sl[axis] = slice(lo, hi)
    sl = tuple(sl)

    def vjp(g):
        z = np.zeros_like(t.data)
        z[sl] = g
        return z

    return _result(t.data[sl].copy(), "slice_channels", [(t, vjp)])


def scale_by_gate(t: Tensor, gate: Tensor) -> Tensor:
    """Multiply [.,C,H,W] features by a per-position gate [.,H,W]."""
    if t.data.ndim == gate.data.ndim + 1:
        ch_axis = t.data.ndim - 3
    else:
        raise ValueError(f"scale_by_gate: gate {gate.shape} does not match {t.shape}")
    ge = np.expand_dims(gate.data, ch_axis)
    expected = t.shape[:ch_axis] + t.shape[ch_axis + 1 :]
    if gate.shape != expected:
        raise ValueError(f"scale_by_gate: gate {gate.shape}, expected {expected}")
    return _result(
        t.data * ge,
        "scale_by_gate",
        [(t, lambda g: g * ge), (gate, lambda g: (g * t.data).sum(axis=ch_axis))],
    )


def normalize_channels(t: Tensor, degenerate_eps: float = 1e-12, fallback=(0.0, 0.0, 1.0)):
    """Per-position L2 normalization across channels of a [C,H,W] tensor.

    Positions whose vector norm falls below degenerate_eps are replaced by
    the fallback direction and flagged; no gradient flows through them.
    Returns (unit tensor, degenerate mask [H,W]).
    """
    if t.data.ndim != 3:
        raise ValueError(f"normalize_channels: expected [C,H,W], got {t.shape}")
    if len(fallback) != t.shape[0]:
        raise ValueError("normalize_channels: fallback length != channel count")
    norm = np.sqrt((t.data**2).sum(axis=0))
    degenerate = norm < degenerate_eps
    safe = np.where(degenerate, 1.0, norm)
    out = t.data / safe
    out[:, degenerate] = np.asarray(fallback, dtype=np.float64)[:, None]
    live = ~degenerate

    def vjp(g):
        g = g * live
        return (g - out * (out * g).sum(axis=0)) / safe * live

    return _result(out, "normalize_channels", [(t, vjp)]), degenerate


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor):
    """Accumulate d(loss)/dt into .grad for every reachable requires_grad leaf.

    loss must be scalar. Uses a per-call adjoint table keyed on node
    identity, so running backward over several losses that share a graph
    never mixes their contributions; .grad sums across calls until
    zero_grads resets it.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    adjoints = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        acc = adjoints.pop(id(node), None)
        if acc is None:
            continue
        if node.requires_grad and not node._parents:
            node.grad = acc.copy() if node.grad is None else node.grad + acc
        for parent, vjp in node._parents:
            contrib = vjp(acc)
            prev = adjoints.get(id(parent))
            adjoints[id(parent)] = contrib if prev is None else prev + contrib


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# parameter groups


@dataclass
class ParamGroup:
    """Named set of trainable tensors with a training-time freeze flag."""

    name: str
    tensors: list = field(default_factory=list)
    frozen: bool = False

    def __post_init__(self):
        for t in self.tensors:
            if not t.requires_grad:
                raise ValueError(f"ParamGroup {self.name}: all tensors must require grad")

    def add(self, *tensors: Tensor):
        for t in tensors:
            if not t.requires_grad:
                raise ValueError(f"ParamGroup {self.name}: all tensors must require grad")
            self.tensors.append(t)

    def zero_grads(self):
        zero_grads(self.tensors)

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    """Per-element comparison of autodiff and central-difference gradients."""

    name: str
    max_rel_err: float
    max_abs_err: float
    rel_err: np.ndarray
    grad_ad: np.ndarray
    grad_fd: np.ndarray
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)

    def __str__(self):
        flag = "ok" if self.passed else "FAIL"
        return f"[{flag}] {self.name}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e})"


def finite_diff_check(
    f,
    x: Tensor,
    h: float = 1e-6,
    tol: float = 1e-4,
    name: str = "grad",
    denom_floor: float = 1e-5,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar-valued f against central differences.

    f must be deterministic and must build its graph from the tensor it is
    handed (state updates such as batch-norm running stats have to be
    disabled by the caller). Gradients below denom_floor in magnitude are
    effectively compared absolutely at denom_floor * tol, since central
    differences cannot resolve them relatively (roundoff ~ eps|f|/h).
    """
    if h <= 0:
        raise ValueError(f"finite_diff_check: h must be positive, got {h}")
    xt = Tensor(x.data.copy(), requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise ValueError("finite_diff_check: f must be scalar-valued")
    if not np.all(np.isfinite(out.data)):
        raise NumericalError(f"finite_diff_check({name}): f(x) is not finite")
    backward(out)
    grad_ad = np.zeros_like(x.data) if xt.grad is None else np.asarray(xt.grad, dtype=np.float64)

    flat = x.data.reshape(-1)
    grad_fd = np.empty_like(flat)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += h
        fp = float(f(Tensor(xp.reshape(x.shape))).data)
        xm = flat.copy()
        xm[i] -= h
        fm = float(f(Tensor(xm.reshape(x.shape))).data)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"finite_diff_check({name}): non-finite probe at index {i}")
        grad_fd[i] = (fp - fm) / (2.0 * h)
    grad_fd = grad_fd.reshape(x.shape)

    abs_err = np.abs(grad_ad - grad_fd)
    denom = np.maximum(np.maximum(np.abs(grad_ad), np.abs(grad_fd)), denom_floor)
    rel_err = abs_err / denom
    return GradCheckReport(
        name=name,
        max_rel_err=float(rel_err.max()) if rel_err.size else 0.0,
        max_abs_err=float(abs_err.max()) if abs_err.size else 0.0,
        rel_err=rel_err,
        grad_ad=grad_ad,
        grad_fd=grad_fd,
        tol=tol,
    )
