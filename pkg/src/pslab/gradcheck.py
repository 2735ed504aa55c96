"""Finite-difference verification of every autodiff primitive and of the
full network loss, used by the `gradcheck` CLI command and the tests.

Each check builds a scalar loss from one op (projected against a fixed
random tensor so the gradient is well-conditioned), runs finite_diff_check
over every element of the probed tensor, and reports the max relative
error. The full-network check perturbs each parameter tensor of a small
net in turn, with batch-norm running-stat updates disabled so the loss is
a pure function.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor, finite_diff_check
from .network import MsfConfig, MsfNet
from .render import make_dataset
from .training import TrainConfig, staged_loss


def _proj(t: Tensor, r: np.ndarray) -> Tensor:
    return ad.sum_all(ad.mul(t, Tensor(r)))


def primitive_checks(h: float = 1e-6, tol: float = 1e-4, seed: int = 0):
    """Gradient reports for every differentiable primitive."""
    rng = np.random.default_rng(seed)
    reports = []

    x = Tensor(rng.normal(size=(2, 3, 6, 6)))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)
    r_conv = rng.normal(size=(2, 4, 6, 6))
    reports.append(
        finite_diff_check(
            lambda t: _proj(ad.conv2d(t, w, b, padding=1), r_conv), x, h, tol, "conv2d/input"
        )
    )
    reports.append(
        finite_diff_check(
            lambda t: _proj(ad.conv2d(x, t, b, padding=1), r_conv), w, h, tol, "conv2d/weight"
        )
    )
    reports.append(
        finite_diff_check(
            lambda t: _proj(ad.conv2d(x, w, t, padding=1), r_conv), b, h, tol, "conv2d/bias"
        )
    )

    gamma = Tensor(rng.normal(1.0, 0.2, size=3), requires_grad=True)
    beta = Tensor(rng.normal(size=3), requires_grad=True)
    state = BatchNormState.create(3)
    xb = Tensor(rng.normal(size=(3, 5, 5)))
    r_bn = rng.normal(size=(3, 5, 5))

    def bn(inp, g, be, mode):
        return ad.batch_norm(inp, g, be, state, mode=mode, update_running=False)

    reports.append(
        finite_diff_check(lambda t: _proj(bn(t, gamma, beta, "train"), r_bn), xb, h, tol, "batch_norm/input")
    )
    reports.append(
        finite_diff_check(lambda t: _proj(bn(xb, t, beta, "train"), r_bn), gamma, h, tol, "batch_norm/gamma")
    )
    reports.append(
        finite_diff_check(lambda t: _proj(bn(xb, gamma, t, "train"), r_bn), beta, h, tol, "batch_norm/beta")
    )
    state_e = BatchNormState.create(3)
    state_e.mean = rng.normal(size=3)
    state_e.var = rng.uniform(0.5, 2.0, size=3)
    reports.append(
        finite_diff_check(
            lambda t: _proj(ad.batch_norm(t, gamma, beta, state_e, mode="eval"), r_bn),
            xb, h, tol, "batch_norm/eval",
        )
    )

    xe = Tensor(rng.normal(size=(24,)))
    r_e = rng.normal(size=24)
    reports.append(finite_diff_check(lambda t: _proj(ad.gelu(t), r_e), xe, h, tol, "gelu"))
    reports.append(finite_diff_check(lambda t: _proj(ad.sigmoid(t), r_e), xe, h, tol, "sigmoid"))
    reports.append(
        finite_diff_check(lambda t: _proj(ad.leaky_relu(t, 0.1), r_e), xe, h, tol, "leaky_relu")
    )

    pool_rest = [Tensor(rng.normal(size=(2, 4, 4))) for _ in range(2)]
    xp = Tensor(rng.normal(size=(2, 4, 4)))
    r_p = rng.normal(size=(2, 4, 4))
    reports.append(
        finite_diff_check(
            lambda t: _proj(ad.set_max_pool([t] + pool_rest), r_p), xp, h, tol, "set_max_pool"
        )
    )

    xc = Tensor(rng.normal(size=(2, 4, 4)))
    yc = Tensor(rng.normal(size=(3, 4, 4)))
    r_c = rng.normal(size=(5, 4, 4))
    reports.append(
        finite_diff_check(
            lambda t: _proj(ad.concat_channels(t, yc), r_c), xc, h, tol, "concat_channels"
        )
    )

    gate = Tensor(_stable_uniform(rng, (2, 4, 4)))
    xg = Tensor(rng.normal(size=(2, 3, 4, 4)))
    r_g = rng.normal(size=(2, 3, 4, 4))
    reports.append(
        finite_diff_check(lambda t: _proj(ad.scale_by_gate(t, gate), r_g), xg, h, tol, "scale_by_gate/features")
    )
    reports.append(
        finite_diff_check(
            lambda t: _proj(ad.scale_by_gate(xg, t), r_g), gate, h, tol, "scale_by_gate/gate"
        )
    )

    xn = Tensor(rng.normal(size=(3, 4, 4)))
    r_n = rng.normal(size=(3, 4, 4))
    reports.append(
        finite_diff_check(
            lambda t: _proj(ad.normalize_channels(t)[0], r_n), xn, h, tol, "normalize_channels"
        )
    )

    xs = Tensor(rng.normal(size=(3, 4, 4)))
    reports.append(finite_diff_check(lambda t: ad.sum_all(t), xs, h, tol, "sum_all"))
    r_sc = rng.normal(size=(4, 4))
    reports.append(
        finite_diff_check(lambda t: _proj(ad.sum_channels(t), r_sc), xs, h, tol, "sum_channels")
    )
    return reports


def _stable_uniform(rng, shape):
    # keep gate values away from 0/1 so finite differences stay smooth
    return rng.uniform(0.15, 0.85, size=shape)


def network_checks(
    h: float = 1e-6,
    tol: float = 1e-4,
    seed: int = 0,
    size: int = 4,
    n_lights: int = 3,
    channels: int = 4,
    depth: int = 1,
):
    """Check the full staged training loss against finite differences.

    Every parameter tensor of a small net is perturbed elementwise; the
    loss is the stage-weighted cosine loss on one random scene.
    """
    dataset = make_dataset(1, size, n_lights, seed=seed, material="blinn_phong")
    imageset, gt = dataset[0]
    config = MsfConfig(base_channels=channels, extractor_depth=depth, seed=seed)
    net = MsfNet(config)
    cfg = TrainConfig(epochs=1, seed=seed)

    def make_loss():
        outputs = net.forward(imageset, mode="train", update_stats=False)
        total, _ = staged_loss(outputs, gt, cfg)
        return total

    all_params = net.all_tensors()
    reports = []
    for gname, group in net.groups.items():
        for i, t in enumerate(group.tensors):
            ad.zero_grads(all_params)
            reports.append(_check_param(make_loss, t, h, tol, f"msfnet/{gname}[{i}]"))
    return reports


def _check_param(make_loss, param: Tensor, h: float, tol: float, name: str):
    """finite_diff_check specialized to a parameter embedded in a model."""
    original = param.data.copy()

    loss0 = make_loss()
    ad.backward(loss0)
    grad_ad = np.zeros_like(param.data) if param.grad is None else param.grad.copy()
    param.grad = None

    flat = original.reshape(-1)
    grad_fd = np.empty_like(flat)
    for i in range(flat.size):
        flat_p = flat.copy()
        flat_p[i] += h
        param.data = flat_p.reshape(original.shape)
        fp = float(make_loss().data)
        flat_m = flat.copy()
        flat_m[i] -= h
        param.data = flat_m.reshape(original.shape)
        fm = float(make_loss().data)
        grad_fd[i] = (fp - fm) / (2.0 * h)
    param.data = original
    grad_fd = grad_fd.reshape(original.shape)

    abs_err = np.abs(grad_ad - grad_fd)
    denom = np.maximum(np.maximum(np.abs(grad_ad), np.abs(grad_fd)), 1e-5)
    rel = abs_err / denom
    return ad.GradCheckReport(
        name=name,
        max_rel_err=float(rel.max()),
        max_abs_err=float(abs_err.max()),
        rel_err=rel,
        grad_ad=grad_ad,
        grad_fd=grad_fd,
        tol=tol,
    )


def run_suite(h=1e-6, tol=1e-4, seed=0, verbose=True, **net_kwargs):
    """All primitive and network checks; returns (reports, all_passed)."""
    reports = primitive_checks(h, tol, seed) + network_checks(h, tol, seed, **net_kwargs)
    for rep in reports:
        if verbose:
            print(rep)
    return reports, all(r.passed for r in reports)
