"""Finite-difference verification of every hand-derived gradient.

The canonical entry point is `run_all`, which exercises each layer
primitive coordinate by coordinate and whole tiny networks
block by block, at 64-bit precision, and reports norm-relative errors.
The `gradcheck` CLI subcommand wraps it and turns the outcome into an
exit code.
"""

from dataclasses import dataclass

import numpy as np

from . import layers

PERTURBATION = 1e-5
TOLERANCE = 1e-4


def central_diff(f, x, h=PERTURBATION):
    """Central finite differences of scalar f w.r.t. every entry of x.

    `f` takes no arguments and must read `x` by reference; entries are
    perturbed in place and restored.  `x` must be float64.
    """
    if x.dtype != np.float64:
        raise ValueError("finite differences run at 64-bit precision")
    g = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = g.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        fp = f()
        flat_x[i] = orig - h
        fm = f()
        flat_x[i] = orig
        flat_g[i] = (fp - fm) / (2.0 * h)
    return g


def directional_diff(f, x, direction, h=PERTURBATION):
    """Central finite difference of scalar f along one direction in x."""
    if x.dtype != np.float64:
        raise ValueError("finite differences run at 64-bit precision")
    keep = x.copy()
    x += h * direction
    fp = f()
    x[...] = keep - h * direction
    fm = f()
    x[...] = keep
    return (fp - fm) / (2.0 * h)


def rel_error(a, b):
    """Norm-relative disagreement between two gradient arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel())
    if na == 0.0 and nb == 0.0:
        return 0.0
    return float(np.linalg.norm((a - b).ravel()) / max(na, nb))


@dataclass
class CheckResult:
    name: str
    error: float

    @property
    def ok(self):
        return self.error < TOLERANCE


def _conv_params(rng, cout, cin, k):
    return layers.ConvParams(
        weights=rng.standard_normal((cout, cin, k, k, k)),
        bias=rng.standard_normal(cout),
    )


def _projected(fwd, ref):
    """Scalar objective: inner product of the layer output with a fixed
    random reference, so d(objective)/d(output) == ref."""
    return float(np.sum(fwd() * ref))


def check_conv(rng, k):
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    shape = tuple(int(rng.integers(2, 5)) for _ in range(3))
    x = rng.standard_normal((cin,) + shape)
    p = _conv_params(rng, cout, cin, k)
    ref = rng.standard_normal((cout,) + shape)
    f = lambda: _projected(lambda: layers.conv3d_forward(x, p), ref)
    dx, dw, db = layers.conv3d_backward(x, p, ref)
    errs = [
        rel_error(dx, central_diff(f, x)),
        rel_error(dw, central_diff(f, p.weights)),
        rel_error(db, central_diff(f, p.bias)),
    ]
    return max(errs)

def check_strided(rng):
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    shape = tuple(2 * int(rng.integers(1, 4)) for _ in range(3))
    x = rng.standard_normal((cin,) + shape)
    p = _conv_params(rng, cout, cin, 3)
    ref = rng.standard_normal((cout,) + tuple(n // 2 for n in shape))
    f = lambda: _projected(lambda: layers.conv3d_strided_forward(x, p), ref)
    dx, dw, db = layers.conv3d_strided_backward(x, p, ref)
    return max(
        rel_error(dx, central_diff(f, x)),
        rel_error(dw, central_diff(f, p.weights)),
        rel_error(db, central_diff(f, p.bias)),
    )


def check_deconv(rng):
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    shape = tuple(int(rng.integers(1, 4)) for _ in range(3))
    x = rng.standard_normal((cin,) + shape)
    p = _conv_params(rng, cout, cin, 3)
    ref = rng.standard_normal((cout,) + tuple(2 * n for n in shape))
    f = lambda: _projected(lambda: layers.deconv3d_forward(x, p), ref)
    dx, dw, db = layers.deconv3d_backward(x, p, ref)
    return max(
        rel_error(dx, central_diff(f, x)),
        rel_error(dw, central_diff(f, p.weights)),
        rel_error(db, central_diff(f, p.bias)),
    )


def check_prelu(rng):
    c = int(rng.integers(1, 4))
    shape = tuple(int(rng.integers(2, 5)) for _ in range(3))
    x = rng.standard_normal((c,) + shape)
    # keep pre-activations away from the kink so the difference quotient
    # sees a differentiable neighborhood
    x = np.where(np.abs(x) < 10 * PERTURBATION, 0.1, x)
    p = layers.PReluParams(slopes=0.25 + 0.5 * rng.random(c))
    ref = rng.standard_normal(x.shape)
    f = lambda: _projected(lambda: layers.prelu_forward(x, p), ref)
    dx, da = layers.prelu_backward(x, p, ref)
    return max(
        rel_error(dx, central_diff(f, x)),
        rel_error(da, central_diff(f, p.slopes)),
    )


def check_batchnorm(rng, mode):
    c = int(rng.integers(1, 4))
    shape = tuple(int(rng.integers(2, 5)) for _ in range(3))
    x = rng.standard_normal((c,) + shape)
    s = layers.BatchNormState(
        gamma=0.5 + rng.random(c),
        beta=rng.standard_normal(c),
        running_mean=rng.standard_normal(c),
        running_std=0.5 + rng.random(c),
    )
    ref = rng.standard_normal(x.shape)
    # the train-mode output ignores the running stats, so their in-place
    # update during repeated forward evaluations cannot skew the quotient
    f = lambda: _projected(lambda: layers.batchnorm_forward(x, s, mode), ref)
    dx, dgamma, dbeta = layers.batchnorm_backward(x, s, ref, mode)
    return max(
        rel_error(dx, central_diff(f, x)),
        rel_error(dgamma, central_diff(f, s.gamma)),
        rel_error(dbeta, central_diff(f, s.beta)),
    )


def layer_suite(seed=0, instances=20):
    """Coordinate-exhaustive checks for all layer primitives."""
    rng = np.random.default_rng(seed)
    results = []
    for name, fn in [
        ("conv3d_k3", lambda r: check_conv(r, 3)),
        ("conv3d_k1", lambda r: check_conv(r, 1)),
        ("conv3d_strided", check_strided),
        ("deconv3d", check_deconv),
        ("prelu", check_prelu),
        ("batchnorm_train", lambda r: check_batchnorm(r, "train")),
        ("batchnorm_infer", lambda r: check_batchnorm(r, "infer")),
    ]:
        worst = max(fn(rng) for _ in range(instances))
        results.append(CheckResult(name, worst))
    return results


def network_suite(seed=0, instances=20):
    """Block-wise directional checks for whole tiny networks.

    Covers the cartesian product of skip mode, head count and loss
    choice.  Imported lazily to keep this module usable while only the
    layer primitives exist.
    """
    from . import netcheck

    return netcheck.suite(seed=seed, instances=instances)


def run_all(seed=0, instances=20):
    return layer_suite(seed, instances) + network_suite(seed, instances)
