"""Whole-network finite-difference verification.

Builds tiny 64-bit networks over the cartesian product of skip mode,
head count and loss choice, then checks the assembled backward pass one
parameter block at a time with directional central differences: for a
random unit direction d confined to a block, the difference quotient of
the scalar training objective must match <gradient, d>.

Instances whose batch-normalized pre-activations sit closer to the
rectifier kink than the probe step are discarded and redrawn: the
difference quotient is only meaningful on a differentiable
neighborhood.  The probe step is kept well below the kink margin
because a parameter-space step is amplified by the downstream Jacobian
before it reaches later pre-activations; a step equal to the margin was
observed to push a deep instance across a kink, producing a spurious
2e-4 disagreement that vanished (to 3e-10) once the step cleared the
amplified margin.
"""

from itertools import product

import numpy as np

from . import losses, network
from .gradcheck import CheckResult, directional_diff
from .tensor_ops import resample_nearest

TINY_CONTRACTING = (2, 2, 4, 4, 4, 8, 8)
TINY_EXPANDING = (4, 8, 4, 4, 2, 4)
KINK_MARGIN = 1e-5
# Probe step for whole-network directional differences.  Must sit a
# Jacobian-amplification factor below KINK_MARGIN (see module
# docstring); at 3e-6 the surviving quotient error is dominated by
# objective roundoff, about 1e-16 / (2 * step) in absolute terms.
PROBE_STEP = 3e-6
# Absolute error floor.  A convolution bias feeding a train-mode
# normalizer has an identically zero gradient, so both sides of the
# comparison are pure roundoff noise of roughly 5e-11; the floor keeps
# that noise a safe factor under the tolerance without masking real
# disagreements, which sit orders of magnitude higher.
SCALE_FLOOR = 1e-5
AUX_WEIGHTS = {"head_half": 0.5, "head_quarter": 0.25}


def tiny_spec(skip_mode, head_count):
    return network.ArchSpec(
        in_channels=2,
        class_count=3,
        contracting_features=TINY_CONTRACTING,
        expanding_features=TINY_EXPANDING,
        skip_mode=skip_mode,
        head_count=head_count,
        init="gaussian",
        init_sigma=0.5,
    )


def _randomize(net, rng):
    """Move the freshly built parameters off their symmetric defaults so
    every gradient path carries signal."""
    for name, arr in net.named_parameters().items():
        if name.endswith(".bias") or name.endswith(".beta"):
            arr += 0.2 * rng.standard_normal(arr.shape)
        elif name.endswith(".gamma"):
            arr[...] = 0.7 + 0.6 * rng.random(arr.shape)
        elif name.endswith(".slopes"):
            arr[...] = 0.1 + 0.7 * rng.random(arr.shape)


def build_instance(skip_mode, head_count, seed):
    # (8, 16, 8) keeps at least two voxels per axis-normalizing stage at
    # the bottom; on a cube of side 8 the bottom would collapse to a
    # single voxel and its normalization would erase all signal
    shape = (8, 16, 8)
    for attempt in range(50):
        rng = np.random.default_rng(90_000 + seed * 101 + attempt)
        net = network.NetworkState.build(
            tiny_spec(skip_mode, head_count), seed=seed * 77 + attempt, dtype=np.float64
        )
        _randomize(net, rng)
        x = rng.standard_normal((2,) + shape)
        labels = rng.integers(0, 3, shape)
        net.forward(x, mode="train")
        unit_caches = [v for k, v in net._cache.items() if not k.startswith("_")]
        margin = min(np.abs(h).min() for _, _, h in unit_caches)
        # spatially near-constant channels put the normalizer's variance
        # at its epsilon floor where curvature spoils the quotient
        spread = min(
            z.reshape(z.shape[0], -1).var(axis=1).min() for _, z, _ in unit_caches
        )
        if margin > KINK_MARGIN and spread > 1e-3:
            return net, x, labels
    raise RuntimeError("could not draw a kink-free instance")


def _head_targets(net, out, labels):
    for hname, w in AUX_WEIGHTS.items():
        hs = out.head_scores[hname]
        yield hname, w, hs, resample_nearest(labels, hs.shape[1:])


def objective(net, x, labels, loss_name):
    """Fused-map loss plus weighted auxiliary head losses."""
    out = net.forward(x, mode="train")
    if loss_name == "jaccard":
        total, _ = losses.jaccard_loss(out.probs, labels)
    else:
        total = losses.cross_entropy(out.probs, labels)
    if net.spec.head_count == 3:
        for _, w, hs, tgt in _head_targets(net, out, labels):
            hp = network._sigmoid(hs)
            if loss_name == "jaccard":
                term, _ = losses.jaccard_loss(hp, tgt)
            else:
                term = losses.cross_entropy(hp, tgt)
            total += w * term
    return float(total)


def analytic_grads(net, x, labels, loss_name):
    out = net.forward(x, mode="train")
    grad_fn = losses.jaccard_loss_grad if loss_name == "jaccard" else losses.cross_entropy_grad
    dp = grad_fn(out.probs, labels)
    ds = dp * out.probs * (1.0 - out.probs)
    head_grads = {}
    if net.spec.head_count == 3:
        for hname, w, hs, tgt in _head_targets(net, out, labels):
            hp = network._sigmoid(hs)
            head_grads[hname] = w * grad_fn(hp, tgt) * hp * (1.0 - hp)
    return net.backward(ds, head_grads)


def check_instance(skip_mode, head_count, loss_name, seed, rng):
    """Worst per-block disagreement for one random instance."""
    net, x, labels = build_instance(skip_mode, head_count, seed)
    grads, input_grad = analytic_grads(net, x, labels, loss_name)
    blocks = dict(net.named_parameters())
    blocks["input"] = x
    analytic = dict(grads)
    analytic["input"] = input_grad
    f = lambda: objective(net, x, labels, loss_name)
    worst = 0.0
    for name, arr in blocks.items():
        d = rng.standard_normal(arr.shape)
        d /= np.linalg.norm(d.ravel())
        fd = directional_diff(f, arr, d, h=PROBE_STEP)
        dot = float(np.sum(np.asarray(analytic[name]) * d))
        scale = max(
            float(np.linalg.norm(np.asarray(analytic[name]).ravel())),
            abs(fd),
            SCALE_FLOOR,
        )
        worst = max(worst, abs(fd - dot) / scale)
    return worst


def suite(seed=0, instances=20):
    results = []
    combos = list(
        product(("sum", "concat", "none"), (1, 3), ("jaccard", "cross_entropy"))
    )
    for combo_idx, (skip_mode, head_count, loss_name) in enumerate(combos):
        n = instances if skip_mode != "none" else max(3, instances // 4)
        rng = np.random.default_rng(seed + 13 * combo_idx)
        worst = max(
            check_instance(skip_mode, head_count, loss_name, seed * 1000 + i, rng)
            for i in range(n)
        )
        results.append(
            CheckResult(f"net_{skip_mode}_h{head_count}_{loss_name}", worst)
        )
    return results
