"""Adam optimization and the whole-volume training loop.

One iteration processes one volume: draw a geometric transform, run
the network in train mode, combine the fused-map loss with optional
auxiliary head losses, backpropagate and take one bias-corrected Adam
step.  Early stopping watches the epoch-level validation loss and the
returned network is always the best-validation snapshot.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import losses
from .augment import apply, draw_transform
from .metrics import default_region_map, evaluate_regions, mean_region_metrics
from .network import NetworkState, _sigmoid, predict_labels
from .tensor_ops import resample_nearest

LOSS_KINDS = ("jaccard", "cross_entropy")
AUGMENT_POLICIES = ("full", "none")
AUX_HEAD_ORDER = ("head_half", "head_quarter")

# every stream of randomness derives from the one configured seed
AUGMENT_SEED_OFFSET = 1
FOLD_SPLIT_SEED_OFFSET = 2
FOLD_SEED_STRIDE = 1000


@dataclass
class AdamConfig:
    lr: float = 5e-5
    # moment-retention coefficients; 0.9 / 0.999 give the conventional
    # flavor, the defaults follow the training recipe this reproduces
    beta1: float = 0.1
    beta2: float = 0.001
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass
class AdamState:
    config: AdamConfig
    step: int
    m: dict
    v: dict

    @classmethod
    def init(cls, params, config=None):
        config = config if config is not None else AdamConfig()
        return cls(
            config=config,
            step=0,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params, grads, state):
    """One in-place bias-corrected Adam update.

    `grads` must cover every parameter (extra entries such as the input
    gradient are ignored).  Moments stay in the parameter dtype.
    """
    if set(params) != set(state.m):
        raise ValueError("parameter names do not match the optimizer state")
    missing = set(params) - set(grads)
    if missing:
        raise ValueError(f"missing gradients for {sorted(missing)}")
    state.step += 1
    c = state.config
    corr1 = 1.0 - c.beta1**state.step
    corr2 = 1.0 - c.beta2**state.step
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m, v = state.m[name], state.v[name]
        m *= c.beta1
        m += (1.0 - c.beta1) * g
        v *= c.beta2
        v += (1.0 - c.beta2) * (g * g)
        p -= c.lr * (m / corr1) / (np.sqrt(v / corr2) + c.eps)


@dataclass
class TrainConfig:
    max_epochs: int = 600
    patience: int = 100
    tolerance: float = 1e-6
    augment: str = "full"
    loss: str = "jaccard"
    loss_classes: tuple = None  # None: all foreground classes
    aux_weights: tuple = (0.0, 0.0)  # (head_half, head_quarter)
    smooth_eps: float = losses.SMOOTH_EPS
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ValueError("patience must lie in [0, max_epochs]")
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")
        if self.augment not in AUGMENT_POLICIES:
            raise ValueError(f"augment must be one of {AUGMENT_POLICIES}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")
        self.aux_weights = tuple(float(w) for w in self.aux_weights)
        if len(self.aux_weights) != 2 or any(w < 0 for w in self.aux_weights):
            raise ValueError("aux_weights must be two nonnegative numbers")
        if self.loss_classes is not None:
            self.loss_classes = tuple(int(c) for c in self.loss_classes)
        if self.smooth_eps <= 0:
            raise ValueError("smooth_eps must be > 0")


@dataclass
class IterationRecord:
    epoch: int
    iteration: int
    fused: float
    aux: dict
    total: float


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    network: NetworkState
    epochs: list
    iterations: list
    best_epoch: int
    best_val_loss: float


def fused_loss_and_grad(scores, labels, loss_kind, classes=None, eps=losses.SMOOTH_EPS):
    """Loss value on sigmoid probabilities plus its score gradient."""
    probs = _sigmoid(scores)
    if loss_kind == "jaccard":
        value, _ = losses.jaccard_loss(probs, labels, classes, eps)
        dprob = losses.jaccard_loss_grad(probs, labels, classes, eps)
    elif loss_kind == "cross_entropy":
        value = losses.cross_entropy(probs, labels, eps)
        dprob = losses.cross_entropy_grad(probs, labels, eps)
    else:
        raise ValueError(f"loss must be one of {LOSS_KINDS}")
    dscore = (dprob * probs * (1.0 - probs)).astype(scores.dtype, copy=False)
    return value, dscore


def fused_loss(scores, labels, loss_kind, classes=None, eps=losses.SMOOTH_EPS):
    probs = _sigmoid(scores)
    if loss_kind == "jaccard":
        value, _ = losses.jaccard_loss(probs, labels, classes, eps)
        return value
    if loss_kind == "cross_entropy":
        return losses.cross_entropy(probs, labels, eps)
    raise ValueError(f"loss must be one of {LOSS_KINDS}")


def _training_iteration(net, state, image, labels, config):
    out = net.forward(image, mode="train", keep_cache=True)
    fused, dscore = fused_loss_and_grad(
        out.scores, labels, config.loss, config.loss_classes, config.smooth_eps
    )
    total = fused
    aux = {}
    head_grads = {}
    for hname, w in zip(AUX_HEAD_ORDER, config.aux_weights):
        if w == 0.0 or hname not in out.head_scores:
            continue
        hs = out.head_scores[hname]
        target = resample_nearest(labels, hs.shape[1:])
        hp = _sigmoid(hs)
        if config.loss == "jaccard":
            term, _ = losses.jaccard_loss(hp, target, config.loss_classes, config.smooth_eps)
            dp = losses.jaccard_loss_grad(hp, target, config.loss_classes, config.smooth_eps)
        else:
            term = losses.cross_entropy(hp, target, config.smooth_eps)
            dp = losses.cross_entropy_grad(hp, target, config.smooth_eps)
        aux[hname] = term
        total += w * term
        head_grads[hname] = (w * dp * hp * (1.0 - hp)).astype(hs.dtype, copy=False)
    grads, _ = net.backward(dscore, head_grads or None)
    adam_step(net.named_parameters(), grads, state)
    return fused, aux, float(total)


def validation_loss(net, val_set, loss_kind, classes=None, eps=losses.SMOOTH_EPS):
    vals = [
        fused_loss(net.forward(image, mode="infer").scores, labels, loss_kind, classes, eps)
        for image, labels in val_set
    ]
    return float(np.mean(vals))


def train(net, train_set, val_set, config=None, adam=None):
    """Optimize `net` in place; returns the best-validation snapshot.

    One epoch is one pass over `train_set`, one volume per iteration.
    Stops at `max_epochs`, or once the validation loss has failed to
    improve on the running best by more than `tolerance` for `patience`
    consecutive epochs.  `patience` 0 stops after the first epoch.
    """
    config = config if config is not None else TrainConfig()
    adam = adam if adam is not None else AdamConfig()
    train_set = list(train_set)
    val_set = list(val_set)
    if not train_set:
        raise ValueError("training set is empty")
    if not val_set:
        raise ValueError("validation set is empty")
    rng = np.random.default_rng(config.seed + AUGMENT_SEED_OFFSET)
    state = AdamState.init(net.named_parameters(), adam)
    epochs, iterations = [], []
    best_val, best_net, best_epoch = float("inf"), None, -1
    stall = 0
    for epoch in range(1, config.max_epochs + 1):
        totals = []
        for image, labels in train_set:
            if config.augment == "full":
                image, labels = apply(draw_transform(rng), image, labels)
            fused, aux, total = _training_iteration(net, state, image, labels, config)
            iterations.append(IterationRecord(epoch, len(iterations), fused, aux, total))
            totals.append(total)
        val = validation_loss(net, val_set, config.loss, config.loss_classes, config.smooth_eps)
        epochs.append(EpochRecord(epoch, float(np.mean(totals)), val))
        if val < best_val - config.tolerance:
            best_val, best_net, best_epoch = val, net.clone(), epoch
            stall = 0
        else:
            stall += 1
        if stall >= config.patience:
            break
    if best_net is None:  # no epoch improved on +inf: impossible, but stay safe
        best_net, best_val, best_epoch = net.clone(), epochs[-1].val_loss, epochs[-1].epoch
    return TrainResult(best_net, epochs, iterations, best_epoch, best_val)


def curves_csv(epochs):
    """Loss curves as CSV text with epoch, train and validation loss."""
    lines = ["epoch,train_loss,val_loss"]
    for e in epochs:
        lines.append(f"{e.epoch},{e.train_loss!r},{e.val_loss!r}")
    return "\n".join(lines) + "\n"


@dataclass
class FoldResult:
    fold: int
    test_indices: tuple
    result: TrainResult
    metrics: dict  # region name -> RegionMetrics, mean over test volumes


@dataclass
class CrossvalResult:
    folds: list
    mean_metrics: dict


def crossval_folds(n, k, seed):
    """Split a permutation of range(n) into k contiguous folds.

    The first n % k folds receive the extra items, so fold sizes differ
    by at most one.  Deterministic in the seed.
    """
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > n:
        raise ValueError(f"cannot split {n} volumes into {k} folds")
    perm = np.random.default_rng(seed + FOLD_SPLIT_SEED_OFFSET).permutation(n)
    base, extra = divmod(n, k)
    folds, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append(tuple(int(j) for j in perm[start:start + size]))
        start += size
    return folds


def _run_fold(spec, dataset, folds, i, config, adam):
    test_idx = folds[i]
    train_idx = [j for f, fold in enumerate(folds) if f != i for j in fold]
    fold_seed = config.seed + FOLD_SEED_STRIDE * (i + 1)
    fold_config = replace(config, seed=fold_seed)
    net = NetworkState.build(spec, seed=fold_seed)
    result = train(
        net,
        [dataset[j] for j in train_idx],
        [dataset[j] for j in test_idx],
        fold_config,
        adam,
    )
    regions = default_region_map(spec.class_count)
    rows = [
        evaluate_regions(predict_labels(result.network, image), labels, regions)
        for image, labels in (dataset[j] for j in test_idx)
    ]
    metrics = {
        name: mean_region_metrics([row[name] for row in rows]) for name in regions
    }
    return FoldResult(i, test_idx, result, metrics)


def crossval(spec, dataset, k, config=None, adam=None, threads=1):
    """k-fold cross-validation: disjoint covering folds, one net per
    fold trained on the rest and scored on its held-out fold."""
    config = config if config is not None else TrainConfig()
    dataset = list(dataset)
    folds = crossval_folds(len(dataset), k, config.seed)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(
                pool.map(lambda i: _run_fold(spec, dataset, folds, i, config, adam), range(k))
            )
    else:
        results = [_run_fold(spec, dataset, folds, i, config, adam) for i in range(k)]
    region_names = results[0].metrics.keys()
    mean_metrics = {
        name: mean_region_metrics([r.metrics[name] for r in results]) for name in region_names
    }
    return CrossvalResult(results, mean_metrics)
