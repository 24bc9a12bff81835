"""Encoder-decoder segmentation network.

The fixed topology: three contracting stages, a bottom stage, three
expanding stages.  A contracting stage opens with a stride-2
convolution (the first stage has none); an expanding stage opens with a
1x1x1 convolution that halves the feature count, followed by a
deconvolution that doubles every spatial extent, a merge with the
matching contracting stage, and a 3x3x3 convolution.  Every main-path
convolution is followed by batch normalization and a per-channel
parametric ReLU.  Segmentation heads are plain 1x1x1 convolutions; with
three heads the two coarse score maps are fused into the full-
resolution map by trilinear upsampling and addition of raw scores, and
per-class probabilities come from an elementwise sigmoid.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .tensor_ops import resample_trilinear, resample_trilinear_adjoint

SKIP_MODES = ("sum", "concat", "none")
INITS = ("gaussian", "xavier")

# merge wiring: expanding conv unit -> contracting unit whose activated
# output is its skip source
SKIP_SOURCES = {"e1_conv": "c3_conv", "e2_conv": "c2_conv", "e3_conv": "c1"}
DOWN_STAGES = 3  # stride-2 convolutions between input and bottom


@dataclass
class ArchSpec:
    """Everything needed to build a network deterministically."""

    in_channels: int
    class_count: int
    contracting_features: tuple = (8, 8, 16, 32, 32, 64, 64)
    expanding_features: tuple = (32, 64, 16, 32, 8, 16)
    skip_mode: str = "concat"
    head_count: int = 3
    init: str = "gaussian"
    init_sigma: float = 0.01
    bn_momentum: float = 0.5
    bn_epsilon: float = 1e-5
    bn_running_mean_init: float = 1.0
    bn_running_std_init: float = 0.0

    def __post_init__(self):
        self.contracting_features = tuple(int(v) for v in self.contracting_features)
        self.expanding_features = tuple(int(v) for v in self.expanding_features)
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        if self.class_count < 2:
            raise ValueError("need at least two classes")
        if len(self.contracting_features) != 7:
            raise ValueError("contracting_features needs 7 entries")
        if len(self.expanding_features) != 6:
            raise ValueError("expanding_features needs 6 entries")
        if self.skip_mode not in SKIP_MODES:
            raise ValueError(f"skip_mode must be one of {SKIP_MODES}")
        if self.head_count not in (1, 3):
            raise ValueError("head_count must be 1 or 3")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")
        f, g = self.contracting_features, self.expanding_features
        for width, who in ((f[6], "bottom stage"), (g[1], "first expanding conv"),
                          (g[3], "second expanding conv")):
            if width % 2 != 0:
                raise ValueError(f"{who} width {width} must be even to halve")
        if self.skip_mode == "sum":
            pairs = [(g[0], f[4]), (g[2], f[2]), (g[4], f[0])]
            for deconv_w, skip_w in pairs:
                if deconv_w != skip_w:
                    raise ValueError(
                        f"sum skips need equal widths, got {deconv_w} vs {skip_w}"
                    )


@dataclass
class UnitDef:
    name: str
    kind: str  # conv | down | reduce | deconv
    cin: int
    cout: int
    ksize: int


def arch_layout(spec):
    """Ordered main-path unit definitions for a spec.

    The channel count entering an expanding conv depends on the skip
    mode: concatenation adds the skip channels, sum and none do not.
    """
    f = spec.contracting_features
    g = spec.expanding_features
    concat = spec.skip_mode == "concat"
    units = [
        UnitDef("c1", "conv", spec.in_channels, f[0], 3),
        UnitDef("c2_down", "down", f[0], f[1], 3),
        UnitDef("c2_conv", "conv", f[1], f[2], 3),
        UnitDef("c3_down", "down", f[2], f[3], 3),
        UnitDef("c3_conv", "conv", f[3], f[4], 3),
        UnitDef("b_down", "down", f[4], f[5], 3),
        UnitDef("b_conv", "conv", f[5], f[6], 3),
        UnitDef("e1_reduce", "reduce", f[6], f[6] // 2, 1),
        UnitDef("e1_deconv", "deconv", f[6] // 2, g[0], 3),
        UnitDef("e1_conv", "conv", g[0] + (f[4] if concat else 0), g[1], 3),
        UnitDef("e2_reduce", "reduce", g[1], g[1] // 2, 1),
        UnitDef("e2_deconv", "deconv", g[1] // 2, g[2], 3),
        UnitDef("e2_conv", "conv", g[2] + (f[2] if concat else 0), g[3], 3),
        UnitDef("e3_reduce", "reduce", g[3], g[3] // 2, 1),
        UnitDef("e3_deconv", "deconv", g[3] // 2, g[4], 3),
        UnitDef("e3_conv", "conv", g[4] + (f[0] if concat else 0), g[5], 3),
    ]
    return units


def head_sources(spec):
    """head name -> unit whose activated output feeds it."""
    heads = {"head_full": "e3_conv"}
    if spec.head_count == 3:
        heads["head_half"] = "e2_conv"
        heads["head_quarter"] = "e1_conv"
    return heads


@dataclass
class Unit:
    defn: UnitDef
    conv: layers.ConvParams
    bn: layers.BatchNormState
    act: layers.PReluParams


@dataclass
class SegmentationOutput:
    scores: np.ndarray  # fused raw score volume (class_count, d, h, w)
    probs: np.ndarray  # sigmoid(scores)
    head_scores: dict  # raw per-head maps at native resolution


def _sigmoid(s):
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    es = np.exp(s[~pos])
    out[~pos] = es / (1.0 + es)
    return out


def _init_weights(rng, shape, spec, dtype):
    if spec.init == "gaussian":
        w = rng.normal(0.0, spec.init_sigma, size=shape)
    else:
        cout, cin, k = shape[0], shape[1], shape[2]
        fan_in, fan_out = cin * k ** 3, cout * k ** 3
        w = rng.normal(0.0, 1.0, size=shape) * np.sqrt(2.0 / (fan_in + fan_out))
    return w.astype(dtype)


class NetworkState:
    """Parameters plus running statistics for one network instance."""

    def __init__(self, spec, units, heads, dtype):
        self.spec = spec
        self.units = units  # dict name -> Unit, insertion ordered
        self.heads = heads  # dict name -> ConvParams
        self.dtype = dtype
        self._cache = None

    # -- construction ------------------------------------------------------

    @staticmethod
    def build(spec, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        units = {}
        for d in arch_layout(spec):
            conv = layers.ConvParams(
                weights=_init_weights(rng, (d.cout, d.cin, d.ksize, d.ksize, d.ksize), spec, dtype),
                bias=np.zeros(d.cout, dtype=dtype),
            )
            bn = layers.BatchNormState(
                gamma=np.ones(d.cout, dtype=dtype),
                beta=np.zeros(d.cout, dtype=dtype),
                running_mean=np.full(d.cout, spec.bn_running_mean_init, dtype=dtype),
                running_std=np.full(d.cout, spec.bn_running_std_init, dtype=dtype),
                momentum=spec.bn_momentum,
                epsilon=spec.bn_epsilon,
            )
            act = layers.PReluParams(slopes=np.full(d.cout, 0.25, dtype=dtype))
            units[d.name] = Unit(d, conv, bn, act)
        heads = {}
        for hname, src in head_sources(spec).items():
            cin = units[src].defn.cout
            heads[hname] = layers.ConvParams(
                weights=_init_weights(rng, (spec.class_count, cin, 1, 1, 1), spec, dtype),
                bias=np.zeros(spec.class_count, dtype=dtype),
            )
        return NetworkState(spec, units, heads, dtype)

    def clone(self):
        return copy.deepcopy(self)

    # -- parameter access --------------------------------------------------

    def named_parameters(self):
        out = {}
        for name, u in self.units.items():
            out[f"{name}.weights"] = u.conv.weights
            out[f"{name}.bias"] = u.conv.bias
            out[f"{name}.gamma"] = u.bn.gamma
            out[f"{name}.beta"] = u.bn.beta
            out[f"{name}.slopes"] = u.act.slopes
        for name, p in self.heads.items():
            out[f"{name}.weights"] = p.weights
            out[f"{name}.bias"] = p.bias
        return out

    def named_stats(self):
        out = {}
        for name, u in self.units.items():
            out[f"{name}.running_mean"] = u.bn.running_mean
            out[f"{name}.running_std"] = u.bn.running_std
        return out

    # -- execution ---------------------------------------------------------

    def _unit_forward(self, name, x, mode, cache):
        u = self.units[name]
        if u.defn.kind == "conv" or u.defn.kind == "reduce":
            z = layers.conv3d_forward(x, u.conv)
        elif u.defn.kind == "down":
            z = layers.conv3d_strided_forward(x, u.conv)
        elif u.defn.kind == "deconv":
            z = layers.deconv3d_forward(x, u.conv)
        else:
            raise ValueError(f"unknown unit kind {u.defn.kind}")
        h = layers.batchnorm_forward(z, u.bn, mode)
        a = layers.prelu_forward(h, u.act)
        if cache is not None:
            cache[name] = (x, z, h)
        return a

    def forward(self, x, mode="train", keep_cache=None):
        """Run the whole network on one volume.

        Training mode updates batch-norm running statistics and caches
        activations for `backward`.  Spatial extents must divide by
        2**DOWN_STAGES so all stride-2 stages land exactly.
        """
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[0] != self.spec.in_channels:
            raise ValueError(
                f"expected ({self.spec.in_channels}, d, h, w) input, got {x.shape}"
            )
        div = 2 ** DOWN_STAGES
        for n in x.shape[1:]:
            if n % div != 0:
                raise ValueError(f"spatial extents must divide by {div}, got {x.shape[1:]}")
        x = x.astype(self.dtype, copy=False)
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        keep = mode == "train" if keep_cache is None else keep_cache
        cache = {} if keep else None

        s1 = self._unit_forward("c1", x, mode, cache)
        t = self._unit_forward("c2_down", s1, mode, cache)
        s2 = self._unit_forward("c2_conv", t, mode, cache)
        t = self._unit_forward("c3_down", s2, mode, cache)
        s3 = self._unit_forward("c3_conv", t, mode, cache)
        t = self._unit_forward("b_down", s3, mode, cache)
        t = self._unit_forward("b_conv", t, mode, cache)
        t = self._unit_forward("e1_reduce", t, mode, cache)
        t = self._unit_forward("e1_deconv", t, mode, cache)
        t = self._merge(t, s3)
        q = self._unit_forward("e1_conv", t, mode, cache)
        t = self._unit_forward("e2_reduce", q, mode, cache)
        t = self._unit_forward("e2_deconv", t, mode, cache)
        t = self._merge(t, s2)
        h = self._unit_forward("e2_conv", t, mode, cache)
        t = self._unit_forward("e3_reduce", h, mode, cache)
        t = self._unit_forward("e3_deconv", t, mode, cache)
        t = self._merge(t, s1)
        f = self._unit_forward("e3_conv", t, mode, cache)

        taps = {"head_full": f, "head_half": h, "head_quarter": q}
        head_scores = {}
        for hname in self.heads:
            head_scores[hname] = layers.conv3d_forward(taps[hname], self.heads[hname])
        if self.spec.head_count == 3:
            coarse = head_scores["head_quarter"]
            mid = head_scores["head_half"] + resample_trilinear(coarse, h.shape[1:])
            fused = head_scores["head_full"] + resample_trilinear(mid, f.shape[1:])
        else:
            fused = head_scores["head_full"]
        if cache is not None:
            cache["_taps"] = taps
            cache["_mode"] = mode
        self._cache = cache  # an uncached pass invalidates any stale cache
        return SegmentationOutput(scores=fused, probs=_sigmoid(fused), head_scores=head_scores)

    def _merge(self, upsampled, skip):
        if self.spec.skip_mode == "sum":
            return upsampled + skip
        if self.spec.skip_mode == "concat":
            return np.concatenate([upsampled, skip], axis=0)
        return upsampled

    def _unit_backward(self, name, grad_a, grads, mode):
        u = self.units[name]
        x, z, h = self._cache[name]
        grad_h, d_slopes = layers.prelu_backward(h, u.act, grad_a)
        grad_z, d_gamma, d_beta = layers.batchnorm_backward(z, u.bn, grad_h, mode)
        if u.defn.kind in ("conv", "reduce"):
            grad_x, dw, db = layers.conv3d_backward(x, u.conv, grad_z)
        elif u.defn.kind == "down":
            grad_x, dw, db = layers.conv3d_strided_backward(x, u.conv, grad_z)
        else:
            grad_x, dw, db = layers.deconv3d_backward(x, u.conv, grad_z)
        grads[f"{name}.weights"] = dw
        grads[f"{name}.bias"] = db
        grads[f"{name}.gamma"] = d_gamma
        grads[f"{name}.beta"] = d_beta
        grads[f"{name}.slopes"] = d_slopes
        return grad_x

    def _split_merge(self, grad_merged, deconv_width):
        """Route a merged-tensor gradient back to (deconv branch, skip)."""
        if self.spec.skip_mode == "sum":
            return grad_merged, grad_merged
        if self.spec.skip_mode == "concat":
            return grad_merged[:deconv_width], grad_merged[deconv_width:]
        return grad_merged, None

    def backward(self, fused_grad, head_grads=None, inject=None):
        """Propagate d(loss)/d(fused raw scores) to every parameter.

        `head_grads` adds per-head gradients on the raw coarse maps
        (auxiliary losses); `inject` adds gradients directly onto named
        units' activated outputs, which the receptive-field support
        probe uses.  Requires a cached forward pass.  Returns (dict of
        parameter gradients, gradient w.r.t. the network input).
        """
        if self._cache is None:
            raise RuntimeError("backward requires a preceding forward pass with cache")
        cache = self._cache
        mode = cache["_mode"]
        head_grads = dict(head_grads or {})
        inject = dict(inject or {})
        taps = cache["_taps"]
        grads = {}

        # fused map -> per-head raw map gradients
        g_full = np.asarray(fused_grad)
        per_head = {"head_full": g_full + head_grads.get("head_full", 0.0)}
        if self.spec.head_count == 3:
            mid = resample_trilinear_adjoint(g_full, taps["head_half"].shape[1:])
            per_head["head_half"] = mid + head_grads.get("head_half", 0.0)
            per_head["head_quarter"] = (
                resample_trilinear_adjoint(mid, taps["head_quarter"].shape[1:])
                + head_grads.get("head_quarter", 0.0)
            )

        # head convolutions -> gradients on their tap activations
        tap_grad = {}
        for hname, g in per_head.items():
            gx, dw, db = layers.conv3d_backward(taps[hname], self.heads[hname], g)
            grads[f"{hname}.weights"] = dw
            grads[f"{hname}.bias"] = db
            src = {"head_full": "e3_conv", "head_half": "e2_conv", "head_quarter": "e1_conv"}[hname]
            tap_grad[src] = tap_grad.get(src, 0.0) + gx

        def out_grad(name, base):
            g = base
            if name in tap_grad:
                g = g + tap_grad[name]
            if name in inject:
                g = g + inject[name]
            return g

        def bk(name, g):
            return self._unit_backward(name, out_grad(name, g), grads, mode)

        pending = {}  # contracting unit -> skip gradient

        # the full-resolution head always exists, so e3_conv always has a
        # tap gradient and the 0.0 base broadcasts away
        g = bk("e3_conv", 0.0)
        g, skip = self._split_merge(g, self.units["e3_deconv"].defn.cout)
        if skip is not None:
            pending["c1"] = skip
        g = bk("e3_reduce", bk("e3_deconv", g))

        g = bk("e2_conv", g)
        g, skip = self._split_merge(g, self.units["e2_deconv"].defn.cout)
        if skip is not None:
            pending["c2_conv"] = skip
        g = bk("e2_reduce", bk("e2_deconv", g))

        g = bk("e1_conv", g)
        g, skip = self._split_merge(g, self.units["e1_deconv"].defn.cout)
        if skip is not None:
            pending["c3_conv"] = skip
        g = bk("e1_reduce", bk("e1_deconv", g))

        g = bk("b_down", bk("b_conv", g))

        g = bk("c3_conv", g + pending.get("c3_conv", 0.0))
        g = bk("c3_down", g)
        g = bk("c2_conv", g + pending.get("c2_conv", 0.0))
        g = bk("c2_down", g)
        input_grad = bk("c1", g + pending.get("c1", 0.0))
        return grads, input_grad


def predict_labels(net, x):
    """Infer-mode forward, then per-voxel argmax over class scores.

    Exact ties resolve to the lowest class index.
    """
    out = net.forward(x, mode="infer")
    return np.argmax(out.scores, axis=0).astype(np.uint8)


def ensemble_predict(nets, x):
    """Average per-class probability volumes over networks, then argmax."""
    if not nets:
        raise ValueError("empty ensemble")
    first = nets[0].spec
    for n in nets[1:]:
        if n.spec.class_count != first.class_count or n.spec.in_channels != first.in_channels:
            raise ValueError("ensemble members disagree on class count or input channels")
    acc = None
    for n in nets:
        p = n.forward(x, mode="infer").probs
        acc = p if acc is None else acc + p
    mean = acc / len(nets)
    return np.argmax(mean, axis=0).astype(np.uint8)
