"""Stacked spatio-temporal bilinear layers with pooling and a linear classifier."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .tensor import ParamTensor, RunningStats, glorot_uniform

MODES = ("train", "eval", "mc")


@dataclass(frozen=True)
class LayerSpec:
    f: int
    k: int = 3
    p: float = 0.2

    def __post_init__(self):
        if self.f < 1:
            raise ValueError(f"layer width must be >= 1, got {self.f}")
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"temporal kernel size must be a positive odd integer, got {self.k}")
        if not 0 <= self.p < 1:
            raise ValueError(f"dropout probability must lie in [0, 1), got {self.p}")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    edge_count: int
    classes: int
    frames: int
    input_channels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.edge_count < 1:
            raise ValueError("edge_count must be >= 1")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.frames < 1 or self.input_channels < 1:
            raise ValueError("frames and input_channels must be >= 1")

    @classmethod
    def from_widths(cls, widths, edge_count, classes, frames, k=3, p=0.2) -> "NetworkSpec":
        return cls(tuple(LayerSpec(int(f), k, p) for f in widths), edge_count, classes, frames)

    @property
    def widths(self) -> list[int]:
        return [layer.f for layer in self.layers]

    @property
    def feature_width(self) -> int:
        return self.layers[-1].f if self.layers else self.input_channels

    def replace(self, **changes) -> "NetworkSpec":
        d = dict(layers=self.layers, edge_count=self.edge_count, classes=self.classes,
                 frames=self.frames, input_channels=self.input_channels)
        d.update(changes)
        return NetworkSpec(**d)

    def to_dict(self) -> dict:
        return {
            "layers": [{"f": l.f, "k": l.k, "p": l.p} for l in self.layers],
            "edge_count": self.edge_count,
            "classes": self.classes,
            "frames": self.frames,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        unknown = set(d) - {"layers", "edge_count", "classes", "frames", "input_channels"}
        if unknown:
            raise ValueError(f"unknown NetworkSpec keys: {sorted(unknown)}")
        layers = tuple(LayerSpec(int(l["f"]), int(l.get("k", 3)), float(l.get("p", 0.2))) for l in d["layers"])
        return cls(layers, int(d["edge_count"]), int(d["classes"]), int(d["frames"]),
                   int(d.get("input_channels", 2)))

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))


def layer_param_shapes(f_in: int, layer: LayerSpec, edge_count: int) -> dict[str, tuple[int, ...]]:
    f, k, E = layer.f, layer.k, edge_count
    return {
        "U": (E, E),
        "W": (f, f_in),
        "W_bias": (f,),
        "temporal": (f, f, k, 1),
        "temporal_bias": (f,),
        "bn1_gamma": (f,),
        "bn1_beta": (f,),
        "bn2_gamma": (f,),
        "bn2_beta": (f,),
        "res1": (f, f_in),
        "res1_bias": (f,),
        "res2": (f, f),
        "res2_bias": (f,),
    }


def param_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor of ``spec`` by qualified name, in canonical order."""
    shapes = {}
    f_in = spec.input_channels
    for i, layer in enumerate(spec.layers):
        for name, shape in layer_param_shapes(f_in, layer, spec.edge_count).items():
            shapes[f"layer{i}.{name}"] = shape
        f_in = layer.f
    shapes["fc.weight"] = (spec.classes, f_in)
    shapes["fc.bias"] = (spec.classes,)
    return shapes


def count_params_for(spec: NetworkSpec) -> int:
    """Closed-form learnable-scalar count of a network built from ``spec``.

    Per layer with input width ``g``, output width ``f``, kernel ``K`` and
    ``E`` edges: ``E^2 + f*g + f + K*f^2 + f + 4f + (f*g + f) + (f^2 + f)``;
    the classifier adds ``C*f_last + C``.
    """
    total = 0
    g = spec.input_channels
    E = spec.edge_count
    for layer in spec.layers:
        f, K = layer.f, layer.k
        total += E * E + (f * g + f) + (K * f * f + f) + 4 * f + (f * g + f) + (f * f + f)
        g = f
    return total + spec.classes * g + spec.classes


class STBLLayer:
    """One spatio-temporal bilinear layer and its two residual branches."""

    def __init__(self, f_in: int, spec: LayerSpec, edge_count: int, rng: np.random.Generator | None = None):
        self.f_in = f_in
        self.spec = spec
        self.edge_count = edge_count
        f, k, E = spec.f, spec.k, edge_count
        if rng is None:
            rng = np.random.default_rng(0)
        self.params = {
            "U": ParamTensor(glorot_uniform(rng, (E, E), E, E)),
            "W": ParamTensor(glorot_uniform(rng, (f, f_in), f_in, f)),
            "W_bias": ParamTensor(np.zeros(f)),
            "temporal": ParamTensor(glorot_uniform(rng, (f, f, k, 1), f * k, f * k)),
            "temporal_bias": ParamTensor(np.zeros(f)),
            "bn1_gamma": ParamTensor(np.ones(f)),
            "bn1_beta": ParamTensor(np.zeros(f)),
            "bn2_gamma": ParamTensor(np.ones(f)),
            "bn2_beta": ParamTensor(np.zeros(f)),
            "res1": ParamTensor(glorot_uniform(rng, (f, f_in), f_in, f)),
            "res1_bias": ParamTensor(np.zeros(f)),
            "res2": ParamTensor(glorot_uniform(rng, (f, f), f, f)),
            "res2_bias": ParamTensor(np.zeros(f)),
        }
        self.bn1 = RunningStats.fresh(f)
        self.bn2 = RunningStats.fresh(f)
        self._cache = None

    @property
    def width(self) -> int:
        return self.spec.f

    def forward(self, x, mode: str, rng=None, mask=None, keep_cache: bool = False):
        P = self.params
        bn_mode = "train" if mode == "train" else "eval"
        r1, c_r1 = tc.conv1x1_forward(x, P["res1"], P["res1_bias"])
        b, c_b = tc.bilinear_forward(x, P["U"], P["W"], P["W_bias"], relu=False)
        bn1, c_bn1 = tc.batch_norm_forward(b, P["bn1_gamma"], P["bn1_beta"], self.bn1, bn_mode)
        s, m_s = tc.relu_forward(bn1 + r1)
        r2, c_r2 = tc.conv1x1_forward(s, P["res2"], P["res2_bias"])
        t, c_t = tc.temporal_conv_forward(s, P["temporal"], P["temporal_bias"])
        bn2, c_bn2 = tc.batch_norm_forward(t, P["bn2_gamma"], P["bn2_beta"], self.bn2, bn_mode)
        y, m_y = tc.relu_forward(bn2 + r2)
        active = mode in ("train", "mc")
        out, drop_mask = tc.dropout(y, self.spec.p, rng, active=active, mask=mask)
        if keep_cache:
            self._cache = (c_r1, c_b, c_bn1, m_s, c_r2, c_t, c_bn2, m_y, drop_mask)
        return out

    def backward(self, dout):
        c_r1, c_b, c_bn1, m_s, c_r2, c_t, c_bn2, m_y, drop_mask = self._cache
        dy = tc.relu_backward(tc.dropout_backward(dout, drop_mask), m_y)
        ds = tc.temporal_conv_backward(tc.batch_norm_backward(dy, c_bn2), c_t)
        ds += tc.conv1x1_backward(dy, c_r2)
        ds = tc.relu_backward(ds, m_s)
        dx = tc.bilinear_backward(tc.batch_norm_backward(ds, c_bn1), c_b)
        dx += tc.conv1x1_backward(ds, c_r1)
        self._cache = None
        return dx

    def clear_cache(self):
        self._cache = None


class STBLN:
    """A stack of :class:`STBLLayer` followed by global average pooling and a linear classifier."""

    def __init__(self, spec: NetworkSpec, layers: list[STBLLayer], fc_weight: ParamTensor, fc_bias: ParamTensor, seed: int = 0):
        self.spec = spec
        self.layers = layers
        self.fc_weight = fc_weight
        self.fc_bias = fc_bias
        self.seed = seed
        self._head_cache = None

    # -- introspection -----------------------------------------------------

    def named_parameters(self) -> list[tuple[str, ParamTensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"layer{i}.{name}", p) for name, p in layer.params.items())
        out.append(("fc.weight", self.fc_weight))
        out.append(("fc.bias", self.fc_bias))
        return out

    def parameters(self) -> list[ParamTensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            out += [
                (f"layer{i}.bn1_running_mean", layer.bn1.mean),
                (f"layer{i}.bn1_running_var", layer.bn1.var),
                (f"layer{i}.bn2_running_mean", layer.bn2.mean),
                (f"layer{i}.bn2_running_var", layer.bn2.var),
            ]
        return out

    def count_params(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def clone(self) -> "STBLN":
        return copy.deepcopy(self)

    # -- computation -------------------------------------------------------

    def forward(self, batch, mode: str = "eval", rng: np.random.Generator | None = None,
                masks=None, keep_cache: bool = False) -> np.ndarray:
        """Logits ``(N, C)`` for a batch ``(N, 2, T, E)``.

        ``mode`` is ``train`` (batch statistics, dropout on), ``eval``
        (running statistics, dropout off) or ``mc`` (running statistics,
        dropout on).  ``masks`` optionally fixes every layer's dropout mask.
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        x = np.asarray(batch, dtype=tc.DTYPE)
        if x.ndim != 4 or x.shape[1:] != (self.spec.input_channels, self.spec.frames, self.spec.edge_count):
            raise ValueError(
                f"batch shape {x.shape} does not match (N, {self.spec.input_channels}, "
                f"{self.spec.frames}, {self.spec.edge_count})"
            )
        if mode != "eval" and rng is None and masks is None and any(l.spec.p > 0 for l in self.layers):
            raise ValueError(f"{mode} mode with dropout needs a random generator")
        for i, layer in enumerate(self.layers):
            mask = None if masks is None else masks[i]
            x = layer.forward(x, mode, rng, mask, keep_cache)
        pooled, c_pool = tc.global_avg_pool_forward(x)
        logits, c_fc = tc.linear_forward(pooled, self.fc_weight, self.fc_bias)
        self._head_cache = (c_pool, c_fc) if keep_cache else None
        return logits

    def backward(self, dlogits):
        c_pool, c_fc = self._head_cache
        dx = tc.global_avg_pool_backward(tc.linear_backward(dlogits, c_fc), c_pool)
        for layer in reversed(self.layers):
            dx = layer.backward(dx)
        self._head_cache = None
        return dx

    def loss_and_grad(self, batch, labels, mode: str = "train", rng=None, masks=None) -> float:
        """Forward + backward; accumulates gradients and returns the mean loss."""
        logits = self.forward(batch, mode, rng, masks, keep_cache=True)
        loss, dlogits = tc.softmax_cross_entropy(logits, labels)
        self.backward(dlogits)
        return loss

    def predict_proba(self, batch, mode: str = "eval", rng=None) -> np.ndarray:
        return tc.softmax(self.forward(batch, mode, rng))

    # -- topology edits (used by progressive growth) -----------------------

    def reset_classifier(self, rng: np.random.Generator):
        f = self.spec.feature_width
        C = self.spec.classes
        self.fc_weight = ParamTensor(glorot_uniform(rng, (C, f), f, C))
        self.fc_bias = ParamTensor(np.zeros(C))

    def append_layer(self, layer_spec: LayerSpec, rng: np.random.Generator):
        f_in = self.spec.feature_width
        self.layers.append(STBLLayer(f_in, layer_spec, self.spec.edge_count, rng))
        self.spec = self.spec.replace(layers=self.spec.layers + (layer_spec,))
        self.reset_classifier(rng)

    def widen_last_layer(self, extra: int, rng: np.random.Generator):
        """Add ``extra`` output channels to every tensor of the last layer.

        Existing entries are kept bit-identical; new slices are drawn from
        ``rng`` using the layer's initialisation rule.  The classifier is
        re-created for the new feature width.
        """
        layer = self.layers[-1]
        old = layer.width
        new = old + extra
        k = layer.spec.k
        f_in = layer.f_in
        P = layer.params

        def grow(name, shape, fill):
            pt = P[name]
            value = np.array(fill(shape), dtype=tc.DTYPE)
            idx = tuple(slice(0, s) for s in pt.shape)
            value[idx] = pt.value
            buf = np.zeros(shape)
            buf[idx] = pt.momentum_buffer
            P[name] = ParamTensor(value, np.zeros(shape), buf)

        def glorot(fan_in, fan_out):
            return lambda shape: glorot_uniform(rng, shape, fan_in, fan_out)

        grow("W", (new, f_in), glorot(f_in, new))
        grow("W_bias", (new,), np.zeros)
        grow("temporal", (new, new, k, 1), glorot(new * k, new * k))
        grow("temporal_bias", (new,), np.zeros)
        grow("bn1_gamma", (new,), np.ones)
        grow("bn1_beta", (new,), np.zeros)
        grow("bn2_gamma", (new,), np.ones)
        grow("bn2_beta", (new,), np.zeros)
        grow("res1", (new, f_in), glorot(f_in, new))
        grow("res1_bias", (new,), np.zeros)
        grow("res2", (new, new), glorot(new, new))
        grow("res2_bias", (new,), np.zeros)
        for stats in (layer.bn1, layer.bn2):
            stats.mean = np.concatenate([stats.mean, np.zeros(extra)])
            stats.var = np.concatenate([stats.var, np.ones(extra)])
        layer.spec = LayerSpec(new, k, layer.spec.p)
        self.spec = self.spec.replace(layers=self.spec.layers[:-1] + (layer.spec,))
        self.reset_classifier(rng)


def build_model(spec: NetworkSpec, seed: int = 0) -> STBLN:
    """Allocate and randomly initialise every parameter of ``spec``.

    Draw order is fixed (layers first, in declaration order, then the
    classifier) so a seed reproduces the same weights bit for bit.
    """
    rng = np.random.default_rng(seed)
    layers = []
    f_in = spec.input_channels
    for layer_spec in spec.layers:
        layers.append(STBLLayer(f_in, layer_spec, spec.edge_count, rng))
        f_in = layer_spec.f
    C = spec.classes
    fc_weight = ParamTensor(glorot_uniform(rng, (C, f_in), f_in, C))
    fc_bias = ParamTensor(np.zeros(C))
    return STBLN(spec, layers, fc_weight, fc_bias, seed)


def count_params(model: STBLN) -> int:
    return model.count_params()
