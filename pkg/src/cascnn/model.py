"""CAS-CNN: split convolutions with channel-wise attention over the stacked
history of OD matrices, fused row-wise with an inflow/outflow gate.

Data flow for one sample (x history days, y flow steps, n stations)::

    history x*n*n --input attention--> split conv (k=3,5; each branch
    attended) --relu--> split conv to 1 channel --> trunk n*n
    inflow/outflow y*n --1x1 conv--> A_in, A_out;  gate = w * A_in * A_out
    prediction = head_scale * (trunk + gate by rows) + head_bias
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError
from .tensor import Parameter

ABLATIONS = ("no_split", "no_channel_attention", "no_inflow", "no_outflow")


@dataclass
class ModelConfig:
    n: int
    x: int = 5
    y: int = 5
    kernels: tuple = (3, 5)
    filters_layer1: int = 16
    filters_layer2: int = 1
    reduction: int = 2
    no_split: bool = False
    no_channel_attention: bool = False
    no_inflow: bool = False
    no_outflow: bool = False
    ca_after_layer2: bool = False

    def __post_init__(self):
        self.kernels = tuple(int(k) for k in self.kernels)
        problems = []
        if self.n < 1:
            problems.append(f"n={self.n} must be >= 1")
        if self.x < 1 or self.y < 1:
            problems.append("x and y must be >= 1")
        if not self.kernels or any(k < 1 or k % 2 == 0 for k in self.kernels):
            problems.append(f"kernels must be odd and non-empty, got {self.kernels}")
        if self.filters_layer1 < 1 or self.filters_layer2 < 1:
            problems.append("filters must be >= 1")
        if self.reduction < 1:
            problems.append(f"reduction R must be >= 1, got {self.reduction}")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def active_kernels(self):
        # the plain-CNN ablation keeps a single 3x3 kernel
        return (3,) if self.no_split else self.kernels

    @property
    def uses_gate(self):
        return not (self.no_inflow and self.no_outflow)


def attention_width(channels, reduction):
    return max(1, channels // reduction)


# -- building blocks -------------------------------------------------------------

def channel_attention(x, net):
    """Squeeze (global mean) and excite (dense-relu-dense-sigmoid) per channel.

    ``net`` holds ``w1`` (h x C), ``b1``, ``w2`` (C x h), ``b2``. Returns the
    rescaled input and the attention vector.
    """
    pooled = T.global_avg_pool(x)
    hidden = T.relu(T.dense(pooled, net["w1"], net["b1"]))
    delta = T.sigmoid(T.dense(hidden, net["w2"], net["b2"]))
    return T.scale_channels(x, delta), delta


def split_conv(x, branches, attention=None):
    """Sum of same-padded convolutions with different kernel sizes.

    ``branches`` maps kernel size -> (weight, bias); ``attention`` optionally
    maps kernel size -> attention net applied to that branch before the sum.
    """
    out = None
    for k, (weight, bias) in branches.items():
        y = T.conv2d_same(x, weight, bias)
        if attention is not None:
            y, _ = channel_attention(y, attention[k])
        out = y if out is None else T.add(out, y)
    return out


def gate_branch(inflow, outflow, params, no_inflow=False, no_outflow=False):
    """Per-station gate ``w * A_in * A_out`` from y x n flow windows.

    Each 1x1 convolution maps the y time-step channels to one channel over an
    n x 1 station map.
    """
    if no_inflow and no_outflow:
        raise ConfigError("gate_branch with both flow branches ablated; disable the gate instead")
    w = params["w"]
    n = w.shape[0]
    out = w
    for name, skip, series in (("inflow", no_inflow, inflow), ("outflow", no_outflow, outflow)):
        if skip:
            continue
        series = T.constant(series)
        if series.values.ndim != 2 or series.shape[1] != n:
            raise DimensionError("gate_branch", f"{name} station axis", n, series.shape)
        y = series.shape[0]
        conv = T.conv1x1(T.reshape(series, (y, n, 1)), params[f"{name}.weight"], params[f"{name}.bias"])
        out = T.mul(out, T.reshape(conv, (n,)))
    return out


# -- models ---------------------------------------------------------------------

class Model:
    """Shared parameter bookkeeping."""

    kind = "base"

    def __init__(self):
        self.params = {}

    def _add(self, name, values):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(values, name)
        self.params[name] = p
        return p

    def _xavier(self, name, shape, fan_in, fan_out, rng):
        return self._add(name, T.xavier_normal_init(shape, fan_in, fan_out, rng).values)

    def parameters(self):
        return list(self.params.values())

    def n_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        return {name: p.values.copy() for name, p in self.params.items()}

    def load_state(self, state):
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise DimensionError("load_state", name, p.shape, state[name].shape)
            p.values[...] = state[name]

    def predict(self, sample):
        return self.forward(sample).values


class CasCnn(Model):
    kind = "cascnn"

    def __init__(self, config, rng=None):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(0) if rng is None else rng
        c = config
        use_ca = not c.no_channel_attention
        if use_ca:
            self.input_attention = self._attention_net("input_ca", c.x, rng)
        self.layer1, self.layer2 = {}, {}
        self.layer1_attention = {} if use_ca else None
        self.layer2_attention = {} if use_ca and c.ca_after_layer2 else None
        for k in c.active_kernels:
            self.layer1[k] = self._conv(f"layer1.k{k}", c.x, c.filters_layer1, k, rng)
            if self.layer1_attention is not None:
                self.layer1_attention[k] = self._attention_net(f"layer1.k{k}.ca", c.filters_layer1, rng)
        for k in c.active_kernels:
            self.layer2[k] = self._conv(f"layer2.k{k}", c.filters_layer1, c.filters_layer2, k, rng)
            if self.layer2_attention is not None:
                self.layer2_attention[k] = self._attention_net(f"layer2.k{k}.ca", c.filters_layer2, rng)
        if c.uses_gate:
            self.gate = {}
            for name, skip in (("inflow", c.no_inflow), ("outflow", c.no_outflow)):
                if not skip:
                    self.gate[f"{name}.weight"] = self._xavier(f"gate.{name}.weight", (1, c.y), c.y, 1, rng)
                    self.gate[f"{name}.bias"] = self._add(f"gate.{name}.bias", np.zeros(1))
            self.gate["w"] = self._add("gate.w", np.ones(c.n))
        self.head_weight = self._xavier("head.weight", (1, c.filters_layer2), c.filters_layer2, 1, rng)
        self.head_bias = self._add("head.bias", np.zeros(1))

    def _conv(self, name, c_in, c_out, k, rng):
        weight = self._xavier(f"{name}.weight", (c_out, c_in, k, k), c_in * k * k, c_out * k * k, rng)
        return weight, self._add(f"{name}.bias", np.zeros(c_out))

    def _attention_net(self, name, channels, rng):
        h = attention_width(channels, self.config.reduction)
        return {
            "w1": self._xavier(f"{name}.w1", (h, channels), channels, h, rng),
            "b1": self._add(f"{name}.b1", np.zeros(h)),
            "w2": self._xavier(f"{name}.w2", (channels, h), h, channels, rng),
            "b2": self._add(f"{name}.b2", np.zeros(channels)),
        }

    def forward(self, sample):
        c = self.config
        n = c.n
        history = T.constant(sample.history)
        if history.shape != (c.x, n, n):
            raise DimensionError("CasCnn.forward", "history shape", (c.x, n, n), history.shape)
        if not c.no_channel_attention:
            history, _ = channel_attention(history, self.input_attention)
        hidden = T.relu(split_conv(history, self.layer1, self.layer1_attention))
        trunk = split_conv(hidden, self.layer2, self.layer2_attention)
        fused = trunk
        if c.uses_gate:
            if c.filters_layer2 != 1:
                raise ConfigError("the row-wise gate needs a single-channel trunk (filters_layer2 = 1)")
            gate = gate_branch(sample.inflow_win, sample.outflow_win, self.gate, c.no_inflow, c.no_outflow)
            fused = T.reshape(T.broadcast_rows(T.reshape(trunk, (n, n)), gate), (1, n, n))
        out = T.conv1x1(fused, self.head_weight, self.head_bias)
        return T.reshape(out, (n, n))


@dataclass
class BaselineConfig:
    n: int
    x: int = 5
    filters: tuple = (8, 16, 1)
    kernel: int = 5

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)
        if self.kernel % 2 == 0 or self.filters[-1] != 1:
            raise ConfigError("baseline needs an odd kernel and a single output filter")


class BaselineCnn(Model):
    """Plain stacked same-padded CNN over the history; ignores flow inputs."""

    kind = "cnn2d"

    def __init__(self, config, rng=None):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(0) if rng is None else rng
        k = config.kernel
        self.layers = []
        c_in = config.x
        for i, c_out in enumerate(config.filters):
            w = self._xavier(f"conv{i + 1}.weight", (c_out, c_in, k, k), c_in * k * k, c_out * k * k, rng)
            b = self._add(f"conv{i + 1}.bias", np.zeros(c_out))
            self.layers.append((w, b))
            c_in = c_out

    def forward(self, sample):
        n = self.config.n
        h = T.constant(sample.history)
        for i, (w, b) in enumerate(self.layers):
            h = T.conv2d_same(h, w, b)
            if i < len(self.layers) - 1:
                h = T.relu(h)
        return T.reshape(h, (n, n))


def build_baseline_cnn(config, rng=None):
    return BaselineCnn(config, rng)


def build_model(kind, config, rng=None):
    if kind == "cascnn":
        return CasCnn(config, rng)
    if kind == "cnn2d":
        return BaselineCnn(config, rng)
    raise ConfigError(f"unknown model kind {kind!r}")


# -- checkpoints -------------------------------------------------------------------

def save_checkpoint(model, path):
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float64)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, p in model.params.items():
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(np.ascontiguousarray(p.values, dtype="<f8").tobytes())
        offset += p.size
    manifest = {
        "format": "cascnn-checkpoint/1",
        "dtype": "<f8",
        "kind": model.kind,
        "config": asdict(model.config),
        "params": entries,
        "total": offset,
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")
    path.with_suffix(".bin").write_bytes(b"".join(chunks))


def load_checkpoint(path):
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != "cascnn-checkpoint/1":
        raise FormatError(f"{path}: unknown checkpoint format")
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    if flat.size != manifest["total"]:
        raise FormatError(f"{path}: expected {manifest['total']} values, found {flat.size}")
    cfg = manifest["config"]
    config = ModelConfig(**cfg) if manifest["kind"] == "cascnn" else BaselineConfig(**cfg)
    model = build_model(manifest["kind"], config)
    state = {}
    for e in manifest["params"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        state[e["name"]] = flat[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(np.float64)
    if set(state) != set(model.params):
        raise FormatError(f"{path}: parameter names do not match a {manifest['kind']} model")
    model.load_state(state)
    return model
