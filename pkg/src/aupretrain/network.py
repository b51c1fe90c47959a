"""The modified VGG13 used for action-unit detection.

Layer table (input 64x64, 3x3 convolutions with stride 1 and padding 1)::

    conv1_1 conv1_2                pool1 + drop 0.25     64 x 32 x 32
    conv2_1 conv2_2                pool2 + drop 0.25    128 x 16 x 16
    conv3_1 conv3_2 conv3_3        pool3 + drop 0.25    256 x  8 x  8
    conv4_1 conv4_2 conv4_3        pool4 + drop 0.25    256 x  4 x  4
    fc5 (1024) + ReLU + drop 0.5
    fc6 (1024) + ReLU + drop 0.5
    output (num_outputs) + sigmoid

``width_multiplier`` scales every channel count and the FC width. It exists
for desk-scale experiments; the default of 1.0 is the architecture above.
``dropout_scale`` multiplies every drop rate (default 1.0). Narrow networks
with the full rates stay at the label-frequency baseline, so reduced-width
runs usually lower it too.

Weights are drawn uniformly in ``[-b, b]`` with ``b = sqrt(gain / fan_in)``.
Layers followed by a ReLU use gain 6 under ``"he_uniform"`` (the default)
and gain 1 under ``"fan_in_uniform"``. With gain 1 the activation scale
shrinks at every ReLU layer, and 13 layers deep the output barely depends
on the input, so training stalls. The sigmoid output layer and all biases
use gain 1 under both schemes, which keeps initial outputs off saturation.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError

INPUT_SIZE = 64
HEAD = "output"
INIT_GAINS = {"he_uniform": 6.0, "fan_in_uniform": 1.0}
DEFAULT_INIT = "he_uniform"

# (name, kind, base width, drop rate)
_TOPOLOGY = (
    ("conv1_1", "conv", 64, 0.0),
    ("conv1_2", "conv", 64, 0.0),
    ("pool1", "pool", None, 0.25),
    ("conv2_1", "conv", 128, 0.0),
    ("conv2_2", "conv", 128, 0.0),
    ("pool2", "pool", None, 0.25),
    ("conv3_1", "conv", 256, 0.0),
    ("conv3_2", "conv", 256, 0.0),
    ("conv3_3", "conv", 256, 0.0),
    ("pool3", "pool", None, 0.25),
    ("conv4_1", "conv", 256, 0.0),
    ("conv4_2", "conv", 256, 0.0),
    ("conv4_3", "conv", 256, 0.0),
    ("pool4", "pool", None, 0.25),
    ("fc5", "fc", 1024, 0.5),
    ("fc6", "fc", 1024, 0.5),
    (HEAD, "output", None, 0.0),
)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | pool | fc | output
    filter_size: int | None
    stride: int | None
    drop: float
    in_features: int | None
    out_features: int | None
    output_shape: tuple


def _scaled(width, multiplier):
    return max(1, int(round(width * multiplier)))


def _layer_specs(in_channels, num_outputs, width_multiplier, dropout_scale=1.0):
    specs = []
    c, h = in_channels, INPUT_SIZE
    flat = None
    for name, kind, width, drop in _TOPOLOGY:
        drop *= dropout_scale
        if kind == "conv":
            out = _scaled(width, width_multiplier)
            specs.append(LayerSpec(name, kind, 3, 1, drop, c, out, (out, h, h)))
            c = out
        elif kind == "pool":
            h //= 2
            specs.append(LayerSpec(name, kind, 2, 2, drop, None, None, (c, h, h)))
        else:
            n_in = flat if flat is not None else c * h * h
            out = num_outputs if kind == "output" else _scaled(width, width_multiplier)
            specs.append(LayerSpec(name, kind, None, None, drop, n_in, out, (out,)))
            flat = out
    return specs


class VGG13:
    """Modified VGG13 multi-label classifier with sigmoid outputs."""

    def __init__(self, in_channels=1, num_outputs=17, seed=0, width_multiplier=1.0, dtype=np.float32,
                 init=DEFAULT_INIT, dropout_scale=1.0):
        if in_channels not in (1, 3):
            raise ConfigError(f"in_channels must be 1 or 3, got {in_channels}")
        if num_outputs < 1:
            raise ConfigError(f"num_outputs must be at least 1, got {num_outputs}")
        if not width_multiplier > 0:
            raise ConfigError(f"width_multiplier must be positive, got {width_multiplier}")
        if init not in INIT_GAINS:
            raise ConfigError(f"init must be one of {sorted(INIT_GAINS)}, got {init!r}")
        if not 0.0 <= dropout_scale <= 1.0:
            raise ConfigError(f"dropout_scale must lie in [0, 1], got {dropout_scale}")
        self.init = init
        self.dropout_scale = float(dropout_scale)
        self.in_channels = in_channels
        self.num_outputs = num_outputs
        self.width_multiplier = float(width_multiplier)
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.layers = _layer_specs(in_channels, num_outputs, self.width_multiplier, self.dropout_scale)
        self.parameters = {}
        self.metadata = {}
        rng = np.random.default_rng(seed)
        for spec in self.layers:
            if spec.kind != "pool":
                self._init_layer(spec, rng)

    def _init_layer(self, spec, rng):
        if spec.kind == "conv":
            wshape = (spec.out_features, spec.in_features, 3, 3)
        else:
            wshape = (spec.out_features, spec.in_features)
        fan_in = int(np.prod(wshape[1:]))
        gain = 1.0 if spec.kind == "output" else INIT_GAINS[self.init]
        bound = np.sqrt(gain / fan_in)
        w = rng.uniform(-bound, bound, size=wshape).astype(self.dtype)
        bias_bound = np.sqrt(1.0 / fan_in)
        b = rng.uniform(-bias_bound, bias_bound, size=spec.out_features).astype(self.dtype)
        self.parameters[f"{spec.name}.weight"] = T.Tensor(w, requires_grad=True)
        self.parameters[f"{spec.name}.bias"] = T.Tensor(b, requires_grad=True)

    @property
    def head(self):
        return self.layers[-1]

    def architecture(self):
        return {
            "in_channels": self.in_channels,
            "num_outputs": self.num_outputs,
            "width_multiplier": self.width_multiplier,
            "init": self.init,
            "dropout_scale": self.dropout_scale,
        }

    def parameter_count(self):
        return int(sum(t.data.size for t in self.parameters.values()))

    def forward(self, batch, training=False, rng=None, trace=None):
        """Return per-label probabilities of dims (B, num_outputs).

        ``rng`` drives dropout and is required when ``training`` is true.
        If ``trace`` is a list, ``(layer name, per-sample output dims)`` pairs
        are appended to it.
        """
        x = T.as_tensor(batch)
        if x.ndim != 4 or x.shape[1] != self.in_channels or x.shape[2:] != (INPUT_SIZE, INPUT_SIZE):
            raise ShapeError(
                f"expected batch dims (B, {self.in_channels}, {INPUT_SIZE}, {INPUT_SIZE}), got {x.dims}"
            )
        if x.dtype != self.dtype:
            x = T.Tensor(x.data.astype(self.dtype))
        params = self.parameters
        for spec in self.layers:
            w = params.get(f"{spec.name}.weight")
            b = params.get(f"{spec.name}.bias")
            if spec.kind == "conv":
                x = T.relu(T.conv2d(x, w, b, stride=1, padding=1))
            elif spec.kind == "pool":
                x = T.dropout(T.maxpool2d(x, 2, 2), spec.drop, training, rng)
            elif spec.kind == "fc":
                if x.ndim > 2:
                    x = T.flatten(x)
                x = T.dropout(T.relu(T.linear(x, w, b)), spec.drop, training, rng)
            else:
                x = T.sigmoid(T.linear(x, w, b))
            if trace is not None:
                trace.append((spec.name, tuple(x.shape[1:])))
        return x

    __call__ = forward

    def predict_proba(self, batch, batch_size=64):
        """Eval-mode forward over an array of images without recording a graph."""
        batch = np.asarray(batch)
        out = []
        with T.no_grad():
            for i in range(0, len(batch), batch_size):
                out.append(self.forward(batch[i:i + batch_size]).data)
        if not out:
            return np.zeros((0, self.num_outputs), dtype=self.dtype)
        return np.concatenate(out)

    def state_dict(self):
        return {n: t.data.copy() for n, t in self.parameters.items()}

    def load_state_dict(self, state):
        if set(state) != set(self.parameters):
            missing = sorted(set(self.parameters) - set(state))
            extra = sorted(set(state) - set(self.parameters))
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, arr in state.items():
            p = self.parameters[name]
            if p.data.shape != np.shape(arr):
                raise ShapeError(f"{name}: expected dims {p.data.shape}, got {np.shape(arr)}")
            p.data = np.array(arr, dtype=self.dtype)
            p.grad = None

    def zero_grad(self):
        for t in self.parameters.values():
            t.grad = None

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        """Copy of the network with parameters cast to ``dtype``."""
        net = self.copy()
        net.dtype = np.dtype(dtype)
        for t in net.parameters.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return net


def build_vgg13(in_channels=1, num_outputs=17, seed=0, width_multiplier=1.0, dtype=np.float32, init=DEFAULT_INIT,
                dropout_scale=1.0):
    return VGG13(in_channels, num_outputs, seed, width_multiplier, dtype, init, dropout_scale)


def replace_head(net, new_num_outputs, seed):
    """Copy of ``net`` with a freshly initialized output layer.

    All other parameters are copied bit-for-bit.
    """
    if new_num_outputs < 1:
        raise ConfigError(f"new_num_outputs must be at least 1, got {new_num_outputs}")
    if not isinstance(net, VGG13):
        raise ConfigError("replace_head expects a VGG13 network")
    new = net.copy()
    for name in (f"{HEAD}.weight", f"{HEAD}.bias"):
        del new.parameters[name]
    old = new.layers[-1]
    spec = LayerSpec(old.name, old.kind, None, None, old.drop, old.in_features, new_num_outputs, (new_num_outputs,))
    new.layers[-1] = spec
    new.num_outputs = new_num_outputs
    new._init_layer(spec, np.random.default_rng(seed))
    for t in new.parameters.values():
        t.grad = None
    return new
