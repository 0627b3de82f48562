"""The five nexus architectures, their dimension checker and checkpoints.

A nexus model is two CNNs joined by channel concatenation.  The first half
maps the 4x33x33 context patch to a 5x15x15 per-position class-probability
map; that map is stacked with the 4x15x15 local patch and the second half
maps the resulting 9 planes to a 1152-feature vector, then a dense layer and
softmax give the 5 class probabilities of the centre pixel.
"""
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError, ShapeError, StateError, VersionError
from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MaxPool2D,
    ReLU,
    Softmax,
    concat_channels,
    softmax,
)
from .tensor import read_tensor, write_tensor

ARCHITECTURES = ("LN", "TPN", "TLinear", "IN", "ILinear")
N_CLASSES = 5
N_MODALITIES = 4
BIG, SMALL = 33, 15
DENSE_FEATURES = 1152

CHECKPOINT_MAGIC = b"NXCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    width: int = 64  # maps per hidden convolution
    final_maps: int = 128  # maps of the last 3x3 stage (128*3*3 = 1152)
    keep_first: float = 0.5
    keep_second: float = 0.6
    keep_out: float = 0.7
    init_std: float | None = None  # None: He scaling sqrt(2/fan_in)
    output_std: float = 0.005
    output_bias: float = 0.2
    bn_eps: float = 1e-7
    bn_momentum: float = 0.9
    # kernel overrides for the linear halves; used to build deliberately broken variants
    first_kernels: tuple = (13, 7)
    second_kernels: tuple = (7, 5, 3)

    def __post_init__(self):
        self.first_kernels = tuple(self.first_kernels)
        self.second_kernels = tuple(self.second_kernels)

    def to_dict(self):
        d = asdict(self)
        d["first_kernels"] = list(self.first_kernels)
        d["second_kernels"] = list(self.second_kernels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            if grad is None:
                break
            grad = layer.backward(grad)
        return grad

    def out_shape(self, shape):
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def children(self):
        return list(enumerate(self.layers))

    def describe(self):
        return " -> ".join(layer.describe() for layer in self.layers)


class Parallel(Layer):
    """Branches fed the same input; outputs concatenated along channels."""

    def __init__(self, branches):
        super().__init__()
        self.branches = list(branches)
        self._splits = None

    def forward(self, x, train=False):
        outs = [b.forward(x, train=train) for b in self.branches]
        self._splits = np.cumsum([o.shape[1] for o in outs])[:-1]
        return np.concatenate(outs, axis=1)

    def backward(self, grad):
        if self._splits is None:
            raise StateError("parallel backward called before forward")
        total = None
        for b, g in zip(self.branches, np.split(grad, self._splits, axis=1)):
            gi = b.backward(np.ascontiguousarray(g))
            if gi is not None:
                total = gi if total is None else total + gi
        return total

    def out_shape(self, shape):
        outs = [b.out_shape(shape) for b in self.branches]
        spatial = {o[1:] for o in outs}
        if len(spatial) != 1:
            raise ShapeError(f"parallel paths disagree on spatial extent: {outs}")
        return (sum(o[0] for o in outs), *outs[0][1:])

    def children(self):
        return list(enumerate(self.branches))

    def describe(self):
        return "[" + " | ".join(b.describe() for b in self.branches) + "]"


def _walk(layer, prefix):
    yield prefix, layer
    if hasattr(layer, "children"):
        for i, child in layer.children():
            yield from _walk(child, f"{prefix}.{i}")


@dataclass
class DimContract:
    edges: list = field(default_factory=list)  # (edge name, input shape, output shape)

    def lines(self):
        return [f"{name}: {tuple(a)} -> {tuple(b)}" for name, a, b in self.edges]


class _Builder:
    def __init__(self, cfg, rng, dropout_rng):
        self.cfg, self.rng, self.dropout_rng = cfg, rng, dropout_rng

    def block(self, cin, cout, k, keep, input_grad=True):
        c = self.cfg
        return [
            Conv2D(cin, cout, k, self.rng, std=c.init_std, input_grad=input_grad),
            BatchNorm(cout, eps=c.bn_eps, momentum=c.bn_momentum),
            ReLU(),
            Dropout(keep, self.dropout_rng),
        ]

    def path(self, cin, spec, keep, input_grad=True):
        """Chain of conv blocks; ``spec`` is a list of (kernel, maps) or ('pool', p)."""
        layers = []
        for i, item in enumerate(spec):
            if item[0] == "pool":
                layers.append(MaxPool2D(item[1], 1))
                continue
            k, cout = item
            layers += self.block(cin, cout, k, keep, input_grad=input_grad or i > 0)
            cin = cout
        return Sequential(layers)

    def classifier(self, cin):
        c = self.cfg
        return [Conv2D(cin, N_CLASSES, 1, self.rng, std=c.init_std), Softmax()]

    # first halves: 4x33x33 -> 5x15x15 probability maps
    def first_linear(self):
        w = self.cfg.width
        k1, k2 = self.cfg.first_kernels
        body = self.path(N_MODALITIES, [(k1, w), (k2, w)], self.cfg.keep_first, input_grad=False)
        return Sequential(body.layers + self.classifier(w))

    def first_two_path(self):
        w, keep = self.cfg.width, self.cfg.keep_first
        a = self.path(N_MODALITIES, [(13, w), (7, w)], keep, input_grad=False)
        b = self.path(N_MODALITIES, [(7, w), (3, w), ("pool", 11)], keep, input_grad=False)
        return Sequential([Parallel([a, b])] + self.classifier(2 * w))

    def first_inception(self):
        w, keep = self.cfg.width, self.cfg.keep_first
        p1 = self.path(N_MODALITIES, [(13, w), (7, w)], keep, input_grad=False)
        p2 = self.path(N_MODALITIES, [(9, w), (11, w)], keep, input_grad=False)
        p3 = self.path(N_MODALITIES, [(5, w), (5, w), (5, w), (7, w)], keep, input_grad=False)
        return Sequential([Parallel([p1, p2, p3])] + self.classifier(3 * w))

    # second halves: 9x15x15 -> flattened features
    def second_linear(self):
        w, f = self.cfg.width, self.cfg.final_maps
        k1, k2, k3 = self.cfg.second_kernels
        body = self.path(N_MODALITIES + N_CLASSES, [(k1, w), (k2, w), (k3, f)], self.cfg.keep_second)
        return Sequential(body.layers + [Flatten()])

    def second_two_path(self):
        w, f, keep = self.cfg.width, self.cfg.final_maps, self.cfg.keep_second
        cin = N_MODALITIES + N_CLASSES
        a = self.path(cin, [(7, w), (7, f // 2)], keep)
        b = self.path(cin, [(5, w), (5, w), (5, f - f // 2)], keep)
        return Sequential([Parallel([a, b]), Flatten()])

    def second_inception(self):
        w, f, keep = self.cfg.width, self.cfg.final_maps, self.cfg.keep_second
        cin = N_MODALITIES + N_CLASSES
        q = f // 4
        p1 = self.path(cin, [(13, q)], keep)
        p2 = self.path(cin, [(7, w), (7, q)], keep)
        p3 = self.path(cin, [(5, w), (5, w), (5, f - 2 * q)], keep)
        return Sequential([Parallel([p1, p2, p3]), Flatten()])

    def head(self, features):
        c = self.cfg
        dense = Dense(features, N_CLASSES, self.rng, std=c.output_std, bias=c.output_bias)
        return Sequential([Dropout(c.keep_out, self.dropout_rng), dense])


_HALVES = {
    "LN": ("first_linear", "second_linear"),
    "TPN": ("first_two_path", "second_two_path"),
    "TLinear": ("first_two_path", "second_linear"),
    "IN": ("first_inception", "second_inception"),
    "ILinear": ("first_inception", "second_linear"),
}


class NexusModel:
    def __init__(self, name, config, first, second, head, dropout_rng=None):
        self.name = name
        self.config = config
        self.first = first
        self.second = second
        self.head = head
        self.frozen = set()
        self._dropout_layers = [l for _, l in self.walk() if isinstance(l, Dropout)]
        self.set_dropout_rng(dropout_rng)
        self._cached = False

    # registry ---------------------------------------------------------------
    def walk(self):
        for part in ("first", "second", "head"):
            yield from _walk(getattr(self, part), part)

    def named_parameters(self):
        """Learnable tensors in registry order."""
        out = {}
        for prefix, layer in self.walk():
            for k, v in layer.params.items():
                out[f"{prefix}.{k}"] = v
        return out

    def named_buffers(self):
        out = {}
        for prefix, layer in self.walk():
            for k, v in layer.buffers.items():
                out[f"{prefix}.{k}"] = v
        return out

    def state(self):
        """Every tensor a checkpoint stores, in registry order."""
        out = {}
        for prefix, layer in self.walk():
            for k, v in layer.params.items():
                out[f"{prefix}.{k}"] = v
            for k, v in layer.buffers.items():
                out[f"{prefix}.{k}"] = v
        return out

    def load_state(self, state):
        for prefix, layer in self.walk():
            for store in (layer.params, layer.buffers):
                for k in store:
                    v = np.asarray(state[f"{prefix}.{k}"])
                    if v.shape != store[k].shape:
                        raise ShapeError(f"{prefix}.{k}: expected {store[k].shape}, got {v.shape}")
                    store[k] = v.copy()

    def named_grads(self):
        out = {}
        for prefix, layer in self.walk():
            for k, v in layer.grads.items():
                out[f"{prefix}.{k}"] = v
        return out

    def zero_grad(self):
        for _, layer in self.walk():
            layer.zero_grad()

    @staticmethod
    def is_output(name):
        return name.startswith("head.")

    def freeze_all_but_output(self):
        self.frozen = {n for n in self.named_parameters() if not self.is_output(n)}

    def unfreeze(self):
        self.frozen = set()

    def trainable_parameters(self):
        return {n: p for n, p in self.named_parameters().items() if n not in self.frozen}

    def set_dropout_rng(self, rng):
        for layer in self._dropout_layers:
            layer.rng = rng

    @property
    def dense(self):
        return self.head.layers[-1]

    # passes ---------------------------------------------------------------
    @staticmethod
    def _batch(p33, p15):
        p33 = np.asarray(p33, dtype=np.float64)
        p15 = np.asarray(p15, dtype=np.float64)
        single = p33.ndim == 3
        if single:
            p33, p15 = p33[None], p15[None]
        if p33.shape[1:] != (N_MODALITIES, BIG, BIG) or p15.shape[1:] != (N_MODALITIES, SMALL, SMALL):
            raise ShapeError(f"expected patches 4x33x33 and 4x15x15, got {p33.shape} and {p15.shape}")
        if p33.shape[0] != p15.shape[0]:
            raise ShapeError("patch batches differ in length")
        return p33, p15, single

    def first_maps(self, p33, train=False):
        return self.first.forward(p33, train=train)

    def features(self, p33, p15, train=False):
        p33, p15, single = self._batch(p33, p15)
        maps = self.first.forward(p33, train=train)
        h = self.second.forward(concat_channels(maps, p15), train=train)
        self._cached = True
        return h[0] if single else h

    def logits(self, p33, p15, train=False):
        p33, p15, single = self._batch(p33, p15)
        z = self.head.forward(self.features(p33, p15, train=train), train=train)
        return z[0] if single else z

    def forward(self, p33, p15, train=False):
        """Class probabilities for the centre pixel(s): ``[5]`` or ``[N, 5]``."""
        return softmax(self.logits(p33, p15, train=train), axis=-1)

    def backward(self, grad_logits):
        """Back-propagate a gradient w.r.t. the logits into every parameter."""
        if not self._cached:
            raise StateError("backward called before a forward pass")
        g = np.asarray(grad_logits, dtype=np.float64)
        if g.ndim == 1:
            g = g[None]
        g = self.head.backward(g)
        g = self.second.backward(g)
        self.first.backward(np.ascontiguousarray(g[:, :N_CLASSES]))
        return self.named_grads()

    def describe(self):
        return f"{self.name}: first {self.first.describe()}; second {self.second.describe()}; head {self.head.describe()}"


def build_model(name, config=None, rng=None, check=True, dropout_rng=None):
    """Assemble one of ``LN, TPN, TLinear, IN, ILinear``.

    ``rng`` draws the initial weights (zeros when omitted, as when a checkpoint
    is about to be loaded).  Dropout masks come from ``dropout_rng``, or a
    generator spawned from ``rng``.
    """
    if name not in _HALVES:
        raise ParameterError(f"unknown architecture {name!r}; choose from {', '.join(ARCHITECTURES)}")
    config = config or ModelConfig()
    if dropout_rng is None and rng is not None:
        (dropout_rng,) = rng.spawn(1)
    b = _Builder(config, rng, dropout_rng)
    first_fn, second_fn = _HALVES[name]
    first = getattr(b, first_fn)()
    second = getattr(b, second_fn)()
    try:
        features = second.out_shape((N_MODALITIES + N_CLASSES, SMALL, SMALL))[0]
    except ShapeError:
        features = config.final_maps * 9
    model = NexusModel(name, config, first, second, b.head(features), dropout_rng)
    if check:
        check_dims(model)
    return model


def check_dims(model):
    """Propagate per-sample shapes through every edge and verify the contract
    4x33x33 -> 5x15x15 -> (+4x15x15) 9x15x15 -> features -> 5."""
    contract = DimContract()

    def trace(layer, prefix, shape):
        if isinstance(layer, Sequential):
            for i, child in layer.children():
                shape = trace(child, f"{prefix}.{i}", shape)
            return shape
        if isinstance(layer, Parallel):
            outs = [trace(b, f"{prefix}.{i}", shape) for i, b in layer.children()]
            try:
                out = layer.out_shape(shape)
            except ShapeError as e:
                raise DimensionError(f"{prefix}: {e}", contract.lines()) from None
            contract.edges.append((f"{prefix} (concat)", tuple(o[0] for o in outs), out))
            return out
        try:
            out = layer.out_shape(shape)
        except ShapeError as e:
            raise DimensionError(f"{prefix} {layer.describe()}: {e}", contract.lines()) from None
        contract.edges.append((f"{prefix} {layer.describe()}", shape, out))
        return out

    def expect(edge, got, want):
        contract.edges.append((edge, got, want))
        if tuple(got) != tuple(want):
            raise DimensionError(f"{edge}: got {tuple(got)}, expected {tuple(want)}", contract.lines())

    maps = trace(model.first, "first", (N_MODALITIES, BIG, BIG))
    expect("first half output", maps, (N_CLASSES, SMALL, SMALL))
    joined = (maps[0] + N_MODALITIES, SMALL, SMALL)
    expect("concat with 4x15x15 patch", joined, (N_MODALITIES + N_CLASSES, SMALL, SMALL))
    feats = trace(model.second, "second", joined)
    expect("features into dense", feats, (model.dense.features,))
    out = trace(model.head, "head", feats)
    expect("class scores", out, (N_CLASSES,))
    return contract


# checkpoints --------------------------------------------------------------

def config_digest(name, config):
    blob = json.dumps({"name": name, "config": config.to_dict()}, sort_keys=True).encode()
    return hashlib.sha256(blob).digest()


def _write_str(fh, s):
    b = s.encode("utf-8")
    fh.write(struct.pack("<I", len(b)))
    fh.write(b)


def _read_str(fh):
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_str(fh, model.name)
        fh.write(config_digest(model.name, model.config))
        _write_str(fh, json.dumps(model.config.to_dict(), sort_keys=True))
        for t in model.state().values():
            write_tensor(fh, t)


def load_checkpoint(path, model=None):
    """Load a checkpoint into ``model`` (must match name and config digest),
    or into a freshly built model when ``model`` is None."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise VersionError(f"{path} is not a nexus checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise VersionError(f"unsupported checkpoint version {version}")
        name = _read_str(fh)
        digest = fh.read(32)
        config = ModelConfig.from_dict(json.loads(_read_str(fh)))
        if config_digest(name, config) != digest:
            raise VersionError("checkpoint config digest does not match its config")
        tensors = []
        while (t := read_tensor(fh)) is not None:
            tensors.append(t)
    if model is None:
        model = build_model(name, config)
    elif model.name != name or config_digest(model.name, model.config) != digest:
        raise VersionError(f"checkpoint holds {name!r}; cannot load into {model.name!r} with a different config")
    keys = list(model.state())
    if len(keys) != len(tensors):
        raise VersionError(f"checkpoint has {len(tensors)} tensors, model expects {len(keys)}")
    model.load_state(dict(zip(keys, tensors)))
    return model
