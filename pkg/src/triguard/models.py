"""Layer-sequence classifiers, their builders, and the checkpoint format."""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, FormatError

KINDS = ("Dense", "Conv2d", "ReLU", "Flatten", "AvgPool", "ResidualAdd")
AFFINE_KINDS = ("Dense", "Conv2d", "AvgPool", "Flatten")


@dataclass(frozen=True)
class LayerSpec:
    """One layer. `units` is the Dense width or Conv2d output channel count;
    `source` is the layer index whose output a ResidualAdd adds (-1 = model input)."""

    kind: str
    units: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    size: int = 0
    source: int = -1


def Dense(units):
    return LayerSpec("Dense", units=units)


def Conv2d(out_channels, kernel, stride=1, padding=0):
    return LayerSpec("Conv2d", units=out_channels, kernel=kernel, stride=stride, padding=padding)


def ReLU():
    return LayerSpec("ReLU")


def Flatten():
    return LayerSpec("Flatten")


def AvgPool(size):
    return LayerSpec("AvgPool", size=size)


def ResidualAdd(source):
    return LayerSpec("ResidualAdd", source=source)


def layer_output_shapes(layers, input_shape):
    """Per-sample output shape of every layer; raises DimensionError on a shape break."""
    shapes = []
    cur = tuple(input_shape)
    for i, layer in enumerate(layers):
        kind = layer.kind
        if kind == "Dense":
            if len(cur) != 1:
                raise DimensionError(f"layer {i}: Dense needs flat input, got {cur}")
            if layer.units <= 0:
                raise DimensionError(f"layer {i}: Dense width must be positive")
            cur = (layer.units,)
        elif kind == "Conv2d":
            if len(cur) != 3:
                raise DimensionError(f"layer {i}: Conv2d needs (C, H, W) input, got {cur}")
            if layer.units <= 0 or layer.kernel <= 0 or layer.stride <= 0 or layer.padding < 0:
                raise DimensionError(f"layer {i}: bad Conv2d hyperparameters {layer}")
            oh = ad.conv_output_size(cur[1], layer.kernel, layer.stride, layer.padding)
            ow = ad.conv_output_size(cur[2], layer.kernel, layer.stride, layer.padding)
            if oh <= 0 or ow <= 0:
                raise DimensionError(f"layer {i}: Conv2d output would be {oh}x{ow}")
            cur = (layer.units, oh, ow)
        elif kind == "AvgPool":
            if len(cur) != 3 or layer.size <= 0:
                raise DimensionError(f"layer {i}: AvgPool needs (C, H, W) input and size > 0")
            if cur[1] < layer.size or cur[2] < layer.size:
                raise DimensionError(f"layer {i}: AvgPool({layer.size}) larger than {cur[1:]}")
            cur = (cur[0], cur[1] // layer.size, cur[2] // layer.size)
        elif kind == "Flatten":
            cur = (int(np.prod(cur)),)
        elif kind == "ReLU":
            pass
        elif kind == "ResidualAdd":
            if not -1 <= layer.source < i:
                raise DimensionError(f"layer {i}: skip source {layer.source} is not an earlier layer")
            skip = tuple(input_shape) if layer.source == -1 else shapes[layer.source]
            if skip != cur:
                raise DimensionError(f"layer {i}: skip shape {skip} != current shape {cur}")
        else:
            raise DimensionError(f"layer {i}: unknown layer kind {kind!r}")
        shapes.append(cur)
    return shapes


def param_shapes(layers, input_shape):
    shapes = layer_output_shapes(layers, input_shape)
    out = {}
    prev = tuple(input_shape)
    for i, layer in enumerate(layers):
        if layer.kind == "Dense":
            out[f"{i}.weight"] = (layer.units, prev[0])
            out[f"{i}.bias"] = (layer.units,)
        elif layer.kind == "Conv2d":
            out[f"{i}.weight"] = (layer.units, prev[0], layer.kernel, layer.kernel)
            out[f"{i}.bias"] = (layer.units,)
        prev = shapes[i]
    return out


def init_params(layers, input_shape, seed=0, init="he_uniform", dtype=np.float64):
    """He-uniform weights (bound sqrt(6/fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(layers, input_shape).items():
        if name.endswith(".bias") or init == "zeros":
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


@dataclass
class Model:
    layers: list
    input_shape: tuple
    num_classes: int
    params: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layers = list(self.layers)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.shapes = layer_output_shapes(self.layers, self.input_shape)
        if self.shapes[-1] != (self.num_classes,):
            raise DimensionError(
                f"model output shape {self.shapes[-1]} != ({self.num_classes},)")
        expected = param_shapes(self.layers, self.input_shape)
        if set(expected) != set(self.params):
            raise DimensionError(f"parameter names {sorted(self.params)} != {sorted(expected)}")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != shape:
                raise DimensionError(f"{name}: shape {self.params[name].shape} != {shape}")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype):
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        return self.with_params(params)

    def with_params(self, params):
        return Model(self.layers, self.input_shape, self.num_classes,
                     {k: np.asarray(v) for k, v in params.items()}, dict(self.metadata))

    def parameter_tensors(self, requires_grad=True):
        return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def forward(self, x, params=None):
        """Logits for a batch (N, *input_shape) or a single input (*input_shape).

        `params` may map names to Tensors to differentiate with respect to weights.
        """
        if params is None:
            params = {k: ad.Tensor(v) for k, v in self.params.items()}
        x = ad.as_tensor(x) if isinstance(x, ad.Tensor) else ad.Tensor(x, dtype=self.dtype)
        single = x.shape == self.input_shape
        if single:
            x = ad.reshape(x, (1,) + x.shape)
        elif x.shape[1:] != self.input_shape:
            raise DimensionError(f"input shape {x.shape} does not match {self.input_shape}")
        outs = []
        h = x
        for i, layer in enumerate(self.layers):
            skip = None
            if layer.kind == "ResidualAdd":
                skip = x if layer.source == -1 else outs[layer.source]
            h = apply_layer(layer, h, params.get(f"{i}.weight"), params.get(f"{i}.bias"), skip)
            outs.append(h)
        if single:
            h = ad.reshape(h, (self.num_classes,))
        return h

    __call__ = forward

    def predict(self, x):
        """Argmax class for one input, or an int array for a batch."""
        with ad.no_grad():
            logits = self.forward(x).data
        return int(np.argmax(logits)) if logits.ndim == 1 else np.argmax(logits, axis=1)

    def logits(self, x, batch_size=500):
        """Forward in chunks without recording a graph; returns an ndarray."""
        x = np.asarray(x)
        with ad.no_grad():
            return np.concatenate([self.forward(x[i:i + batch_size]).data
                                   for i in range(0, len(x), batch_size)])


def apply_layer(layer, h, weight=None, bias=None, skip=None):
    kind = layer.kind
    if kind == "Dense":
        return ad.linear(h, weight, bias)
    if kind == "Conv2d":
        return ad.conv2d(h, weight, bias, layer.stride, layer.padding)
    if kind == "ReLU":
        return ad.relu(h)
    if kind == "Flatten":
        return ad.reshape(h, (h.shape[0], -1))
    if kind == "AvgPool":
        return ad.avg_pool2d(h, layer.size)
    if kind == "ResidualAdd":
        return ad.add(h, skip)
    raise DimensionError(f"unknown layer kind {kind!r}")


def simple_cnn_layers(num_classes):
    return [
        Conv2d(16, 3, 1, 1), ReLU(),
        Conv2d(32, 3, 2, 1), ReLU(),
        AvgPool(2), Flatten(),
        Dense(128), ReLU(),
        Dense(num_classes),
    ]


def build_simple_cnn(input_shape, num_classes, seed=0, init="he_uniform", dtype=np.float64):
    input_shape = tuple(input_shape)
    if len(input_shape) != 3 or input_shape[1] < 8 or input_shape[2] < 8:
        raise DimensionError(f"SimpleCNN needs (C, H, W) input with H, W >= 8, got {input_shape}")
    layers = simple_cnn_layers(num_classes)
    return Model(layers, input_shape, num_classes,
                 init_params(layers, input_shape, seed, init, dtype),
                 {"architecture": "simple_cnn", "seed": seed})


def build_mlp(input_dim, hidden_dims, num_classes, seed=0, init="he_uniform", dtype=np.float64):
    """Dense/ReLU stack; a non-flat `input_dim` shape gets a leading Flatten."""
    input_shape = (input_dim,) if np.isscalar(input_dim) else tuple(input_dim)
    dims = [int(np.prod(input_shape)), *hidden_dims, num_classes]
    if any(d <= 0 for d in dims):
        raise DimensionError(f"MLP dimensions must be positive, got {dims}")
    layers = [Flatten()] if len(input_shape) > 1 else []
    for width in hidden_dims:
        layers += [Dense(width), ReLU()]
    layers.append(Dense(num_classes))
    return Model(layers, input_shape, num_classes,
                 init_params(layers, input_shape, seed, init, dtype),
                 {"architecture": "mlp", "seed": seed})


def build_mini_resnet(input_shape, num_classes, width=16, seed=0, init="he_uniform",
                      dtype=np.float64):
    """Strided stem conv, two identity-skip residual blocks, pool, linear head."""
    input_shape = tuple(input_shape)
    if len(input_shape) != 3 or input_shape[1] < 8 or input_shape[2] < 8:
        raise DimensionError(f"MiniResNet needs (C, H, W) input with H, W >= 8, got {input_shape}")
    layers = [Conv2d(width, 3, 2, 1), ReLU()]
    for _ in range(2):
        block_in = len(layers) - 1
        layers += [Conv2d(width, 3, 1, 1), ReLU(), Conv2d(width, 3, 1, 1),
                   ResidualAdd(block_in), ReLU()]
    layers += [AvgPool(2), Flatten(), Dense(num_classes)]
    return Model(layers, input_shape, num_classes,
                 init_params(layers, input_shape, seed, init, dtype),
                 {"architecture": "mini_resnet", "seed": seed})


ARCHITECTURES = {
    "simple_cnn": lambda shape, k, seed: build_simple_cnn(shape, k, seed),
    "mini_resnet": lambda shape, k, seed: build_mini_resnet(shape, k, seed=seed),
}


def build_model(architecture, input_shape, num_classes, seed=0, hidden=(64,)):
    if architecture == "mlp":
        return build_mlp(tuple(input_shape), list(hidden), num_classes, seed)
    try:
        return ARCHITECTURES[architecture](tuple(input_shape), num_classes, seed)
    except KeyError:
        raise ValueError(f"unknown architecture {architecture!r}") from None


# -- checkpoint format ----------------------------------------------------
# magic(4) | version u32 | header_len u64 | header JSON | payload_len u64 | payload | sha256(payload)
MAGIC = b"TGMD"
FORMAT_VERSION = 1


def _dtype_tag(dtype):
    return np.dtype(dtype).newbyteorder("<").str


def save_model(model, path):
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(model.params):
        arr = model.params[name]
        raw = np.ascontiguousarray(arr, dtype=np.dtype(arr.dtype).newbyteorder("<")).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": _dtype_tag(arr.dtype),
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "layers": [asdict(layer) for layer in model.layers],
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "metadata": model.metadata,
        "params": manifest,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
        f.write(head)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        f.write(hashlib.sha256(payload).digest())


def load_model(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise FormatError("not a triguard model file", 0)
    if len(blob) < 16:
        raise FormatError("truncated header", len(blob))
    version, head_len = struct.unpack_from("<IQ", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version}", 4)
    pos = 16
    if len(blob) < pos + head_len + 8:
        raise FormatError("truncated header", len(blob))
    try:
        header = json.loads(blob[pos:pos + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed header: {exc}", pos) from None
    pos += head_len
    (payload_len,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if len(blob) != pos + payload_len + 32:
        raise FormatError(f"file length {len(blob)} != expected {pos + payload_len + 32}", pos)
    payload = blob[pos:pos + payload_len]
    if hashlib.sha256(payload).digest() != blob[pos + payload_len:]:
        raise FormatError("parameter payload digest mismatch", pos)
    params = {}
    for entry in header["params"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        params[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    layers = [LayerSpec(**layer) for layer in header["layers"]]
    return Model(layers, tuple(header["input_shape"]), header["num_classes"], params,
                 header["metadata"])
