"""The four experiment architectures, a shape walker, and checkpoint I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layer import NeurogameLayer, NeurogameLayerConfig, passthrough_config
from .layers import BatchNorm, Conv2D, Dense, Dropout, Flatten, Layer, MaxPool, ReLU, Sigmoid
from .tensor import ensure_finite

CHECKPOINT_MAGIC = b"NEUROGAME-CHECKPOINT 1\n"


@dataclass
class ModelSpec:
    """Ordered layer descriptors plus output heads.

    Descriptors are plain dicts (``{"type": "dense", "units": 256}``) so a
    spec round-trips through JSON unchanged.
    """

    name: str
    input_shape: tuple
    layers: list[dict]
    heads: dict[str, list[dict]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape), "layers": self.layers, "heads": self.heads}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["name"], tuple(d["input_shape"]), list(d["layers"]), dict(d["heads"]))


# ---------------------------------------------------------------------------
# builders


def _mlp_stack(hidden, dropout) -> list[dict]:
    out = []
    for units in hidden:
        out += [
            {"type": "dense", "units": units},
            {"type": "relu"},
            {"type": "batchnorm"},
            {"type": "dropout", "rate": dropout},
        ]
    return out


GENDER_HEAD = [{"type": "dense", "units": 1, "init": "xavier"}, {"type": "sigmoid"}]
AGE_HEAD = [{"type": "dense", "units": 1}, {"type": "relu"}]


def _ng(config: NeurogameLayerConfig | None) -> dict:
    return {"type": "neurogame", "config": (config or NeurogameLayerConfig()).to_dict()}


def build_mlp_gender(input_shape=(64, 64, 3), hidden=(256, 128, 64), dropout=0.5) -> ModelSpec:
    layers = [{"type": "flatten"}] + _mlp_stack(hidden, dropout)
    return ModelSpec("mlp-gender", tuple(input_shape), layers, {"gender": GENDER_HEAD})


def build_neurogame_gender(
    input_shape=(64, 64, 3),
    filters: int = 3,
    kernel: int = 3,
    hidden=(256, 128, 64),
    dropout=0.5,
    neurogame: NeurogameLayerConfig | None = None,
) -> ModelSpec:
    layers = [
        {"type": "conv", "filters": filters, "kernel": kernel},
        {"type": "relu"},
        _ng(neurogame),
        {"type": "flatten"},
    ] + _mlp_stack(hidden, dropout)
    return ModelSpec("neurogame-gender", tuple(input_shape), layers, {"gender": GENDER_HEAD})


def build_cnn_age_gender(
    input_shape=(128, 128, 1), filters=(32, 64, 128, 256), kernel=3, dense=(256, 256), dropout=0.5
) -> ModelSpec:
    layers = []
    for f in filters:
        layers += [{"type": "conv", "filters": f, "kernel": kernel}, {"type": "relu"}, {"type": "maxpool", "size": 2}]
    layers.append({"type": "flatten"})
    for units in dense:
        layers += [{"type": "dense", "units": units}, {"type": "relu"}, {"type": "dropout", "rate": dropout}]
    return ModelSpec("cnn-agegender", tuple(input_shape), layers, {"gender": GENDER_HEAD, "age": AGE_HEAD})


def build_neurogame_age_gender(
    input_shape=(128, 128, 1),
    filters=(3, 64, 128, 256),
    kernel=3,
    dense=(256, 256),
    dropout=0.5,
    neurogame: NeurogameLayerConfig | None = None,
) -> ModelSpec:
    """CNN skeleton with a NEUROGAME layer between each conv+relu and its pooling.

    The first block's convolution has three filters and acts as the feature-map
    generator.
    """
    layers = []
    for f in filters:
        layers += [
            {"type": "conv", "filters": f, "kernel": kernel},
            {"type": "relu"},
            _ng(neurogame),
            {"type": "maxpool", "size": 2},
        ]
    layers.append({"type": "flatten"})
    for units in dense:
        layers += [{"type": "dense", "units": units}, {"type": "relu"}, {"type": "dropout", "rate": dropout}]
    return ModelSpec("neurogame-agegender", tuple(input_shape), layers, {"gender": GENDER_HEAD, "age": AGE_HEAD})


BUILDERS = {
    "mlp-gender": build_mlp_gender,
    "neurogame-gender": build_neurogame_gender,
    "cnn-agegender": build_cnn_age_gender,
    "neurogame-agegender": build_neurogame_age_gender,
}


# ---------------------------------------------------------------------------
# shape walking


def _desc_shape_and_params(desc: dict, shape: tuple) -> tuple[tuple, int]:
    kind = desc["type"]
    if kind == "conv":
        h, w, c = shape
        k, f = desc["kernel"], desc["filters"]
        if k > h or k > w:
            raise ValueError(f"conv kernel {k} does not fit map {h}x{w}")
        return (h - k + 1, w - k + 1, f), f * k * k * c + f
    if kind == "maxpool":
        h, w, c = shape
        s = desc.get("size", 2)
        if h // s == 0 or w // s == 0:
            raise ValueError(f"pooling {s} does not fit map {h}x{w}")
        return (h // s, w // s, c), 0
    if kind == "flatten":
        return (int(np.prod(shape)),), 0
    if kind == "dense":
        if len(shape) != 1:
            raise ValueError(f"dense layer needs a flat input, got {shape}")
        return (desc["units"],), shape[0] * desc["units"] + desc["units"]
    if kind == "batchnorm":
        return shape, 2 * shape[-1]
    if kind == "neurogame":
        cfg = NeurogameLayerConfig.from_dict(desc["config"])
        if len(shape) != 3 or shape[0] < cfg.block[0] or shape[1] < cfg.block[1]:
            raise ValueError(f"neurogame block {cfg.block} does not fit {shape}")
        return shape, 0
    if kind in ("relu", "sigmoid", "dropout"):
        return shape, 0
    raise ValueError(f"unknown layer type {kind!r}")


def walk_shapes(spec: ModelSpec) -> dict[str, list[tuple[str, tuple, int]]]:
    """Per-layer (type, output shape, trainable parameter count) for trunk and heads."""
    shape = tuple(spec.input_shape)
    trunk = []
    for desc in spec.layers:
        shape, n = _desc_shape_and_params(desc, shape)
        trunk.append((desc["type"], shape, n))
    out = {"trunk": trunk}
    for head, descs in spec.heads.items():
        hs, rows = shape, []
        for desc in descs:
            hs, n = _desc_shape_and_params(desc, hs)
            rows.append((desc["type"], hs, n))
        out[head] = rows
    return out


def count_params(spec: ModelSpec) -> int:
    return sum(n for rows in walk_shapes(spec).values() for _, _, n in rows)


# ---------------------------------------------------------------------------
# runtime model


def _build_layer(desc: dict, shape: tuple, rng: np.random.Generator, dtype, name: str) -> Layer | NeurogameLayer:
    kind = desc["type"]
    if kind == "conv":
        return Conv2D(shape[-1], desc["filters"], desc["kernel"], rng, dtype)
    if kind == "dense":
        return Dense(shape[0], desc["units"], rng, desc.get("init", "he"), dtype)
    if kind == "relu":
        return ReLU()
    if kind == "sigmoid":
        return Sigmoid()
    if kind == "batchnorm":
        return BatchNorm(shape[-1], dtype=dtype)
    if kind == "dropout":
        return Dropout(desc["rate"], np.random.default_rng(rng.integers(2**63)))
    if kind == "maxpool":
        return MaxPool(desc.get("size", 2))
    if kind == "flatten":
        return Flatten()
    if kind == "neurogame":
        return NeurogameLayer(NeurogameLayerConfig.from_dict(desc["config"]), name=name)
    raise ValueError(f"unknown layer type {kind!r}")


class Model:
    """A trunk of layers feeding one or more scalar heads.

    ``iteration`` is the global optimizer step count (starting at 1) shared by
    all NEUROGAME layers of the model.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        walk_shapes(spec)  # fail early on shapes that do not compose
        self.spec = spec
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.iteration = 1
        rng = np.random.default_rng(seed)
        shape = tuple(spec.input_shape)
        self.trunk: list = []
        n_game = 0
        for k, desc in enumerate(spec.layers):
            name = f"trunk.{k}"
            if desc["type"] == "neurogame":
                name = f"neurogame{n_game}"
                n_game += 1
            self.trunk.append(_build_layer(desc, shape, rng, self.dtype, name))
            shape, _ = _desc_shape_and_params(desc, shape)
        self.heads: dict[str, list] = {}
        for head, descs in spec.heads.items():
            hs, layers = shape, []
            for desc in descs:
                layers.append(_build_layer(desc, hs, rng, self.dtype, head))
                hs, _ = _desc_shape_and_params(desc, hs)
            self.heads[head] = layers

    # -- structure ------------------------------------------------------------

    def _named_layers(self):
        for k, layer in enumerate(self.trunk):
            yield f"trunk.{k}", layer
        for head, layers in self.heads.items():
            for k, layer in enumerate(layers):
                yield f"{head}.{k}", layer

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{p}.{key}": v for p, layer in self._named_layers() for key, v in layer.params.items()}

    def param_slots(self):
        """(name, layer, key) for every trainable array, for in-place updates."""
        for p, layer in self._named_layers():
            for key in layer.params:
                yield f"{p}.{key}", layer, key

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{p}.{key}": v for p, layer in self._named_layers() for key, v in layer.grads.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {
            f"{p}.{key}": v for p, layer in self._named_layers() for key, v in getattr(layer, "buffers", {}).items()
        }

    def set_array(self, name: str, value: np.ndarray) -> None:
        prefix, key = name.rsplit(".", 1)
        layer = dict(self._named_layers())[prefix]
        store = layer.params if key in layer.params else layer.buffers
        if key not in store:
            raise KeyError(name)
        if store[key].shape != value.shape:
            raise ValueError(f"{name}: shape {value.shape} != {store[key].shape}")
        store[key] = value.astype(store[key].dtype)

    def n_params(self) -> int:
        return sum(v.size for v in self.parameters().values())

    def neurogame_layers(self) -> list[NeurogameLayer]:
        return [layer for layer in self.trunk if isinstance(layer, NeurogameLayer)]

    def set_passthrough(self) -> None:
        """Test hook: every NEUROGAME layer keeps all neurons."""
        for layer in self.neurogame_layers():
            layer.config = passthrough_config(layer.config)

    def freeze_masks(self, frozen: bool = True) -> None:
        """Reuse the last dropout / coalition masks (and stop BN running updates)."""
        for _, layer in self._named_layers():
            layer.frozen = frozen

    def collect_diagnostics(self, on: bool = True) -> None:
        for layer in self.neurogame_layers():
            layer.collect_diagnostics = on

    # -- compute --------------------------------------------------------------

    def forward(self, x: np.ndarray, training: bool = False) -> dict[str, np.ndarray]:
        if x.shape[1:] != tuple(self.spec.input_shape):
            raise ValueError(f"input shape {x.shape[1:]} != model input {tuple(self.spec.input_shape)}")
        h = x.astype(self.dtype, copy=False)
        for layer in self.trunk:
            h = layer.forward(h, training=training, iteration=self.iteration)
        out = {}
        for head, layers in self.heads.items():
            y = h
            for layer in layers:
                y = layer.forward(y, training=training, iteration=self.iteration)
            out[head] = ensure_finite(y[:, 0], f"{head} head output")
        return out

    def backward(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        """Backpropagate gradients of the head outputs; returns d(loss)/d(input)."""
        total = None
        for head, layers in self.heads.items():
            if head not in grads:
                raise KeyError(f"missing gradient for head {head!r}")
            g = grads[head][:, None].astype(self.dtype, copy=False)
            for layer in reversed(layers):
                g = layer.backward(g)
            total = g if total is None else total + g
        for layer in reversed(self.trunk):
            total = layer.backward(total)
        return total


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model, config: dict | None = None, extra: dict | None = None) -> None:
    """Write a text header (JSON) followed by little-endian float32 blobs."""
    arrays = {**model.parameters(), **model.buffers()}
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        blob = np.ascontiguousarray(arrays[name], dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arrays[name].shape), "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "model_spec": model.spec.to_dict(),
        "seed": model.seed,
        "iteration": model.iteration,
        "config": config,
        "extra": extra or {},
        "tensors": entries,
    }
    text = json.dumps(header, indent=1, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(f"header-bytes {len(text)}\n".encode("ascii"))
        fh.write(text)
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


class CheckpointError(ValueError):
    pass


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from None
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        pos = len(CHECKPOINT_MAGIC)
        line_end = raw.index(b"\n", pos)
        tag, size = raw[pos:line_end].decode("ascii").split()
        if tag != "header-bytes":
            raise ValueError("malformed header line")
        start = line_end + 1
        header = json.loads(raw[start : start + int(size)].decode("utf-8"))
        data = start + int(size) + 1
        arrays = {}
        for e in header["tensors"]:
            buf = raw[data + e["offset"] : data + e["offset"] + e["length"]]
            if len(buf) != e["length"]:
                raise ValueError(f"tensor {e['name']} is truncated")
            arrays[e["name"]] = np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(e["shape"])
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    return header, arrays


def load_checkpoint(path) -> tuple[Model, dict]:
    header, arrays = read_checkpoint(path)
    model = Model(ModelSpec.from_dict(header["model_spec"]), seed=header["seed"], dtype=np.float32)
    expected = set(model.parameters()) | set(model.buffers())
    if expected != set(arrays):
        raise CheckpointError(f"{path}: tensor names do not match the model spec")
    for name, arr in arrays.items():
        model.set_array(name, arr)
    model.iteration = int(header["iteration"])
    return model, header
