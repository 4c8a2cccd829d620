"""Two-headed classifiers: a shared convolutional trunk feeding a supervised
head and a self-supervision head.

Normalization layers keep running statistics; ``model.eval()`` freezes them,
which is how attacks see the network.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from . import tensor as T
from .container import load_arrays, save_arrays
from .tensor import ShapeError, Tensor

PRESETS = ("tiny-cnn", "resnet-18", "resnet-34")
RESNET_BLOCKS = {"resnet-18": (2, 2, 2, 2), "resnet-34": (3, 4, 6, 3)}
TINY_PLAN = (32, 32, "pool", 64, 64, "pool", 128, 128)


@dataclass
class ArchConfig:
    preset: str = "tiny-cnn"
    width: float = 1.0
    input_shape: tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 10
    ss_classes: int = 4

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)

    @property
    def downsampling(self) -> int:
        return 4 if self.preset == "tiny-cnn" else 8

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; expected one of {PRESETS}")
        if not self.width > 0:
            raise ValueError(f"width multiplier must be positive, got {self.width}")
        c, h, w = self.input_shape
        if h != w:
            raise ValueError(f"input must be square, got {h}x{w}")
        if h % self.downsampling:
            raise ValueError(
                f"input size {h} is not divisible by the {self.preset} downsampling factor {self.downsampling}"
            )
        if self.num_classes < 1 or self.ss_classes < 1:
            raise ValueError("class counts must be positive")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d) -> "ArchConfig":
        return cls(**{**d, "input_shape": tuple(d["input_shape"])})


def scaled(channels: int, width: float) -> int:
    return max(1, math.ceil(channels * width))


# --- layers ----------------------------------------------------------------

@dataclass
class _Builder:
    rng: np.random.Generator
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    decay: list[str] = field(default_factory=list)

    def conv(self, name, cin, cout, k):
        fan_in = cin * k * k
        w = self.rng.standard_normal((cout, cin, k, k)) * math.sqrt(2.0 / fan_in)
        self.params[name + ".weight"] = Tensor(w, requires_grad=True, name=name + ".weight")
        self.decay.append(name + ".weight")

    def norm(self, name, c):
        self.params[name + ".weight"] = Tensor(np.ones(c), requires_grad=True, name=name + ".weight")
        self.params[name + ".bias"] = Tensor(np.zeros(c), requires_grad=True, name=name + ".bias")
        self.buffers[name + ".running_mean"] = np.zeros(c, dtype=np.float32)
        self.buffers[name + ".running_var"] = np.ones(c, dtype=np.float32)

    def linear(self, name, din, dout):
        w = self.rng.standard_normal((din, dout)) * math.sqrt(1.0 / din)
        self.params[name + ".weight"] = Tensor(w, requires_grad=True, name=name + ".weight")
        self.params[name + ".bias"] = Tensor(np.zeros(dout), requires_grad=True, name=name + ".bias")
        self.decay.append(name + ".weight")


class _ConvNorm:
    def __init__(self, b: _Builder, name, cin, cout, k=3, stride=1, act=True):
        self.name, self.stride, self.pad, self.act = name, stride, k // 2, act
        b.conv(name + ".conv", cin, cout, k)
        b.norm(name + ".norm", cout)

    def __call__(self, m: "TwoHeadModel", x, update):
        p, n = m.params, self.name
        x = T.conv2d(x, p[n + ".conv.weight"], self.stride, self.pad)
        x = T.batch_norm(
            x, p[n + ".norm.weight"], p[n + ".norm.bias"],
            m.buffers[n + ".norm.running_mean"], m.buffers[n + ".norm.running_var"],
            training=m.training, update_stats=update,
        )
        return T.relu(x) if self.act else x


class _Pool:
    def __call__(self, m, x, update):
        return T.avgpool2d(x, 2)


class _BasicBlock:
    def __init__(self, b: _Builder, name, cin, cout, stride):
        self.a = _ConvNorm(b, name + ".a", cin, cout, 3, stride)
        self.b = _ConvNorm(b, name + ".b", cout, cout, 3, 1, act=False)
        self.short = _ConvNorm(b, name + ".short", cin, cout, 1, stride, act=False) if (stride != 1 or cin != cout) else None

    def __call__(self, m, x, update):
        out = self.b(m, self.a(m, x, update), update)
        sc = self.short(m, x, update) if self.short else x
        return T.relu(out + sc)


# --- models ----------------------------------------------------------------

class TwoHeadModel:
    """Shared trunk, supervised head and self-supervision head.

    Both heads are linear maps on the globally pooled trunk features.
    """

    def __init__(self, cfg: ArchConfig, layers, feature_dim: int, builder: _Builder):
        self.cfg = cfg
        self.layers = layers
        self.feature_dim = feature_dim
        self.params = builder.params
        self.buffers = builder.buffers
        self.decay_names = tuple(builder.decay)
        self.training = True

    def train(self) -> "TwoHeadModel":
        self.training = True
        return self

    def eval(self) -> "TwoHeadModel":
        self.training = False
        return self

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def _check_input(self, x: Tensor) -> None:
        expected = self.cfg.input_shape
        if x.data.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"model input: shapes {x.shape} and (B, {', '.join(map(str, expected))}) are incompatible")

    def features(self, x, update_stats: bool = True) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(x)
        for layer in self.layers:
            x = layer(self, x, update_stats)
        return T.global_avgpool(x)

    def head(self, which: str, feats: Tensor) -> Tensor:
        p = self.params
        return T.matmul(feats, p[which + ".weight"]) + p[which + ".bias"]

    def predict_sup(self, x, update_stats: bool = True) -> Tensor:
        return self.head("sup_head", self.features(x, update_stats))

    def predict_ss(self, x, update_stats: bool = True) -> Tensor:
        return self.head("ss_head", self.features(x, update_stats))

    def predict_both(self, x, update_stats: bool = True) -> tuple[Tensor, Tensor]:
        f = self.features(x, update_stats)
        return self.head("sup_head", f), self.head("ss_head", f)

    # state ------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return out

    def copy_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_dict().items()}

    def load_state_dict(self, state, strict: bool = True) -> list[str]:
        """Copy arrays into this model; returns the names that were skipped."""
        skipped = []
        for key, arr in state.items():
            kind, _, name = key.partition("/")
            target = self.params.get(name).data if kind == "param" and name in self.params else (
                self.buffers.get(name) if kind == "buffer" else None
            )
            if target is None or target.shape != arr.shape:
                if strict and kind in ("param", "buffer"):
                    have = None if target is None else target.shape
                    raise ShapeError(f"state {key}: shapes {arr.shape} and {have} are incompatible")
                skipped.append(key)
                continue
            target[...] = arr
        return skipped

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "TwoHeadModel":
        """Copy of the model with parameters and buffers cast to ``dtype``."""
        clone = object.__new__(TwoHeadModel)
        clone.__dict__.update(self.__dict__)
        clone.params = {k: Tensor(v.data, requires_grad=True, name=k, dtype=dtype) for k, v in self.params.items()}
        clone.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return clone


def build_model(cfg: ArchConfig, seed: int = 0) -> TwoHeadModel:
    """Deterministic initialization: He fan-in normal for conv weights,
    ``1/sqrt(fan_in)`` normal for linear weights, zero biases."""
    cfg.validate()
    b = _Builder(np.random.default_rng(seed))
    cin = cfg.input_shape[0]
    layers: list = []
    if cfg.preset == "tiny-cnn":
        i = 0
        for item in TINY_PLAN:
            if item == "pool":
                layers.append(_Pool())
                continue
            cout = scaled(item, cfg.width)
            layers.append(_ConvNorm(b, f"trunk.conv{i}", cin, cout))
            cin, i = cout, i + 1
    else:
        stem = scaled(64, cfg.width)
        layers.append(_ConvNorm(b, "trunk.stem", cin, stem))
        cin = stem
        for s, (nblocks, base) in enumerate(zip(RESNET_BLOCKS[cfg.preset], (64, 128, 256, 512))):
            cout = scaled(base, cfg.width)
            for j in range(nblocks):
                stride = 2 if (s > 0 and j == 0) else 1
                layers.append(_BasicBlock(b, f"trunk.layer{s + 1}.{j}", cin, cout, stride))
                cin = cout
    b.linear("sup_head", cin, cfg.num_classes)
    b.linear("ss_head", cin, cfg.ss_classes)
    return TwoHeadModel(cfg, layers, cin, b)


class LinearModel:
    """Affine classifier ``flatten(x) @ W + b`` with no self-supervision head.

    Used as a closed-form oracle for attacks and robust accuracy.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray, input_shape):
        self.params = {
            "sup_head.weight": Tensor(weight, requires_grad=True),
            "sup_head.bias": Tensor(bias, requires_grad=True),
        }
        self.input_shape = tuple(input_shape)
        self.training = False

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def parameters(self):
        return self.params

    def predict_sup(self, x, update_stats: bool = True) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        flat = T.reshape(x, (x.shape[0], -1))
        return T.matmul(flat, self.params["sup_head.weight"]) + self.params["sup_head.bias"]

    def predict_ss(self, x, update_stats: bool = True) -> Tensor:
        raise ValueError("LinearModel has no self-supervision head")

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path, model: TwoHeadModel, meta: dict | None = None, extra: dict | None = None) -> None:
    arrays = dict(model.state_dict())
    if extra:
        arrays.update(extra)
    save_arrays(path, arrays, {"arch": model.cfg.to_dict(), **(meta or {})})


def load_checkpoint(path) -> tuple[TwoHeadModel, dict, dict[str, np.ndarray]]:
    """Rebuild the model described by a checkpoint.

    Returns ``(model, meta, other_arrays)`` where ``other_arrays`` holds
    anything that is not a parameter or buffer (e.g. optimizer velocity).
    """
    arrays, meta = load_arrays(path)
    if "arch" not in meta:
        raise ValueError(f"{path}: checkpoint lacks an architecture descriptor")
    model = build_model(ArchConfig.from_dict(meta["arch"]), seed=0)
    state = {k: v for k, v in arrays.items() if k.startswith(("param/", "buffer/"))}
    model.load_state_dict(state, strict=True)
    other = {k: v for k, v in arrays.items() if k not in state}
    return model, meta, other


def load_pretrained(model: TwoHeadModel, path) -> list[str]:
    """Initialize ``model`` from a pretraining checkpoint.

    Trunk tensors must match exactly; a head whose shape differs keeps its
    fresh initialization. Returns the names of heads left untouched.
    """
    arrays, _ = load_arrays(path)
    trunk = {k: v for k, v in arrays.items() if k.split("/", 1)[1].startswith("trunk.")}
    model.load_state_dict(trunk, strict=True)
    heads = {k: v for k, v in arrays.items() if k.startswith("param/") and "_head." in k}
    return model.load_state_dict(heads, strict=False)
