"""The adapted M5 raw-waveform CNN.

Four blocks of conv -> batch norm -> ReLU -> max pool(4), then global average
pooling over time and a linear classifier.  With the default 8000-sample input
(4 s at 2 kHz) the time axis goes 8000 -> 496 -> 124 | 122 -> 30 | 28 -> 7 |
5 -> 1.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import BatchNormState, Tensor, default_dtype
from .autograd import checkpoint as ckpt
from .autograd.ops import batchnorm1d, conv1d, global_avg_pool, linear, maxpool1d, relu


@dataclass(frozen=True)
class M5Arch:
    channels: tuple[int, ...] = (32, 32, 64, 64)
    kernels: tuple[int, ...] = (80, 3, 3, 3)
    strides: tuple[int, ...] = (16, 1, 1, 1)
    pool: int = 4
    in_channels: int = 1
    num_classes: int = 5
    input_len: int = 8000

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "M5Arch":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# Shrunk variant for end-to-end gradient checks.  Stride 4 and pool 2 replace
# 16 and 4 so that a 400-sample input keeps every length positive.
TINY_ARCH = M5Arch(channels=(2, 2, 4, 4), strides=(4, 1, 1, 1), pool=2, input_len=400)


def shape_trace(arch: M5Arch) -> list[int]:
    """Time-axis length after each conv and each pool, in order."""
    lengths = []
    n = arch.input_len
    for k, s in zip(arch.kernels, arch.strides):
        if n < k:
            raise ValueError(f"input length {arch.input_len} too short for {arch}")
        n = (n - k) // s + 1
        lengths.append(n)
        n //= arch.pool
        lengths.append(n)
    if n < 1:
        raise ValueError(f"input length {arch.input_len} collapses to zero in {arch}")
    return lengths


@dataclass
class ModelParams:
    arch: M5Arch
    params: dict[str, Tensor]
    bn: list[BatchNormState] = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, st in enumerate(self.bn):
            out[f"block{i + 1}.bn.running_mean"] = st.running_mean
            out[f"block{i + 1}.bn.running_var"] = st.running_var
        return out

    def copy(self) -> "ModelParams":
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k, dtype=v.dtype) for k, v in self.params.items()}
        bn = []
        for st in self.bn:
            c = BatchNormState(st.running_mean.shape[0], st.running_mean.dtype)
            c.running_mean[...] = st.running_mean
            c.running_var[...] = st.running_var
            bn.append(c)
        return ModelParams(self.arch, params, bn)


def build_m5(num_classes: int = 5, seed: int = 0, arch: M5Arch | None = None) -> ModelParams:
    """Freshly initialized parameters.

    Conv weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); the
    classifier starts at zero so the initial prediction is uniform (loss
    exactly ln(num_classes)); batch-norm gamma 1, beta 0, running mean 0,
    running var 1.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    arch = arch or M5Arch()
    if arch.num_classes != num_classes:
        arch = M5Arch(**{**asdict(arch), "num_classes": num_classes})
    shape_trace(arch)
    rng = np.random.default_rng(seed)
    dtype = default_dtype()

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params: dict[str, Tensor] = {}
    bn = []
    cin = arch.in_channels
    for i, (cout, k) in enumerate(zip(arch.channels, arch.kernels), start=1):
        fan_in = cin * k
        params[f"block{i}.conv.weight"] = uniform((cout, cin, k), fan_in)
        params[f"block{i}.conv.bias"] = uniform((cout,), fan_in)
        params[f"block{i}.bn.gamma"] = np.ones(cout)
        params[f"block{i}.bn.beta"] = np.zeros(cout)
        bn.append(BatchNormState(cout, dtype))
        cin = cout
    params["classifier.weight"] = np.zeros((num_classes, cin))
    params["classifier.bias"] = np.zeros(num_classes)
    tensors = {k: Tensor(v, requires_grad=True, name=k, dtype=dtype) for k, v in params.items()}
    return ModelParams(arch, tensors, bn)


def forward(model: ModelParams, x, mode: str = "eval") -> Tensor:
    """Logits [B, num_classes] for a batch ``x`` of shape [B, 1, input_len]."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    arch = model.arch
    if x.ndim != 3 or x.shape[1] != arch.in_channels or x.shape[2] != arch.input_len:
        trace = " -> ".join(str(n) for n in [arch.input_len, *shape_trace(arch)])
        raise ValueError(
            f"M5 expects input [B, {arch.in_channels}, {arch.input_len}] (time axis {trace}), got {x.shape}"
        )
    p = model.params
    h = x
    for i, stride in enumerate(arch.strides, start=1):
        h = conv1d(h, p[f"block{i}.conv.weight"], p[f"block{i}.conv.bias"], stride)
        h = batchnorm1d(h, p[f"block{i}.bn.gamma"], p[f"block{i}.bn.beta"], model.bn[i - 1], mode)
        h = maxpool1d(relu(h), arch.pool)
    return linear(global_avg_pool(h), p["classifier.weight"], p["classifier.bias"])


def predict_logits(logits) -> np.ndarray:
    # np.argmax returns the first maximal index: ties go to the lower class
    return np.asarray(logits).argmax(axis=1)


def predict(model: ModelParams, x, chunk: int = 64) -> np.ndarray:
    """Eval-mode class indices, evaluated in chunks of ``chunk`` rows."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    out = [predict_logits(forward(model, x[i : i + chunk], "eval").data) for i in range(0, x.shape[0], chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def save_checkpoint(model: ModelParams, path, adam=None, extra: dict | None = None) -> None:
    adam_doc = None
    if adam is not None:
        adam_doc = {k: getattr(adam, k) for k in ("lr", "weight_decay", "beta1", "beta2", "eps", "step", "m", "v")}
    ckpt.save(
        path,
        architecture=model.arch.to_dict(),
        params={k: v.data for k, v in model.params.items()},
        buffers=model.buffers(),
        adam=adam_doc,
        extra=extra,
    )


def load_checkpoint(path, expected_arch: M5Arch | None = None) -> ModelParams:
    doc = ckpt.load(path)
    arch = M5Arch.from_dict(doc["architecture"])
    if expected_arch is not None and arch != expected_arch:
        raise ckpt.CheckpointError(f"{path}: architecture {arch} does not match expected {expected_arch}")
    model = build_m5(arch.num_classes, seed=0, arch=arch)
    for name, t in model.params.items():
        if name not in doc["params"] or doc["params"][name].shape != t.shape:
            raise ckpt.CheckpointError(f"{path}: parameter {name} missing or mis-shaped")
        t.data[...] = doc["params"][name]
    for name, buf in model.buffers().items():
        buf[...] = doc["buffers"][name]
    return model
