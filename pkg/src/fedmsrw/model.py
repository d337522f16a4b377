"""Segmentation network, tagged parameter sets, SGD, and checkpoint files."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T

NORM = "norm"
REST = "rest"
_TAG_BYTE = {REST: 0, NORM: 1}
_BYTE_TAG = {v: k for k, v in _TAG_BYTE.items()}


@dataclass
class Param:
    name: str
    value: np.ndarray
    tag: str
    trainable: bool = True
    grad: np.ndarray = None
    buf: np.ndarray = None

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.buf is None:
            self.buf = np.zeros_like(self.value)


class ParamSet:
    """Ordered, uniquely named parameters, each tagged ``norm`` or ``rest``."""

    def __init__(self, entries=()):
        self.entries: list[Param] = []
        self._index: dict[str, int] = {}
        for e in entries:
            self.add(e)

    def add(self, entry: Param) -> Param:
        if entry.name in self._index:
            raise ValueError(f"duplicate parameter name {entry.name!r}")
        self._index[entry.name] = len(self.entries)
        self.entries.append(entry)
        return entry

    def __getitem__(self, name: str) -> Param:
        return self.entries[self._index[name]]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __iter__(self) -> Iterator[Param]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def signature(self) -> list[tuple]:
        return [(e.name, e.value.shape, e.tag) for e in self.entries]

    def zero_grad(self) -> None:
        for e in self.entries:
            e.grad.fill(0.0)

    def copy(self) -> "ParamSet":
        return ParamSet(Param(e.name, e.value.copy(), e.tag, e.trainable,
                              e.grad.copy(), e.buf.copy()) for e in self.entries)

    def values(self) -> dict[str, np.ndarray]:
        return {e.name: e.value for e in self.entries}


def partition(params: ParamSet) -> tuple[list[Param], list[Param]]:
    """Split into (norm entries, rest entries), preserving order."""
    norm = [e for e in params if e.tag == NORM]
    rest = [e for e in params if e.tag == REST]
    return norm, rest


@dataclass
class ModelConfig:
    in_channels: int = 1
    blocks: list = field(default_factory=lambda: [8, 16, 16])
    kernel_size: int = 3
    use_batchnorm: bool = True

    def __post_init__(self):
        if not self.blocks or any(int(w) < 1 for w in self.blocks):
            raise ValueError("ModelConfig needs at least one block with width >= 1")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.0002
    momentum: float = 0.9
    weight_decay: float = 0.0005

    def __post_init__(self):
        if min(self.learning_rate, self.momentum, self.weight_decay) < 0:
            raise ValueError("optimizer settings must be non-negative")
        if self.momentum >= 1:
            raise ValueError("momentum must be < 1")


class SegNet:
    """conv-BN-ReLU blocks followed by a 1x1 conv and a sigmoid.

    Calling ``net(params, x, train)`` returns ``(probabilities, backward)``;
    ``backward(dout)`` accumulates gradients into ``params``.
    """

    def __init__(self, config: ModelConfig):
        self.config = config

    def _bn_state(self, params: ParamSet, b: int) -> T.BatchNormState:
        p = f"block{b}.bn."
        return T.BatchNormState(
            params[p + "gamma"].value, params[p + "beta"].value,
            params[p + "running_mean"].value, params[p + "running_var"].value,
            params[p + "num_batches_tracked"].value)

    def __call__(self, params: ParamSet, x: np.ndarray, train: bool = True):
        mode = "train" if train else "eval"
        pad = self.config.kernel_size // 2
        caches = []
        h = T.as_tensor(x)
        for b in range(len(self.config.blocks)):
            weight = params[f"block{b}.conv.weight"].value
            bias = params[f"block{b}.conv.bias"].value if f"block{b}.conv.bias" in params \
                else np.zeros(weight.shape[0])
            h, conv_c = T.conv2d(h, weight, bias, pad)
            bn_c = None
            if self.config.use_batchnorm:
                h, bn_c = T.batchnorm(h, self._bn_state(params, b), mode)
            h, relu_c = T.relu(h)
            caches.append((conv_c, bn_c, relu_c))
        logits, head_c = T.conv2d(h, params["head.weight"].value, params["head.bias"].value, 0)
        out, sig_c = T.sigmoid(logits)

        def backward(dout: np.ndarray) -> np.ndarray:
            g = T.sigmoid_backward(dout, sig_c)
            g, dw, db = T.conv2d_backward(g, head_c)
            params["head.weight"].grad += dw
            params["head.bias"].grad += db
            for b in reversed(range(len(caches))):
                conv_c, bn_c, relu_c = caches[b]
                g = T.relu_backward(g, relu_c)
                if bn_c is not None:
                    g, dgamma, dbeta = T.batchnorm_backward(g, bn_c)
                    params[f"block{b}.bn.gamma"].grad += dgamma
                    params[f"block{b}.bn.beta"].grad += dbeta
                g, dw, db = T.conv2d_backward(g, conv_c)
                params[f"block{b}.conv.weight"].grad += dw
                if f"block{b}.conv.bias" in params:
                    params[f"block{b}.conv.bias"].grad += db
            return g

        return out, backward


def build_model(config: ModelConfig | None = None, seed: int = 0):
    """Return ``(net, params)`` with He fan-in initialized conv kernels."""
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    params = ParamSet()
    cin, k = config.in_channels, config.kernel_size
    for b, width in enumerate(config.blocks):
        fan_in = cin * k * k
        params.add(Param(f"block{b}.conv.weight",
                         rng.standard_normal((width, cin, k, k)) * np.sqrt(2.0 / fan_in), REST))
        # a conv bias ahead of train-mode batchnorm is cancelled by the mean subtraction
        if config.use_batchnorm:
            p = f"block{b}.bn."
            params.add(Param(p + "gamma", np.ones(width), NORM))
            params.add(Param(p + "beta", np.zeros(width), NORM))
            params.add(Param(p + "running_mean", np.zeros(width), NORM, trainable=False))
            params.add(Param(p + "running_var", np.ones(width), NORM, trainable=False))
            params.add(Param(p + "num_batches_tracked", np.zeros(1), NORM, trainable=False))
        else:
            params.add(Param(f"block{b}.conv.bias", np.zeros(width), REST))
        cin = width
    params.add(Param("head.weight", rng.standard_normal((1, cin, 1, 1)) * np.sqrt(2.0 / cin), REST))
    params.add(Param("head.bias", np.zeros(1), REST))
    return SegNet(config), params


def model_objective(net, x: np.ndarray, y: np.ndarray):
    """``(loss_fn, grad_fn)`` of the soft Dice loss for :func:`~fedmsrw.tensor.grad_check`."""
    from .objectives import soft_dice_loss

    def loss_fn(params):
        return soft_dice_loss(net(params, x, True)[0], y)[0]

    def grad_fn(params):
        params.zero_grad()
        out, backward = net(params, x, True)
        backward(soft_dice_loss(out, y)[1])
        return {e.name: e.grad for e in params}

    return loss_fn, grad_fn


def sgd_step(params: ParamSet, opt: OptimizerConfig) -> None:
    """SGD with heavy-ball momentum and L2 weight decay on trainable entries."""
    for e in params:
        if not e.trainable:
            continue
        if not np.all(np.isfinite(e.grad)):
            raise T.NonFiniteError(f"non-finite gradient for parameter {e.name!r}")
        d = e.grad + opt.weight_decay * e.value if opt.weight_decay else e.grad
        e.buf *= opt.momentum
        e.buf += d
        e.value -= opt.learning_rate * e.buf


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------
#
# layout (little endian):
#   b"FSEG1" | u32 len + config digest (ascii) | u32 len + config json (utf-8)
#   u32 entry count, then per entry:
#   u16 name len | name | u8 tag | u8 trainable | u8 ndim | u32 * ndim | f64 payload

CHECKPOINT_MAGIC = b"FSEG1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ParamSet, config: ModelConfig) -> None:
    cfg = json.dumps(asdict(config), sort_keys=True).encode()
    digest = config.digest().encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(digest)), digest,
             struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(params))]
    for e in params:
        name = e.name.encode()
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<BBB", _TAG_BYTE[e.tag], int(e.trainable), e.value.ndim))
        parts.append(struct.pack(f"<{e.value.ndim}I", *e.value.shape))
        parts.append(e.value.astype("<f8").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at offset {self.pos}: "
                                  f"need {n} bytes, {len(self.data) - self.pos} left")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[ParamSet, ModelConfig]:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r} at offset 0")
    digest = r.take(r.unpack("<I")[0]).decode()
    cfg_at = r.pos
    config = ModelConfig(**json.loads(r.take(r.unpack("<I")[0])))
    if config.digest() != digest:
        raise CheckpointError(f"config digest mismatch at offset {cfg_at}")
    params = ParamSet()
    for _ in range(r.unpack("<I")[0]):
        name = r.take(r.unpack("<H")[0]).decode()
        at = r.pos
        tag, trainable, ndim = r.unpack("<BBB")
        if tag not in _BYTE_TAG:
            raise CheckpointError(f"unknown tag byte {tag} at offset {at}")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape))
        value = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        params.add(Param(name, value, _BYTE_TAG[tag], bool(trainable)))
    if r.pos != len(r.data):
        raise CheckpointError(f"trailing bytes after offset {r.pos}")
    return params, config
