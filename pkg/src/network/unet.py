"""
Configurable 3D encoder-decoder with equal-resolution skip connections.

Layout for ``levels`` = L: L encoder blocks (convs + relu, then 2x max-pool),
a bottleneck block, L decoder stages (2x transposed conv, concat with the
matching encoder output, convs + relu) and a final 1x1x1 conv + softmax.
"""
import struct
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from network.neural import (
    Parameter,
    concat_channels,
    concat_channels_backward,
    conv3d_1x1,
    conv3d_1x1_backward,
    conv3d_same,
    conv3d_same_backward,
    he_init,
    maxpool3d_2,
    maxpool3d_2_backward,
    relu,
    relu_backward,
    softmax_channels,
    upconv3d_2,
    upconv3d_2_backward,
)
from utils.errors import FormatError, TruncationError, UsageError
from utils.logger import setup_logger
from volumes.volgrid import NUM_CLASSES, ProbMask

logger = setup_logger(__name__)

PUBLISHED_PARAM_COUNT = 22581411


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    out_channels: int = NUM_CLASSES
    levels: int = 4
    base_channels: int = 32
    convs_per_level: int = 2
    growth: int = 2

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise UsageError(f"ModelConfig.{f.name} must be a positive integer, got {value!r}")
        if self.out_channels != NUM_CLASSES:
            raise UsageError(f"out_channels must be {NUM_CLASSES} for this pipeline, got {self.out_channels}")

    def channels(self, level: int) -> int:
        return self.base_channels * self.growth ** level

    def check_spatial(self, spatial: Sequence[int]) -> None:
        factor = 2 ** self.levels
        if any(n % factor for n in spatial):
            raise UsageError(f"Spatial dims {tuple(spatial)} must be divisible by 2**levels = {factor}")

    @classmethod
    def toy(cls) -> "ModelConfig":
        return cls(levels=2, base_channels=4)

    @classmethod
    def reference(cls) -> "ModelConfig":
        return cls(levels=4, base_channels=32)


class _Conv:
    def __init__(self, name: str, cin: int, cout: int, rng: Optional[np.random.Generator]):
        self.weight = Parameter(f"{name}.weight", _init((cout, cin, 3, 3, 3), cin * 27, rng))
        self.bias = Parameter(f"{name}.bias", np.zeros(cout, dtype=np.float32))

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]


class _PointwiseConv(_Conv):
    def __init__(self, name: str, cin: int, cout: int, rng: Optional[np.random.Generator]):
        self.weight = Parameter(f"{name}.weight", _init((cout, cin, 1, 1, 1), cin, rng))
        self.bias = Parameter(f"{name}.bias", np.zeros(cout, dtype=np.float32))


class _UpConv(_Conv):
    def __init__(self, name: str, cin: int, cout: int, rng: Optional[np.random.Generator]):
        self.weight = Parameter(f"{name}.weight", _init((cin, cout, 2, 2, 2), cin * 8, rng))
        self.bias = Parameter(f"{name}.bias", np.zeros(cout, dtype=np.float32))


def _init(shape: Tuple[int, ...], fan_in: int, rng: Optional[np.random.Generator]) -> np.ndarray:
    if rng is None:
        return np.zeros(shape, dtype=np.float32)
    return he_init(shape, fan_in, rng)


class Model:
    """Parameters of the encoder-decoder plus forward/backward passes."""

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None):
        self.config = config
        c = config.channels
        self.encoder: List[List[_Conv]] = []
        cin = config.in_channels
        for level in range(config.levels):
            block = []
            for i in range(config.convs_per_level):
                block.append(_Conv(f"encoder.{level}.conv{i}", cin, c(level), rng))
                cin = c(level)
            self.encoder.append(block)

        self.bottleneck: List[_Conv] = []
        for i in range(config.convs_per_level):
            self.bottleneck.append(_Conv(f"bottleneck.conv{i}", cin, c(config.levels), rng))
            cin = c(config.levels)

        self.decoder: List[Tuple[_UpConv, List[_Conv]]] = []
        for level in reversed(range(config.levels)):
            up = _UpConv(f"decoder.{level}.up", cin, c(level), rng)
            cin = 2 * c(level)
            block = []
            for i in range(config.convs_per_level):
                block.append(_Conv(f"decoder.{level}.conv{i}", cin, c(level), rng))
                cin = c(level)
            self.decoder.append((up, block))

        self.head = _PointwiseConv("head", cin, config.out_channels, rng)
        self._caches: Optional[list] = None

    def parameters(self) -> List[Parameter]:
        """Encoder shallow to deep, bottleneck, decoder deep to shallow, head."""
        params: List[Parameter] = []
        for block in self.encoder:
            for conv in block:
                params.extend(conv.parameters())
        for conv in self.bottleneck:
            params.extend(conv.parameters())
        for up, block in self.decoder:
            params.extend(up.parameters())
            for conv in block:
                params.extend(conv.parameters())
        params.extend(self.head.parameters())
        return params

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    @staticmethod
    def _conv_relu(x: np.ndarray, block: List[_Conv], caches: list) -> np.ndarray:
        for conv in block:
            x, conv_cache = conv3d_same(x, conv.weight.value, conv.bias.value)
            x, relu_cache = relu(x)
            caches.append((conv, conv_cache, relu_cache))
        return x

    @staticmethod
    def _conv_relu_backward(dx: np.ndarray, records: list) -> np.ndarray:
        for conv, conv_cache, relu_cache in reversed(records):
            dx = relu_backward(dx, relu_cache)
            dx, dw, db = conv3d_same_backward(dx, conv_cache)
            conv.weight.grad += dw
            conv.bias.grad += db
        return dx

    def forward_logits(self, x: np.ndarray, keep_cache: bool = False) -> np.ndarray:
        """Pre-softmax scores (N, 3, D, H, W) for an (N, Cin, D, H, W) batch."""
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise UsageError(f"Model input must be (N, {self.config.in_channels}, D, H, W), got {x.shape}")
        self.config.check_spatial(x.shape[2:])

        enc_records, skips, pool_caches = [], [], []
        for block in self.encoder:
            records: list = []
            x = self._conv_relu(x, block, records)
            enc_records.append(records)
            skips.append(x)
            x, pool_cache = maxpool3d_2(x)
            pool_caches.append(pool_cache)

        bottleneck_records: list = []
        x = self._conv_relu(x, self.bottleneck, bottleneck_records)

        dec_records = []
        for (up, block), skip in zip(self.decoder, reversed(skips)):
            x, up_cache = upconv3d_2(x, up.weight.value, up.bias.value)
            x, cat_cache = concat_channels(skip, x)
            records: list = []
            x = self._conv_relu(x, block, records)
            dec_records.append((up, up_cache, cat_cache, records))

        logits, head_cache = conv3d_1x1(x, self.head.weight.value, self.head.bias.value)
        self._caches = [enc_records, pool_caches, bottleneck_records, dec_records, head_cache] if keep_cache else None
        return logits

    def backward(self, dlogits: np.ndarray) -> None:
        """Accumulate parameter gradients for the last ``keep_cache`` forward."""
        if self._caches is None:
            raise UsageError("backward() needs a preceding forward_logits(..., keep_cache=True)")
        enc_records, pool_caches, bottleneck_records, dec_records, head_cache = self._caches

        dx, dw, db = conv3d_1x1_backward(dlogits, head_cache)
        self.head.weight.grad += dw
        self.head.bias.grad += db

        # decoder stages run deep to shallow, so unwind them shallow to deep
        dskips = []
        for up, up_cache, cat_cache, records in reversed(dec_records):
            dx = self._conv_relu_backward(dx, records)
            dskip, dx = concat_channels_backward(dx, cat_cache)
            dskips.append(dskip)
            dx, dw, db = upconv3d_2_backward(dx, up_cache)
            up.weight.grad += dw
            up.bias.grad += db

        dx = self._conv_relu_backward(dx, bottleneck_records)

        for records, pool_cache, dskip in zip(reversed(enc_records), reversed(pool_caches), reversed(dskips)):
            dx = maxpool3d_2_backward(dx, pool_cache) + dskip
            dx = self._conv_relu_backward(dx, records)
        self._caches = None

    def predict(self, patch: np.ndarray, origin: Optional[Tuple[int, int, int]] = None) -> np.ndarray:
        """Channel-last probabilities (pd, ph, pw, 3) for one (pd, ph, pw) patch."""
        x = np.asarray(patch, dtype=np.float32)[None, None]
        probs, _ = softmax_channels(self.forward_logits(x))
        return np.moveaxis(probs[0], 0, -1)


def build_unet(config: ModelConfig, rng: np.random.Generator) -> Model:
    """He-initialized weights, zero biases."""
    model = Model(config, rng)
    logger.debug("model built", config=asdict(config), parameters=param_count(config))
    return model


def forward(model: Model, patch: np.ndarray) -> ProbMask:
    """Probability mask (pd, ph, pw, 3) for a (pd, ph, pw) patch."""
    return ProbMask(model.predict(patch))


def param_count(config: ModelConfig) -> int:
    """Number of weight and bias scalars of the model built from ``config``."""
    c = config.channels
    total = 0
    cin = config.in_channels
    for level in range(config.levels):
        for _ in range(config.convs_per_level):
            total += c(level) * cin * 27 + c(level)
            cin = c(level)
    for _ in range(config.convs_per_level):
        total += c(config.levels) * cin * 27 + c(config.levels)
        cin = c(config.levels)
    for level in reversed(range(config.levels)):
        total += cin * c(level) * 8 + c(level)
        cin = 2 * c(level)
        for _ in range(config.convs_per_level):
            total += c(level) * cin * 27 + c(level)
            cin = c(level)
    total += config.out_channels * cin + config.out_channels
    return total


def search_base_channels(
    target: int = PUBLISHED_PARAM_COUNT,
    candidates: Sequence[int] = (8, 16, 24, 28, 30, 31, 32, 33, 34, 40, 48),
    levels: int = 4,
) -> Tuple[int, Dict[int, int]]:
    """Parameter counts per candidate base width and the one closest to ``target``."""
    counts = {b: param_count(ModelConfig(levels=levels, base_channels=b)) for b in candidates}
    best = min(counts, key=lambda b: abs(counts[b] - target))
    return best, counts


# -- checkpoints -------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SPCKPT01"
CHECKPOINT_VERSION = 1
_CONFIG_FIELDS = ("in_channels", "out_channels", "levels", "base_channels", "convs_per_level", "growth")
_CKPT_HEADER = struct.Struct("<8sI" + "I" * len(_CONFIG_FIELDS) + "QQdQ")


@dataclass(frozen=True)
class CheckpointMeta:
    epoch: int
    iteration: int
    best_dice: float


def save_checkpoint(model: Model, epoch: int, iteration: int, best_dice: float) -> bytes:
    params = model.parameters()
    payload = np.concatenate([p.value.astype("<f4").ravel() for p in params])
    header = _CKPT_HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        *(getattr(model.config, name) for name in _CONFIG_FIELDS),
        epoch,
        iteration,
        float(best_dice),
        payload.size,
    )
    return header + payload.tobytes()


def load_checkpoint(blob: bytes) -> Tuple[Model, CheckpointMeta]:
    if len(blob) < _CKPT_HEADER.size:
        raise TruncationError(f"Checkpoint header needs {_CKPT_HEADER.size} bytes, got {len(blob)}")
    values = _CKPT_HEADER.unpack_from(blob, 0)
    magic, version = values[0], values[1]
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"Bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"Unsupported checkpoint version {version}")
    n_cfg = len(_CONFIG_FIELDS)
    try:
        config = ModelConfig(**dict(zip(_CONFIG_FIELDS, values[2:2 + n_cfg])))
    except UsageError as e:
        raise FormatError(f"Checkpoint carries an invalid model config: {e}") from e
    epoch, iteration, best_dice, count = values[2 + n_cfg:]

    if count != param_count(config):
        raise FormatError(f"Checkpoint declares {count} parameters, config needs {param_count(config)}")
    payload = blob[_CKPT_HEADER.size:]
    if len(payload) != count * 4:
        raise TruncationError(f"Checkpoint payload is {len(payload)} bytes, expected {count * 4}")

    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    model = Model(config)
    offset = 0
    for p in model.parameters():
        p.value[...] = flat[offset:offset + p.size].reshape(p.value.shape)
        offset += p.size
    return model, CheckpointMeta(epoch=int(epoch), iteration=int(iteration), best_dice=float(best_dice))
