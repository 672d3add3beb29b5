"""Deeply supervised mini U-Net.

The trunk is a symmetric encoder/decoder. Two auxiliary 1x1-conv heads sit on
decoder stages (lower and middle) and are bilinearly upsampled to full
resolution; the final head sits on the last decoder stage. Each head is
softmax-normalised and trained with pixel-mean cross-entropy; the training
objective is the weighted sum of the three head losses.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    concat_channels,
    conv2d,
    maxpool2d,
    nll_mean,
    no_grad,
    relu,
    softmax_channels,
    upsample_bilinear,
    weighted_sum,
)

HEADS = ("l", "m", "f")


class ConfigError(ValueError):
    pass


class TrainingDivergedError(NonFiniteError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha_l: float = 0.1
    alpha_m: float = 0.3
    alpha_f: float = 0.6

    def __post_init__(self):
        ws = self.as_tuple()
        if any(w < 0 or not np.isfinite(w) for w in ws) or sum(ws) <= 0:
            raise ConfigError(f"loss weights must be non-negative with positive sum, got {ws}")

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.alpha_l, self.alpha_m, self.alpha_f)


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 3
    base_channels: int = 8
    classes: int = 2
    input_size: Tuple[int, int] = (64, 64)
    aux_stage_lower: int = 0
    aux_stage_middle: int = 1
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))
        self.validate()

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.classes != 2:
            raise ConfigError("only binary segmentation (classes=2) is supported")
        if len(self.input_size) != 2:
            raise ConfigError(f"input_size must be (H, W), got {self.input_size}")
        div = 2 ** self.depth
        h, w = self.input_size
        if h <= 0 or w <= 0 or h % div or w % div:
            raise ConfigError(f"input size {h}x{w} is not divisible by 2**depth = {div}")
        for name in ("aux_stage_lower", "aux_stage_middle"):
            v = getattr(self, name)
            if not 0 <= v < self.depth:
                raise ConfigError(f"{name}={v} is not a decoder stage index in [0, {self.depth})")
        if self.aux_stage_lower == self.aux_stage_middle:
            raise ConfigError("aux_stage_lower and aux_stage_middle must differ")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["loss_weights"] = LossWeights(**d.get("loss_weights", {}))
        return cls(**d)


def _param_specs(cfg: ModelConfig):
    """(name, shape, fan_in) in declaration order."""
    b = cfg.base_channels
    specs = []

    def conv(name, cin, cout, k=3):
        specs.append((f"{name}.weight", (cout, cin, k, k), cin * k * k))
        specs.append((f"{name}.bias", (cout,), cin * k * k))

    cin = 1
    for s in range(cfg.depth):
        cout = b * 2 ** s
        conv(f"enc{s}.conv1", cin, cout)
        conv(f"enc{s}.conv2", cout, cout)
        cin = cout
    conv("bottleneck.conv1", cin, b * 2 ** cfg.depth)
    conv("bottleneck.conv2", b * 2 ** cfg.depth, b * 2 ** cfg.depth)
    for d in range(cfg.depth):
        level = cfg.depth - 1 - d
        cout = b * 2 ** level
        conv(f"dec{d}.conv1", b * 2 ** (level + 1) + cout, cout)
        conv(f"dec{d}.conv2", cout, cout)
    stage_of = {"l": cfg.aux_stage_lower, "m": cfg.aux_stage_middle, "f": cfg.depth - 1}
    for head in HEADS:
        level = cfg.depth - 1 - stage_of[head]
        conv(f"head_{head}", b * 2 ** level, cfg.classes, k=1)
    return specs


@dataclass
class Model:
    config: ModelConfig
    params: Dict[str, Tensor]

    @property
    def trunk_params(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if not k.startswith("head_")}

    def head_params(self, head: str) -> Dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(f"head_{head}.")}

    @property
    def head_params_l(self) -> Dict[str, Tensor]:
        return self.head_params("l")

    @property
    def head_params_m(self) -> Dict[str, Tensor]:
        return self.head_params("m")

    @property
    def head_params_f(self) -> Dict[str, Tensor]:
        return self.head_params("f")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "Model":
        return Model(self.config, {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                                   for k, v in self.params.items()})

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


class PredictionSet(NamedTuple):
    p_l: Optional[Tensor]
    p_m: Optional[Tensor]
    p_f: Tensor

    def get(self, head: str) -> Optional[Tensor]:
        return getattr(self, f"p_{head}")


def build_model(config: ModelConfig) -> Model:
    """Allocate parameters with He (fan-in) normal init; biases start at zero."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    params = {}
    for name, shape, fan_in in _param_specs(config):
        if name.endswith(".bias"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            arr = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return Model(config, params)


def _block(x: Tensor, p: Dict[str, Tensor], name: str) -> Tensor:
    x = relu(conv2d(x, p[f"{name}.conv1.weight"], p[f"{name}.conv1.bias"], padding=1))
    return relu(conv2d(x, p[f"{name}.conv2.weight"], p[f"{name}.conv2.bias"], padding=1))


def _as_images(model: Model, images) -> Tensor:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[:, None]
    h, w = model.config.input_size
    if arr.ndim != 4 or arr.shape[1] != 1 or arr.shape[2:] != (h, w):
        raise ShapeError(f"images must be [N,1,{h},{w}], got {arr.shape}")
    if isinstance(images, Tensor) and images.dtype == np.dtype(model.config.dtype):
        return images
    return Tensor(arr.astype(model.config.dtype, copy=False))


def forward(model: Model, images, heads: Sequence[str] = HEADS) -> PredictionSet:
    """Probability maps for the requested heads, each [N, classes, H, W].

    Heads not requested are returned as ``None`` and add nothing to the graph.
    Auxiliary logits are upsampled to full resolution before the softmax.
    """
    cfg = model.config
    p = model.params
    x = _as_images(model, images)
    skips = []
    for s in range(cfg.depth):
        x = _block(x, p, f"enc{s}")
        skips.append(x)
        x = maxpool2d(x)
    x = _block(x, p, "bottleneck")
    stage_out = []
    for d in range(cfg.depth):
        x = upsample_bilinear(x, 2)
        x = concat_channels(x, skips[cfg.depth - 1 - d])
        x = _block(x, p, f"dec{d}")
        stage_out.append(x)
    stage_of = {"l": cfg.aux_stage_lower, "m": cfg.aux_stage_middle, "f": cfg.depth - 1}
    out = {}
    for head in HEADS:
        if head not in heads:
            out[head] = None
            continue
        stage = stage_of[head]
        logits = conv2d(stage_out[stage], p[f"head_{head}.weight"], p[f"head_{head}.bias"])
        factor = 2 ** (cfg.depth - 1 - stage)
        if factor > 1:
            logits = upsample_bilinear(logits, factor)
        out[head] = softmax_channels(logits)
    return PredictionSet(out["l"], out["m"], out["f"])


def predict(model: Model, images, batch_size: int = 32, heads: Sequence[str] = HEADS) -> Dict[str, np.ndarray]:
    """Inference without graph construction; returns probability arrays per head."""
    x = _as_images(model, images).data
    chunks = {h: [] for h in heads}
    with no_grad():
        for start in range(0, len(x), batch_size):
            preds = forward(model, x[start:start + batch_size], heads=heads)
            for h in heads:
                chunks[h].append(preds.get(h).data)
    return {h: np.concatenate(v) if v else np.zeros((0, model.config.classes) + model.config.input_size)
            for h, v in chunks.items()}


class LossResult(NamedTuple):
    total: Tensor
    per_head: Tuple[Optional[Tensor], Optional[Tensor], Optional[Tensor]]

    def values(self) -> Tuple[float, Tuple[float, ...]]:
        return float(self.total), tuple(float("nan") if t is None else float(t) for t in self.per_head)


def loss(preds: PredictionSet, target, weights: LossWeights = LossWeights()) -> LossResult:
    """Weighted deep-supervision loss.

    Each head contributes the mean over batch and pixels of ``-log p(target)``
    (probabilities clamped at 1e-12); the total is
    ``alpha_l*L_l + alpha_m*L_m + alpha_f*L_f`` evaluated in that order in 64-bit.
    """
    target = np.asarray(target)
    if target.ndim == 4 and target.shape[1] == 1:
        target = target[:, 0]
    terms, ws = [], []
    per_head = []
    for head, w in zip(HEADS, weights.as_tuple()):
        p = preds.get(head)
        if p is None:
            if w != 0:
                raise ValueError(f"head {head!r} has weight {w} but was not computed")
            per_head.append(None)
            continue
        term = nll_mean(p, target)
        per_head.append(term)
        terms.append(term)
        ws.append(w)
    return LossResult(weighted_sum(terms, ws), tuple(per_head))


def predict_mask(model: Model, image) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Binary masks (lower, middle, final) for one image ``[H,W]`` or ``[1,H,W]``.

    Foreground where its probability is strictly above 0.5; exact ties go to
    background.
    """
    arr = np.asarray(image.data if isinstance(image, Tensor) else image)
    squeeze = arr.ndim == 2 or (arr.ndim == 3 and arr.shape[0] == 1)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None] if arr.shape[0] != 1 else arr[None]
    probs = predict(model, arr)
    masks = tuple(binarize(probs[h]) for h in HEADS)
    if squeeze:
        masks = tuple(m[0] for m in masks)
    return masks


def binarize(prob_map: np.ndarray) -> np.ndarray:
    """[N,2,H,W] (or [2,H,W]) probabilities -> uint8 foreground mask."""
    return (prob_map[..., 1, :, :] > 0.5).astype(np.uint8)


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, Tensor]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - step).astype(p.data.dtype, copy=False)


def train_step(model: Model, batch, optimizer: Adam) -> float:
    """One Adam update on the deep-supervision loss; returns the pre-update loss."""
    images, masks = batch
    model.zero_grad()
    preds = forward(model, images)
    result = loss(preds, masks, model.config.loss_weights)
    value = float(result.total)
    if not np.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss {value}")
    result.total.backward()
    for name, p in model.params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDivergedError(f"non-finite gradient in {name}")
    optimizer.step(model.params)
    return value


def train_epochs(model: Model, images: np.ndarray, masks: np.ndarray, optimizer: Adam,
                 epochs: int, batch_size: int, rng: np.random.Generator) -> list:
    """Shuffled mini-batch training; returns the mean loss of each epoch."""
    n = len(images)
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = np.sort(order[start:start + batch_size])
            losses.append(train_step(model, (images[idx], masks[idx]), optimizer))
        history.append(float(np.mean(losses)))
    return history


# ---------------------------------------------------------------------------
# checkpoint container
#
#   bytes 0-7   magic b"DSALCKPT"
#   bytes 8-11  format version, uint32 LE (currently 1)
#   bytes 12-15 header length L, uint32 LE
#   next L      UTF-8 JSON: {"config", "seed", "round", "params": [[name, shape], ...]}
#   remainder   every parameter in declaration order as float32 little-endian

CHECKPOINT_MAGIC = b"DSALCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: Model, path, round_index: int = 0) -> None:
    header = {
        "config": model.config.to_dict(),
        "seed": int(model.config.seed),
        "round": int(round_index),
        "params": [[name, list(t.shape)] for name, t in model.params.items()],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(raw)))
        fh.write(raw)
        for t in model.params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> Tuple[Model, int]:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    config = ModelConfig.from_dict(header["config"])
    expected = [(n, tuple(s)) for n, s, _ in _param_specs(config)]
    stored = [(n, tuple(s)) for n, s in header["params"]]
    if stored != expected:
        raise ValueError(f"{path}: parameter layout does not match its config")
    offset = 16 + hlen
    params = {}
    for name, shape in stored:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        params[name] = Tensor(arr.astype(config.dtype), requires_grad=True, name=name)
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    return Model(config, params), int(header["round"])
