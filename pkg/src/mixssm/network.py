"""Hierarchical classifier: patch embedding, mixing blocks, patch merging,
classifier head, and the binary checkpoint format.

The stage plan halves the grid and doubles the channels between stages, so a
default 224x224x3 input flows 56x56xC -> 28x28x2C -> 14x14x4C -> 7x7x8C
before the head.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .encoders import AttentionBranch, ChannelMlpBranch, ConvBranch, SsmBranch
from .errors import CheckpointError, ConfigError, ShapeError
from .fusion import AGGREGATION_MODES, POOLING_METHODS, SelectiveFusion, selective_module
from .modules import LayerNorm, Module, trunc_normal
from .tensor import Tensor, add, conv2d, matmul, reduce_mean, reshape, softmax, transpose

__all__ = [
    "BRANCH_NAMES",
    "ModelConfig",
    "desk_config",
    "Model",
    "MixSsmBlock",
    "PatchEmbed",
    "PatchMerging",
    "save_checkpoint",
    "load_checkpoint",
    "config_to_dict",
    "config_from_dict",
]

BRANCH_NAMES = ("ssm", "conv", "mlp", "msa")

CHECKPOINT_MAGIC = b"MIXSSM01"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Complete architectural description of one model."""

    input_size: tuple[int, int] = (224, 224)
    in_channels: int = 3
    patch_size: int = 4
    depths: tuple[int, ...] = (2, 2, 4, 2)
    channels: tuple[int, ...] = (32, 64, 128, 256)
    branches: tuple[str, ...] = BRANCH_NAMES
    heads: tuple[int, ...] = (2, 4, 8, 16)
    state_dim: int = 8
    kernel_size: int = 3
    pooling: str = "average"
    aggregation: str = "selective"
    reduction: int = 4
    ssm_shared_directions: bool = True
    num_classes: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(self.input_size))
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "heads", tuple(self.heads))
        object.__setattr__(
            self, "branches", tuple(b for b in BRANCH_NAMES if b in set(self.branches))
        )
        self.validate()

    def validate(self) -> None:
        h, w = self.input_size
        stages = len(self.depths)
        if stages < 1:
            raise ConfigError("need at least one stage")
        if len(self.channels) != stages or len(self.heads) != stages:
            raise ConfigError("depths, channels and heads must have equal length")
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(
                f"input {h}x{w} is not divisible by patch size {self.patch_size}"
            )
        hs, ws = h // self.patch_size, w // self.patch_size
        halvings = 2 ** (stages - 1)
        if hs % halvings or ws % halvings:
            raise ConfigError(
                f"embedded grid {hs}x{ws} is not divisible by 2^(stages-1) = {halvings}"
            )
        for a, b in zip(self.channels, self.channels[1:]):
            if b != 2 * a:
                raise ConfigError(f"stage channels must double each stage, got {self.channels}")
        if not self.branches:
            raise ConfigError("at least one branch must be enabled")
        for b in self.branches:
            if b not in BRANCH_NAMES:
                raise ConfigError(f"unknown branch {b!r}; expected subset of {BRANCH_NAMES}")
        for c, heads in zip(self.channels, self.heads):
            if heads < 1 or c % heads:
                raise ConfigError(f"heads {heads} must divide stage channels {c}")
            if self.reduction < 1 or c % self.reduction:
                raise ConfigError(f"reduction {self.reduction} must divide stage channels {c}")
        if self.state_dim < 1:
            raise ConfigError(f"state_dim must be >= 1, got {self.state_dim}")
        if self.kernel_size not in (1, 3, 5, 7):
            raise ConfigError(f"selective kernel size must be one of 1/3/5/7, got {self.kernel_size}")
        if self.pooling not in POOLING_METHODS:
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.aggregation not in AGGREGATION_MODES:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least two classes, got {self.num_classes}")

    def with_branches(self, branches: tuple[str, ...]) -> "ModelConfig":
        return dataclasses.replace(self, branches=branches)


def desk_config(num_classes: int = 4, seed: int = 0, **overrides) -> ModelConfig:
    """Laptop-scale configuration used by the smoke runs and sweeps."""
    base = dict(
        input_size=(32, 32),
        depths=(1, 1, 2, 1),
        channels=(16, 32, 64, 128),
        heads=(2, 4, 8, 16),
        num_classes=num_classes,
        seed=seed,
    )
    base.update(overrides)
    return ModelConfig(**base)


def config_to_dict(config: ModelConfig) -> dict:
    out = dataclasses.asdict(config)
    out["input_size"] = list(config.input_size)
    out["depths"] = list(config.depths)
    out["channels"] = list(config.channels)
    out["heads"] = list(config.heads)
    out["branches"] = list(config.branches)
    return out


def config_from_dict(data: dict) -> ModelConfig:
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**data)


class PatchEmbed(Module):
    """Non-overlapping patch projection (a strided conv) plus layer norm."""

    def __init__(self, patch_size: int, in_channels: int, channels: int, rng, dtype):
        self.kernel = Tensor(
            trunc_normal(rng, (patch_size, patch_size, in_channels, channels), dtype=dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.norm = LayerNorm(channels, dtype=dtype)
        self.patch_size = patch_size

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[-3], x.shape[-2]
        if h % self.patch_size or w % self.patch_size:
            raise ShapeError(f"image {h}x{w} is not divisible by patch size {self.patch_size}")
        out = conv2d(x, self.kernel, self.bias, stride=self.patch_size, padding="valid")
        return self.norm(out)


class PatchMerging(Module):
    """2x2 neighborhood concat, layer norm, linear projection to 2C."""

    def __init__(self, channels: int, rng, dtype):
        self.norm = LayerNorm(4 * channels, dtype=dtype)
        self.reduction = Tensor(
            trunc_normal(rng, (4 * channels, 2 * channels), dtype=dtype), requires_grad=True
        )

    def __call__(self, x: Tensor) -> Tensor:
        *lead, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"patch merging requires even spatial dims, got {h}x{w}")
        nl = len(lead)
        grouped = reshape(x, (*lead, h // 2, 2, w // 2, 2, c))
        perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)
        neighbors = reshape(transpose(grouped, perm), (*lead, h // 2, w // 2, 4 * c))
        return matmul(self.norm(neighbors), self.reduction)


class MixSsmBlock(Module):
    """Pre-norm residual block running the enabled branches in parallel.

    With a single enabled branch the fusion weights are identically one and
    the block degenerates to v + branch(norm(v)).
    """

    def __init__(
        self,
        channels: int,
        heads: int,
        branches: tuple[str, ...],
        state_dim: int,
        kernel_size: int,
        pooling: str,
        aggregation: str,
        reduction: int,
        ssm_shared_directions: bool,
        rng,
        dtype,
        pre_norm: bool = True,
    ):
        self.branch_order = tuple(b for b in BRANCH_NAMES if b in branches)
        if not self.branch_order:
            raise ConfigError("a block needs at least one enabled branch")
        self.pre_norm = pre_norm
        self.norm = LayerNorm(channels, dtype=dtype)
        self.ssm = (
            SsmBranch(channels, state_dim, ssm_shared_directions, rng=rng, dtype=dtype)
            if "ssm" in self.branch_order
            else None
        )
        self.conv = (
            ConvBranch(channels, rng=rng, dtype=dtype) if "conv" in self.branch_order else None
        )
        self.mlp = (
            ChannelMlpBranch(channels, rng=rng, dtype=dtype)
            if "mlp" in self.branch_order
            else None
        )
        self.msa = (
            AttentionBranch(channels, heads, rng=rng, dtype=dtype)
            if "msa" in self.branch_order
            else None
        )
        self.fusion = SelectiveFusion(
            channels,
            n=len(self.branch_order),
            reduction=reduction,
            kernel_size=kernel_size,
            pooling=pooling,
            mode=aggregation,
            rng=rng,
            dtype=dtype,
        )

    def branch_modules(self) -> list[tuple[str, Module]]:
        return [(name, getattr(self, name)) for name in self.branch_order]

    def __call__(self, v: Tensor, rng=None, training: bool = False) -> Tensor:
        u = self.norm(v) if self.pre_norm else v
        outputs = [branch(u) for _, branch in self.branch_modules()]
        fused = selective_module(outputs, self.fusion, rng=rng, training=training)
        return add(v, fused)


class Stage(Module):
    def __init__(self, blocks: list[MixSsmBlock], merge: PatchMerging | None):
        self.blocks = blocks
        self.merge = merge

    def __call__(self, x: Tensor, rng=None, training: bool = False) -> Tensor:
        for block in self.blocks:
            x = block(x, rng=rng, training=training)
        if self.merge is not None:
            x = self.merge(x)
        return x


class Model(Module):
    """The assembled classifier."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))

        self.patch_embed = PatchEmbed(
            config.patch_size, config.in_channels, config.channels[0], rng, self.dtype
        )
        stages = []
        for i, depth in enumerate(config.depths):
            blocks = [
                MixSsmBlock(
                    config.channels[i],
                    config.heads[i],
                    config.branches,
                    config.state_dim,
                    config.kernel_size,
                    config.pooling,
                    config.aggregation,
                    config.reduction,
                    config.ssm_shared_directions,
                    rng,
                    self.dtype,
                )
                for _ in range(depth)
            ]
            merge = (
                PatchMerging(config.channels[i], rng, self.dtype)
                if i + 1 < len(config.depths)
                else None
            )
            stages.append(Stage(blocks, merge))
        self.stages = stages
        self.final_norm = LayerNorm(config.channels[-1], dtype=self.dtype)
        self.head_weight = Tensor(
            trunc_normal(rng, (config.channels[-1], config.num_classes), dtype=self.dtype),
            requires_grad=True,
        )
        self.head_bias = Tensor(np.zeros(config.num_classes, dtype=self.dtype), requires_grad=True)

    def _check_input(self, images: Tensor) -> Tensor:
        expected = (*self.config.input_size, self.config.in_channels)
        if images.shape[-3:] != expected:
            raise ShapeError(
                f"input image shape {images.shape[-3:]} does not match configured {expected}"
            )
        if images.dtype != self.dtype:
            images = Tensor(images.data.astype(self.dtype), requires_grad=images.requires_grad)
        return images

    def forward_features(self, images: Tensor, rng=None, training: bool = False) -> Tensor:
        x = self.patch_embed(self._check_input(images))
        for stage in self.stages:
            x = stage(x, rng=rng, training=training)
        return x

    def forward_classify(self, images: Tensor, rng=None, training: bool = False) -> Tensor:
        """Class probability vector(s): (..., num_classes), rows sum to one."""
        x = self.forward_features(images, rng=rng, training=training)
        x = self.final_norm(x)
        pooled = reduce_mean(x, axis=(-3, -2))
        lead = pooled.shape[:-1]
        flat = reshape(pooled, (*lead, 1, pooled.shape[-1]))
        logits = add(matmul(flat, self.head_weight), self.head_bias)
        logits = reshape(logits, (*lead, self.config.num_classes))
        return softmax(logits, axis=-1)


# -- checkpoint persistence ---------------------------------------------------


def save_checkpoint(model: Model, path: str) -> None:
    """Write magic, 8-byte LE header length, JSON header, then <f4 payload."""
    entries = []
    blobs = []
    offset = 0
    for name, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        entries.append(
            {"name": name, "shape": list(p.shape), "offset": offset, "length": p.size}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {
            "version": CHECKPOINT_VERSION,
            "config": config_to_dict(model.config),
            "tensors": entries,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str, model: Model | None = None) -> Model:
    """Rebuild (or refill) a model from a checkpoint, bit-exactly."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    header_len = int.from_bytes(raw[8:16], "little")
    body = raw[16:]
    if len(body) < header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(body[:header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')!r}")
    try:
        config = config_from_dict(header["config"])
        entries = header["tensors"]
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from exc

    if model is None:
        model = Model(config)
    elif config_to_dict(model.config) != config_to_dict(config):
        raise CheckpointError(f"{path}: checkpoint config does not match the target model")

    payload = body[header_len:]
    params = dict(model.named_parameters())
    if sorted(params) != sorted(e["name"] for e in entries):
        raise CheckpointError(f"{path}: tensor directory does not match the model parameters")
    for entry in entries:
        name, shape = entry["name"], tuple(entry["shape"])
        length, offset = int(entry["length"]), int(entry["offset"])
        expected = 1
        for d in shape:
            expected *= d
        if expected != length:
            raise CheckpointError(
                f"{path}: tensor {name} declares shape {shape} but length {length}"
            )
        end = offset + 4 * length
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload for tensor {name}")
        values = np.frombuffer(payload[offset:end], dtype="<f4").reshape(shape)
        target = params[name]
        if target.shape != shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {shape}, model expects {target.shape}"
            )
        target.data = np.ascontiguousarray(values, dtype=model.dtype)
        target.grad = None
    return model
