"""3D feature pyramid backbone, voxel representations by cross-level
concatenation, the projection head, and the voxel-wise classifier heads.

Layer layout: the encoder runs convs_per_stage blocks of
(3x3x3 conv, instance norm, relu) per level with a stride-2 conv between
levels; the decoder gives each level a 1x1x1 lateral conv and merges in the
next coarser decoder output (1x1x1 channel reduction, nearest upsample,
add, one 3x3x3 conv block). Level l of the pyramid has base_channels * 2^l
channels at 1/2^l resolution, and a voxel's representation is the
concatenation of its containing cells across the selected levels.

Parameters live in flat dicts keyed by dotted names (for example
"encoder.stage0.conv1.weight"); checkpoints rely on those names staying
stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .autograd import Tensor, concat, relu
from .errors import ConfigError, ContractError


@dataclass
class FpnConfig:
    levels: int = 3
    base_channels: int = 8
    convs_per_stage: int = 2
    projector_hidden: int = 512
    projection_dim: int = 128
    representation_levels: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1 or self.convs_per_stage < 1:
            raise ConfigError("levels, base_channels and convs_per_stage must be >= 1")
        if self.representation_levels is None:
            self.representation_levels = tuple(range(self.levels))
        else:
            self.representation_levels = tuple(sorted(int(l) for l in self.representation_levels))
        if not self.representation_levels:
            raise ConfigError("representation_levels must be non-empty")
        if any(l < 0 or l >= self.levels for l in self.representation_levels):
            raise ConfigError(
                f"representation_levels {self.representation_levels} outside 0..{self.levels - 1}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


def paper_config() -> FpnConfig:
    return FpnConfig(levels=6, base_channels=16)


def representation_dim(config: FpnConfig) -> int:
    return sum(config.channels(l) for l in config.representation_levels)


def _he_conv(rng, out_ch, in_ch, k, dtype):
    fan_in = in_ch * k[0] * k[1] * k[2]
    std = np.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal((out_ch, in_ch, *k)) * std).astype(dtype),
                  requires_grad=True)


def _he_linear(rng, out_dim, in_dim, dtype):
    std = np.sqrt(2.0 / in_dim)
    return Tensor((rng.standard_normal((out_dim, in_dim)) * std).astype(dtype),
                  requires_grad=True)


def _norm_params(params, prefix, ch, dtype):
    params[f"{prefix}.scale"] = Tensor(np.ones(ch, dtype), requires_grad=True)
    params[f"{prefix}.shift"] = Tensor(np.zeros(ch, dtype), requires_grad=True)


def init_backbone_params(config: FpnConfig, rng: np.random.Generator,
                         dtype=np.float32) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for l in range(config.levels):
        ch = config.channels(l)
        if l > 0:
            params[f"encoder.down{l}.weight"] = _he_conv(rng, ch, config.channels(l - 1),
                                                         (3, 3, 3), dtype)
        in_ch = 1 if l == 0 else ch
        for i in range(config.convs_per_stage):
            params[f"encoder.stage{l}.conv{i}.weight"] = _he_conv(rng, ch, in_ch, (3, 3, 3), dtype)
            _norm_params(params, f"encoder.stage{l}.norm{i}", ch, dtype)
            in_ch = ch
    for l in range(config.levels):
        ch = config.channels(l)
        params[f"decoder.lateral{l}.weight"] = _he_conv(rng, ch, ch, (1, 1, 1), dtype)
        params[f"decoder.lateral{l}.bias"] = Tensor(np.zeros(ch, dtype), requires_grad=True)
        if l < config.levels - 1:
            params[f"decoder.reduce{l}.weight"] = _he_conv(rng, ch, config.channels(l + 1),
                                                           (1, 1, 1), dtype)
            params[f"decoder.block{l}.conv.weight"] = _he_conv(rng, ch, ch, (3, 3, 3), dtype)
            _norm_params(params, f"decoder.block{l}.norm", ch, dtype)
    return params


def init_projector_params(config: FpnConfig, rng: np.random.Generator,
                          dtype=np.float32) -> dict[str, Tensor]:
    dims = [representation_dim(config), config.projector_hidden,
            config.projector_hidden, config.projection_dim]
    params: dict[str, Tensor] = {}
    for i in range(3):
        params[f"projector.linear{i}.weight"] = _he_linear(rng, dims[i + 1], dims[i], dtype)
        params[f"projector.linear{i}.bias"] = Tensor(np.zeros(dims[i + 1], dtype),
                                                     requires_grad=True)
    # small nonzero output bias keeps projections off the exact zero vector
    # even if every hidden relu dies, so normalized rows stay unit length
    params["projector.linear2.bias"].data[:] = (
        0.01 * rng.standard_normal(dims[3])).astype(dtype)
    return params


def _conv_block(x, params, conv_name, norm_name):
    x = F.conv3d(x, params[f"{conv_name}.weight"], padding=(1, 1, 1))
    x = F.instance_norm3d(x, params[f"{norm_name}.scale"], params[f"{norm_name}.shift"])
    return relu(x)


def fpn_forward(params: dict[str, Tensor], config: FpnConfig, patches: Tensor) -> list[Tensor]:
    """Run the backbone; returns the feature pyramid maps[0..levels-1].

    patches: [B, 1, H, W, D] with every spatial extent divisible by
    2^(levels - 1).
    """
    if patches.data.ndim != 5 or patches.data.shape[1] != 1:
        raise ContractError("expected patches of shape [B, 1, H, W, D]")
    divisor = 2 ** (config.levels - 1)
    for e in patches.data.shape[2:]:
        if e % divisor:
            raise ConfigError(
                f"patch extent {e} not divisible by 2^{config.levels - 1}")

    encoder = []
    x = patches
    for l in range(config.levels):
        if l > 0:
            x = F.conv3d(x, params[f"encoder.down{l}.weight"], stride=(2, 2, 2),
                         padding=(1, 1, 1))
        for i in range(config.convs_per_stage):
            x = _conv_block(x, params, f"encoder.stage{l}.conv{i}", f"encoder.stage{l}.norm{i}")
        encoder.append(x)

    maps: list[Tensor | None] = [None] * config.levels
    top = config.levels - 1
    d = F.conv3d(encoder[top], params[f"decoder.lateral{top}.weight"],
                 params[f"decoder.lateral{top}.bias"])
    maps[top] = d
    for l in range(top - 1, -1, -1):
        reduced = F.conv3d(d, params[f"decoder.reduce{l}.weight"])
        up = F.nearest_upsample3d(reduced, (2, 2, 2))
        lateral = F.conv3d(encoder[l], params[f"decoder.lateral{l}.weight"],
                           params[f"decoder.lateral{l}.bias"])
        d = _conv_block(lateral + up, params, f"decoder.block{l}.conv", f"decoder.block{l}.norm")
        maps[l] = d
    return maps


def gather_representations(pyramid: list[Tensor], config: FpnConfig,
                           patch_indices: np.ndarray, local_voxels: np.ndarray) -> Tensor:
    """Differentiable batched read of voxel representations.

    local_voxels is integer [N, 3] in full-resolution patch coordinates; the
    level-l slice comes from cell floor(voxel / 2^l). Output is [N, dim] in
    ascending level order.
    """
    local_voxels = np.asarray(local_voxels, dtype=np.int64)
    pieces = []
    for l in config.representation_levels:
        pieces.append(F.gather_voxels(pyramid[l], patch_indices, local_voxels // (2 ** l)))
    return concat(pieces, axis=1) if len(pieces) > 1 else pieces[0]


def gather_representation(pyramid: list[Tensor], config: FpnConfig,
                          patch_index: int, local_voxel) -> np.ndarray:
    """Single-voxel convenience wrapper; returns a plain vector."""
    voxel = np.asarray(local_voxel, dtype=np.int64).reshape(1, 3)
    out = gather_representations(pyramid, config, np.array([patch_index]), voxel)
    return out.data[0]


def project(params: dict[str, Tensor], h: Tensor) -> Tensor:
    """3-layer perceptron onto the unit sphere: [N, dim] -> [N, projection_dim]."""
    z = F.linear(h, params["projector.linear0.weight"], params["projector.linear0.bias"])
    z = relu(z)
    z = F.linear(z, params["projector.linear1.weight"], params["projector.linear1.bias"])
    z = relu(z)
    z = F.linear(z, params["projector.linear2.weight"], params["projector.linear2.bias"])
    return F.l2_normalize(z)


def init_linear_head_params(config: FpnConfig, num_classes: int, rng: np.random.Generator,
                            dtype=np.float32) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for l in config.representation_levels:
        std = np.sqrt(1.0 / config.channels(l))
        params[f"linear_head.level{l}.weight"] = Tensor(
            (rng.standard_normal((num_classes, config.channels(l), 1, 1, 1)) * std).astype(dtype),
            requires_grad=True)
    params["linear_head.bias"] = Tensor(np.zeros(num_classes, dtype), requires_grad=True)
    return params


def linear_head_forward(params: dict[str, Tensor], pyramid: list[Tensor],
                        config: FpnConfig) -> Tensor:
    """Per-level 1x1x1 convs, upsampled to full resolution and summed.

    Equivalent to a dense linear classifier over the concatenated voxel
    representation; the bias enters once, on the finest selected level.
    """
    logits = None
    first = config.representation_levels[0]
    for l in config.representation_levels:
        bias = params["linear_head.bias"] if l == first else None
        level_logits = F.conv3d(pyramid[l], params[f"linear_head.level{l}.weight"], bias)
        if l > 0:
            level_logits = F.nearest_upsample3d(level_logits, (2 ** l,) * 3)
        logits = level_logits if logits is None else logits + level_logits
    return logits


def init_nonlinear_head_params(config: FpnConfig, num_classes: int, rng: np.random.Generator,
                               dtype=np.float32) -> dict[str, Tensor]:
    levels = config.representation_levels
    params: dict[str, Tensor] = {}
    carry = config.channels(levels[-1])
    for l in reversed(levels[:-1]):
        ch = config.channels(l)
        params[f"nonlinear_head.merge{l}.conv.weight"] = _he_conv(rng, ch, carry + ch,
                                                                  (1, 1, 1), dtype)
        _norm_params(params, f"nonlinear_head.merge{l}.norm", ch, dtype)
        carry = ch
    params["nonlinear_head.classify.weight"] = _he_conv(rng, num_classes, carry, (1, 1, 1), dtype)
    params["nonlinear_head.classify.bias"] = Tensor(np.zeros(num_classes, dtype),
                                                    requires_grad=True)
    return params


def nonlinear_head_forward(params: dict[str, Tensor], pyramid: list[Tensor],
                           config: FpnConfig) -> Tensor:
    """Decoder-shaped head with every kernel 1x1x1: purely voxel-wise given
    the pyramid, so all spatial mixing comes from the upsampling."""
    levels = config.representation_levels
    y = pyramid[levels[-1]]
    current = levels[-1]
    for l in reversed(levels[:-1]):
        y = F.nearest_upsample3d(y, (2 ** (current - l),) * 3)
        y = concat([y, pyramid[l]], axis=1)
        y = F.conv3d(y, params[f"nonlinear_head.merge{l}.conv.weight"])
        y = F.instance_norm3d(y, params[f"nonlinear_head.merge{l}.norm.scale"],
                              params[f"nonlinear_head.merge{l}.norm.shift"])
        y = relu(y)
        current = l
    logits = F.conv3d(y, params["nonlinear_head.classify.weight"],
                      params["nonlinear_head.classify.bias"])
    if current > 0:
        logits = F.nearest_upsample3d(logits, (2 ** current,) * 3)
    return logits


def parameter_count(params: dict[str, Tensor]) -> int:
    return int(sum(p.data.size for p in params.values()))
