"""
Hybrid classifier: backbone -> patchify -> token projection -> positional
embedding -> stacked bidirectional scan blocks -> token average -> linear
head -> sigmoid.

The `variant` field of ModelConfig also builds the two ablation models:
`backbone_only` pools the feature map straight into the head and `vim_only`
tokenizes raw pixels with `raw_patch_size` patches.
"""
import math
from collections import OrderedDict
from typing import Dict, Tuple

import numpy as np

from backbone import backbone_forward, backbone_preset, block_params, init_backbone_params, load_backbone_weights
from errors import DimensionError, StorageError
from models import BackboneConfig, ModelConfig
from ssm import init_block_params, mamba_block_forward
from tensor import DiffArray, add, linear, parameter, reduce_mean, reshape, sigmoid, transpose

Params = Dict[str, DiffArray]


def read_weights(path: str) -> Dict[str, np.ndarray]:
    try:
        with np.load(path, allow_pickle=False) as archive:
            return {name: archive[name] for name in archive.files}
    except (OSError, ValueError) as exc:
        raise StorageError(f"cannot read backbone weights {path}: {exc}") from exc


def resolve_backbone(cfg: ModelConfig) -> BackboneConfig:
    return backbone_preset(cfg.backbone, cfg.backbone_max_repeats)


def token_grid(cfg: ModelConfig, height: int, width: int) -> Tuple[int, int, int]:
    """(grid_h, grid_w, token width before projection) for one input size"""
    if cfg.variant == "vim_only":
        channels, stride, patch = 3, 1, cfg.raw_patch_size
    else:
        backbone = resolve_backbone(cfg)
        channels, stride, patch = backbone.head_channels, backbone.total_stride, cfg.patch_size
    if height % stride or width % stride:
        raise DimensionError(f"input {height}x{width} not divisible by total stride {stride}")
    gh, gw = height // stride, width // stride
    if gh % patch or gw % patch:
        raise DimensionError(f"feature grid {gh}x{gw} not divisible by patch size {patch}")
    return gh // patch, gw // patch, channels * patch * patch


def token_count(cfg: ModelConfig, height: int, width: int) -> int:
    gh, gw, _ = token_grid(cfg, height, width)
    return gh * gw


def init_model_params(cfg: ModelConfig, image_hw: Tuple[int, int], seed: int) -> Params:
    """All tensors of the configured variant, in a fixed order"""
    rng = np.random.default_rng(seed)
    params: Params = OrderedDict()
    if cfg.variant != "vim_only":
        params.update(init_backbone_params(resolve_backbone(cfg), rng))
        if cfg.backbone_weights:
            load_backbone_weights(params, read_weights(cfg.backbone_weights))

    if cfg.variant == "backbone_only":
        features = resolve_backbone(cfg).head_channels
    else:
        gh, gw, width = token_grid(cfg, *image_hw)
        bound = 1.0 / math.sqrt(width)
        params["embed.0.proj_w"] = parameter(
            rng.uniform(-bound, bound, (width, cfg.token_dim)).astype(np.float32), name="embed.0.proj_w")
        params["embed.0.pos"] = parameter(
            (0.02 * rng.standard_normal((gh * gw, cfg.token_dim))).astype(np.float32), name="embed.0.pos")
        for index in range(cfg.scan.blocks):
            for name, value in init_block_params(cfg.scan, rng).items():
                full = f"vim.{index}.{name}"
                value.name = full
                params[full] = value
        features = cfg.token_dim

    bound = 1.0 / math.sqrt(features)
    params["head.0.w"] = parameter(rng.uniform(-bound, bound, (features, 1)).astype(np.float32), name="head.0.w")
    params["head.0.b"] = parameter(np.zeros(1, dtype=np.float32), name="head.0.b")
    return params


def is_backbone(name: str) -> bool:
    return name.startswith("backbone.")


def parameter_counts(params: Params) -> Dict[str, int]:
    """Scalar count per parameter group (`backbone`, `embed`, `vim`, `head`) plus `total`"""
    counts: Dict[str, int] = {}
    for name, value in params.items():
        group = name.split(".", 1)[0]
        counts[group] = counts.get(group, 0) + value.size
    counts["total"] = sum(counts.values())
    return counts


def patchify(feature_map: DiffArray, patch: int) -> DiffArray:
    """Non-overlapping P x P patches in row-major order, each flattened channel-first"""
    if feature_map.ndim != 4:
        raise DimensionError(f"patchify expects [B, C, h, w], got {feature_map.shape}")
    b, c, h, w = feature_map.shape
    if patch < 1 or h % patch or w % patch:
        raise DimensionError(f"grid {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = reshape(feature_map, (b, c, gh, patch, gw, patch))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    return reshape(x, (b, gh * gw, c * patch * patch))


def project_tokens(tokens: DiffArray, weight: DiffArray) -> DiffArray:
    if tokens.shape[-1] != weight.shape[0]:
        raise DimensionError(f"token width {tokens.shape[-1]} != projection input {weight.shape[0]}")
    return linear(tokens, weight)


def add_positional(tokens: DiffArray, pos: DiffArray) -> DiffArray:
    if tokens.ndim != 3 or tokens.shape[1:] != pos.shape:
        raise DimensionError(f"positional table {pos.shape} does not match tokens {tokens.shape}")
    return add(tokens, pos)


def logits_forward(images: DiffArray, params: Params, cfg: ModelConfig) -> DiffArray:
    """Pre-sigmoid scores [B]"""
    if images.ndim != 4:
        raise DimensionError(f"images must be [B, 3, H, W], got {images.shape}")
    batch = images.shape[0]

    if cfg.variant == "vim_only":
        source, patch = images, cfg.raw_patch_size
    else:
        source, patch = backbone_forward(images, resolve_backbone(cfg), params), cfg.patch_size

    if cfg.variant == "backbone_only":
        features = reduce_mean(source, axes=(2, 3))
    else:
        tokens = project_tokens(patchify(source, patch), params["embed.0.proj_w"])
        tokens = add_positional(tokens, params["embed.0.pos"])
        for index in range(cfg.scan.blocks):
            tokens = mamba_block_forward(tokens, block_params(params, f"vim.{index}"), cfg.scan)
        features = reduce_mean(tokens, axes=1)

    logits = linear(features, params["head.0.w"], params["head.0.b"])
    return reshape(logits, (batch,))


def model_forward(images: DiffArray, params: Params, cfg: ModelConfig) -> DiffArray:
    """Malignancy probabilities [B] in (0, 1)"""
    return sigmoid(logits_forward(images, params, cfg))
