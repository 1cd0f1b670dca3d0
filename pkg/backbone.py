"""
EfficientNetV2-style convolutional feature extractor.

Batch norm is replaced by a learnable per-channel scale and bias after every
convolution, and every activation is SiLU. Tensor names follow
`backbone.<block_index>.<param>`, with the stem at index 0 and the 1x1 head
at the last index.
"""
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from errors import DimensionError
from logger import logger
from models import BackboneConfig, StageSpec
from tensor import (
    DiffArray, add, conv2d, linear, mul, parameter, reduce_mean, reshape, sigmoid, silu,
)

Params = Dict[str, DiffArray]

# EfficientNetV2-M stage table (widths, repeats, strides, expansion, SE)
_M_LIKE = BackboneConfig(
    stem_channels=24,
    stages=[
        StageSpec(block_kind="fused_mbconv", repeats=3, out_channels=24, stride=1, expansion=1),
        StageSpec(block_kind="fused_mbconv", repeats=5, out_channels=48, stride=2, expansion=4),
        StageSpec(block_kind="fused_mbconv", repeats=5, out_channels=80, stride=2, expansion=4),
        StageSpec(block_kind="mbconv", repeats=7, out_channels=160, stride=2, expansion=4, se_ratio=0.25),
        StageSpec(block_kind="mbconv", repeats=14, out_channels=176, stride=1, expansion=6, se_ratio=0.25),
        StageSpec(block_kind="mbconv", repeats=18, out_channels=304, stride=2, expansion=6, se_ratio=0.25),
        StageSpec(block_kind="mbconv", repeats=5, out_channels=512, stride=1, expansion=6, se_ratio=0.25),
    ],
    head_channels=1280,
)

_TINY = BackboneConfig(
    stem_channels=16,
    stages=[
        StageSpec(block_kind="fused_mbconv", repeats=1, out_channels=16, stride=1, expansion=1),
        StageSpec(block_kind="fused_mbconv", repeats=1, out_channels=32, stride=2, expansion=2),
        StageSpec(block_kind="mbconv", repeats=1, out_channels=48, stride=2, expansion=2, se_ratio=0.25),
        StageSpec(block_kind="mbconv", repeats=1, out_channels=64, stride=2, expansion=2, se_ratio=0.25),
    ],
    head_channels=128,
)

PRESETS = {"m-like": _M_LIKE, "tiny": _TINY}


def backbone_preset(name: str, max_repeats: Optional[int] = None) -> BackboneConfig:
    """Named preset, optionally with every stage truncated to `max_repeats` blocks"""
    if name not in PRESETS:
        raise KeyError(f"unknown backbone preset {name!r}; choose from {sorted(PRESETS)}")
    config = PRESETS[name].model_copy(deep=True)
    if max_repeats is not None:
        config.stages = [s.model_copy(update={"repeats": min(s.repeats, max_repeats)}) for s in config.stages]
    return config


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    in_channels: int
    out_channels: int
    stride: int
    expansion: float
    se_ratio: float

    @property
    def hidden_channels(self) -> int:
        return max(1, int(round(self.expansion * self.in_channels)))

    @property
    def se_channels(self) -> int:
        return max(1, int(round(self.se_ratio * self.hidden_channels)))

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


def iter_blocks(config: BackboneConfig) -> Iterator[BlockSpec]:
    channels = config.stem_channels
    for stage in config.stages:
        for repeat in range(stage.repeats):
            yield BlockSpec(
                kind=stage.block_kind,
                in_channels=channels,
                out_channels=stage.out_channels,
                stride=stage.stride if repeat == 0 else 1,
                expansion=stage.expansion,
                se_ratio=stage.se_ratio,
            )
            channels = stage.out_channels


def _affine_shapes(prefix: str, channels: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(f"{prefix}_scale", (channels,)), (f"{prefix}_bias", (channels,))]


def block_param_shapes(spec: BlockSpec) -> "OrderedDict[str, Tuple[int, ...]]":
    hidden = spec.hidden_channels
    shapes: List[Tuple[str, Tuple[int, ...]]] = []
    if spec.kind == "fused_mbconv":
        shapes.append(("expand_w", (hidden, spec.in_channels, 3, 3)))
    else:
        shapes.append(("expand_w", (hidden, spec.in_channels, 1, 1)))
    shapes += _affine_shapes("expand", hidden)
    if spec.kind == "mbconv":
        shapes.append(("dw_w", (hidden, 1, 3, 3)))
        shapes += _affine_shapes("dw", hidden)
    if spec.se_ratio > 0:
        reduced = spec.se_channels
        shapes += [
            ("se_reduce_w", (hidden, reduced)), ("se_reduce_b", (reduced,)),
            ("se_expand_w", (reduced, hidden)), ("se_expand_b", (hidden,)),
        ]
    shapes.append(("project_w", (spec.out_channels, hidden, 1, 1)))
    shapes += _affine_shapes("project", spec.out_channels)
    return OrderedDict(shapes)


def param_shapes(config: BackboneConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Every backbone tensor name and shape in a fixed order"""
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["backbone.0.stem_w"] = (config.stem_channels, 3, 3, 3)
    shapes["backbone.0.stem_scale"] = (config.stem_channels,)
    shapes["backbone.0.stem_bias"] = (config.stem_channels,)
    index = 0
    channels = config.stem_channels
    for index, spec in enumerate(iter_blocks(config), start=1):
        for name, shape in block_param_shapes(spec).items():
            shapes[f"backbone.{index}.{name}"] = shape
        channels = spec.out_channels
    head = index + 1
    shapes[f"backbone.{head}.head_w"] = (config.head_channels, channels, 1, 1)
    shapes[f"backbone.{head}.head_scale"] = (config.head_channels,)
    shapes[f"backbone.{head}.head_bias"] = (config.head_channels,)
    return shapes


def count_parameters(config: BackboneConfig) -> int:
    return sum(math.prod(shape) for shape in param_shapes(config).values())


def he_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_tensor(rng: np.random.Generator, name: str, shape: Tuple[int, ...]) -> np.ndarray:
    """Scales start at one, biases at zero, weights He-uniform"""
    short = name.rsplit(".", 1)[-1]
    if short.endswith("_scale"):
        return np.ones(shape, dtype=np.float32)
    if short.endswith("_bias") or short.endswith("_b"):
        return np.zeros(shape, dtype=np.float32)
    fan_in = math.prod(shape[1:]) if len(shape) == 4 else shape[0]
    return he_uniform(rng, shape, fan_in)


def init_backbone_params(config: BackboneConfig, rng: np.random.Generator) -> Params:
    params: Params = OrderedDict()
    for name, shape in param_shapes(config).items():
        params[name] = parameter(init_tensor(rng, name, shape), name=name)
    return params


def load_backbone_weights(params: Params, tensors: Mapping[str, np.ndarray]) -> int:
    """
    Copy externally converted backbone tensors into `params`.

    Only names under `backbone.` are considered; shapes must match exactly.
    Returns the number of tensors replaced.
    """
    loaded = 0
    for name, value in tensors.items():
        if not name.startswith("backbone.") or name not in params:
            continue
        if tuple(value.shape) != params[name].shape:
            raise DimensionError(f"{name}: checkpoint shape {tuple(value.shape)} != model shape {params[name].shape}")
        params[name] = parameter(np.array(value, dtype=np.float32), name=name)
        loaded += 1
    logger.info(f"Loaded {loaded} backbone tensors from external weights")
    return loaded


def block_params(params: Params, prefix: str) -> Params:
    """Tensors of one block keyed by their short name"""
    cut = len(prefix) + 1
    return {name[cut:]: value for name, value in params.items() if name.startswith(prefix + ".")}


def _affine(x: DiffArray, scale: DiffArray, bias: DiffArray) -> DiffArray:
    channels = scale.shape[0]
    return add(mul(x, reshape(scale, (1, channels, 1, 1))), reshape(bias, (1, channels, 1, 1)))


def _check_params(params: Params, spec: BlockSpec) -> None:
    for name, shape in block_param_shapes(spec).items():
        if name not in params:
            raise DimensionError(f"missing block parameter {name!r}")
        if params[name].shape != shape:
            raise DimensionError(f"{name}: expected shape {shape}, got {params[name].shape}")


def se_block(x: DiffArray, params: Params, ratio: float) -> DiffArray:
    """Scale each channel by a gate in (0, 1) computed from its global average"""
    channels = x.shape[1]
    reduced = max(1, int(round(ratio * channels)))
    if params["se_reduce_w"].shape != (channels, reduced):
        raise DimensionError(f"se_reduce_w must be {(channels, reduced)}, got {params['se_reduce_w'].shape}")
    pooled = reduce_mean(x, axes=(2, 3))
    squeezed = silu(linear(pooled, params["se_reduce_w"], params["se_reduce_b"]))
    gate = sigmoid(linear(squeezed, params["se_expand_w"], params["se_expand_b"]))
    return mul(x, reshape(gate, (x.shape[0], channels, 1, 1)))


def _check_input(x: DiffArray, spec: BlockSpec) -> None:
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise DimensionError(f"block expects [B, {spec.in_channels}, H, W], got {x.shape}")


def fused_mbconv(x: DiffArray, params: Params, spec: BlockSpec) -> DiffArray:
    """3x3 expand conv (carrying the stride) -> SiLU -> SE -> 1x1 project (+ residual)"""
    _check_input(x, spec)
    _check_params(params, spec)
    h = conv2d(x, params["expand_w"], stride=spec.stride, padding=1)
    h = silu(_affine(h, params["expand_scale"], params["expand_bias"]))
    if spec.se_ratio > 0:
        h = se_block(h, params, spec.se_ratio)
    h = _affine(conv2d(h, params["project_w"]), params["project_scale"], params["project_bias"])
    return add(h, x) if spec.residual else h


def mbconv(x: DiffArray, params: Params, spec: BlockSpec) -> DiffArray:
    """1x1 expand -> depthwise 3x3 (carrying the stride) -> SE -> 1x1 project (+ residual)"""
    _check_input(x, spec)
    _check_params(params, spec)
    hidden = spec.hidden_channels
    h = silu(_affine(conv2d(x, params["expand_w"]), params["expand_scale"], params["expand_bias"]))
    h = conv2d(h, params["dw_w"], stride=spec.stride, padding=1, groups=hidden)
    h = silu(_affine(h, params["dw_scale"], params["dw_bias"]))
    if spec.se_ratio > 0:
        h = se_block(h, params, spec.se_ratio)
    h = _affine(conv2d(h, params["project_w"]), params["project_scale"], params["project_bias"])
    return add(h, x) if spec.residual else h


def backbone_forward(images: DiffArray, config: BackboneConfig, params: Params) -> DiffArray:
    """Final-stage feature map [B, head_channels, H/s, W/s]"""
    if images.ndim != 4 or images.shape[1] != 3:
        raise DimensionError(f"backbone expects [B, 3, H, W], got {images.shape}")
    stride = config.total_stride
    height, width = images.shape[2:]
    if height % stride or width % stride:
        raise DimensionError(f"input {height}x{width} not divisible by total stride {stride}")

    x = conv2d(images, params["backbone.0.stem_w"], stride=config.stem_stride, padding=1)
    x = silu(_affine(x, params["backbone.0.stem_scale"], params["backbone.0.stem_bias"]))
    index = 0
    for index, spec in enumerate(iter_blocks(config), start=1):
        block = block_params(params, f"backbone.{index}")
        x = fused_mbconv(x, block, spec) if spec.kind == "fused_mbconv" else mbconv(x, block, spec)
    head = f"backbone.{index + 1}"
    x = conv2d(x, params[f"{head}.head_w"])
    return silu(_affine(x, params[f"{head}.head_scale"], params[f"{head}.head_bias"]))
