"""Image encoders producing spatial feature maps of shape (batch, H, W, D)."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from math import prod
from pathlib import Path

import numpy as np

from .errors import BadMagic, DimOverflow, IndivisibleSpatialDims, ShapeMismatch, TruncatedFile
from .tensor import Tensor, forward

FMAP_MAGIC = b"FMAP"
MAX_DIM = 2**16


@dataclass
class FeatureMap:
    """A batch of latent feature maps; ``values`` has shape (batch, H, W, D)."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 4 or min(self.values.shape[1:]) < 1:
            raise ShapeMismatch(f"feature map must be (batch, H, W, D) with H, W, D >= 1, got {self.values.shape}")

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def depth(self) -> int:
        return self.values.shape[3]


@dataclass
class TinyEncoderConfig:
    stages: list[tuple[int, int]] = field(default_factory=lambda: [(8, 2), (16, 2), (32, 2)])
    kernel_size: int = 3
    input_size: tuple[int, int, int] = (64, 64, 3)

    def __post_init__(self):
        self.stages = [(int(c), int(s)) for c, s in self.stages]
        self.input_size = tuple(int(v) for v in self.input_size)
        if not self.stages:
            raise ShapeMismatch("encoder needs at least one stage")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ShapeMismatch(f"kernel_size must be odd, got {self.kernel_size}")
        for channels, stride in self.stages:
            if stride not in (1, 2):
                raise ShapeMismatch(f"stage stride must be 1 or 2, got {stride}")
            if channels < 1:
                raise ShapeMismatch(f"stage channels must be positive, got {channels}")
        h, w, _ = self.input_size
        total = self.total_stride
        if h % total or w % total:
            raise IndivisibleSpatialDims(f"strides (product {total}) do not divide input {h}x{w}")

    @property
    def total_stride(self) -> int:
        return prod(s for _, s in self.stages)

    @property
    def output_shape(self) -> tuple[int, int, int]:
        h, w, _ = self.input_size
        return h // self.total_stride, w // self.total_stride, self.stages[-1][0]

    def param_shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        k = self.kernel_size
        cin = self.input_size[2]
        shapes = []
        for cout, _ in self.stages:
            shapes.append(((k, k, cin, cout), (cout,)))
            cin = cout
        return shapes


def init_encoder_params(config: TinyEncoderConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """He-scaled normal conv weights, zero biases."""
    params = {}
    for i, (wshape, bshape) in enumerate(config.param_shapes()):
        fan_in = wshape[0] * wshape[1] * wshape[2]
        w = rng.standard_normal(wshape) * np.sqrt(2.0 / fan_in)
        params[f"encoder.stage{i}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
        params[f"encoder.stage{i}.bias"] = Tensor(np.zeros(bshape, dtype=dtype), requires_grad=True)
    return params


def _check_params(config: TinyEncoderConfig, params: dict[str, Tensor]) -> None:
    for i, (wshape, bshape) in enumerate(config.param_shapes()):
        for key, shape in ((f"encoder.stage{i}.weight", wshape), (f"encoder.stage{i}.bias", bshape)):
            if key not in params:
                raise ShapeMismatch(f"missing encoder parameter {key}")
            if params[key].shape != shape:
                raise ShapeMismatch(f"{key} has shape {params[key].shape}, config expects {shape}")


def encode(images: Tensor, config: TinyEncoderConfig, params: dict[str, Tensor]) -> FeatureMap:
    """Run each stage as conv2d (same padding) -> bias add -> relu."""
    _check_params(config, params)
    channels = config.input_size[2]
    if images.ndim != 4 or images.shape[3] != channels:
        raise ShapeMismatch(f"images must be (batch, H, W, {channels}), got {images.shape}")
    if images.shape[1] % config.total_stride or images.shape[2] % config.total_stride:
        raise IndivisibleSpatialDims(
            f"strides (product {config.total_stride}) do not divide input {images.shape[1]}x{images.shape[2]}"
        )
    pad = config.kernel_size // 2
    x = images
    for i, (_, stride) in enumerate(config.stages):
        x = forward("conv2d", [x, params[f"encoder.stage{i}.weight"]], stride=stride, padding=pad)
        x = (x + params[f"encoder.stage{i}.bias"]).relu()
    return FeatureMap(x)


def encoder_macs(config: TinyEncoderConfig) -> int:
    """Multiply-adds of one image through the conv stages."""
    h, w, cin = config.input_size
    k = config.kernel_size
    total = 0
    for cout, stride in config.stages:
        h, w = h // stride, w // stride
        total += h * w * k * k * cin * cout
        cin = cout
    return total


# ---------------------------------------------------------------------------
# FMAP files
# ---------------------------------------------------------------------------


def write_external_features(path, values) -> None:
    """Write a (batch, H, W, D) array as an FMAP file (little-endian float32)."""
    arr = np.asarray(values.values.data if isinstance(values, FeatureMap) else values)
    if arr.ndim != 4:
        raise ShapeMismatch(f"FMAP payload must be 4-d, got shape {arr.shape}")
    if arr.shape[0] < 1 or min(arr.shape) < 1 or max(arr.shape) > MAX_DIM:
        raise DimOverflow(f"FMAP dims must be in [1, {MAX_DIM}], got {arr.shape}")
    with open(path, "wb") as fp:
        fp.write(FMAP_MAGIC)
        fp.write(struct.pack("<4I", *arr.shape))
        fp.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_external_features(path) -> FeatureMap:
    """Read an FMAP file into a gradient-free feature map."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != FMAP_MAGIC:
        raise BadMagic(f"{path}: not an FMAP file (magic {data[:4]!r})")
    if len(data) < 20:
        raise TruncatedFile(f"{path}: header is truncated")
    dims = struct.unpack("<4I", data[4:20])
    if min(dims) == 0 or max(dims) > MAX_DIM:
        raise DimOverflow(f"{path}: dims {dims} outside [1, {MAX_DIM}]")
    count = prod(dims)
    payload = data[20:]
    if len(payload) < 4 * count:
        raise TruncatedFile(f"{path}: header promises {count} values, file holds {len(payload) // 4}")
    arr = np.frombuffer(payload, dtype="<f4", count=count).astype(np.float32).reshape(dims)
    return FeatureMap(Tensor(arr, requires_grad=False))
