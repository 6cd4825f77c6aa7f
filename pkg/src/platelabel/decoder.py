"""Decoding heads mapping a feature map to K label logits.

Two heads are available: spatial average pooling followed by a linear
read-out, and a query-based head where G learnable query tokens cross-attend
to the spatial features and each query's response is read out into a
contiguous block of ``s = ceil(K / G)`` labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil, sqrt

import numpy as np

from .encoder import FeatureMap
from .errors import GroupOverflow, ShapeMismatch
from .tensor import Tensor, forward


def default_groups(num_labels: int) -> int:
    return max(1, ceil(num_labels / 4))


@dataclass
class GapDecoderParams:
    W: Tensor  # (K, D)
    b: Tensor  # (K,)

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeMismatch(f"GAP head needs W (K, D) and b (K,), got {self.W.shape} and {self.b.shape}")

    @property
    def num_labels(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, depth: int, num_labels: int, rng: np.random.Generator, dtype=np.float32):
        w = rng.standard_normal((num_labels, depth)) / sqrt(depth)
        return cls(
            Tensor(w.astype(dtype), requires_grad=True),
            Tensor(np.zeros(num_labels, dtype=dtype), requires_grad=True),
        )

    def named(self) -> dict[str, Tensor]:
        return {"decoder.W": self.W, "decoder.b": self.b}

    @classmethod
    def from_named(cls, named: dict[str, Tensor]):
        return cls(named["decoder.W"], named["decoder.b"])


def gap_decode(F: FeatureMap, params: GapDecoderParams) -> Tensor:
    if F.depth != params.W.shape[1]:
        raise ShapeMismatch(f"feature depth {F.depth} does not match GAP weight {params.W.shape}")
    z = F.values.mean(axes=(1, 2))
    return z @ params.W.transpose() + params.b


def gap_macs(height: int, width: int, depth: int, num_labels: int) -> int:
    """Multiply-adds of the GAP head: spatial mean plus the projection."""
    return height * width * depth + depth * num_labels


def cross_attention(queries: Tensor, keys: Tensor, values: Tensor, num_heads: int = 1, return_weights: bool = False):
    """Scaled dot-product attention of query tokens over a set of key/value rows.

    Shapes are ``(..., G, d)``, ``(..., N, d)``, ``(..., N, d)`` with leading
    batch dims broadcast. With several heads, ``d`` is split evenly and each
    head scales by ``1/sqrt(d / num_heads)``.
    """
    d = queries.shape[-1]
    if keys.shape[-1] != d or values.shape[-1] != d:
        raise ShapeMismatch(f"attention inner dims differ: q {queries.shape}, k {keys.shape}, v {values.shape}")
    if keys.shape[-2] != values.shape[-2]:
        raise ShapeMismatch(f"keys and values disagree on N: {keys.shape} vs {values.shape}")
    if num_heads < 1 or d % num_heads:
        raise ShapeMismatch(f"{num_heads} heads do not divide width {d}")
    if num_heads == 1:
        scores = queries @ keys.transpose(*range(keys.ndim - 2), keys.ndim - 1, keys.ndim - 2)
        attn = (scores * (1.0 / sqrt(d))).softmax()
        out = attn @ values
        return (out, attn) if return_weights else out

    dh = d // num_heads

    def split(t):
        lead = t.shape[:-2]
        n = len(lead)
        t = t.reshape(*lead, t.shape[-2], num_heads, dh)
        return t.transpose(*range(n), n + 1, n, n + 2)  # (..., heads, rows, dh)

    q, k, v = split(queries), split(keys), split(values)
    r = k.ndim
    scores = q @ k.transpose(*range(r - 2), r - 1, r - 2)
    attn = (scores * (1.0 / sqrt(dh))).softmax()
    out = attn @ v  # (..., heads, G, dh)
    n = out.ndim - 3
    out = out.transpose(*range(n), n + 1, n, n + 2)
    out = out.reshape(*out.shape[:-2], d)
    return (out, attn) if return_weights else out


@dataclass
class MlDecoderLayer:
    key_proj: Tensor  # (D, d)
    value_proj: Tensor  # (D, d)
    ffn_w1: Tensor  # (d, d_ff)
    ffn_b1: Tensor
    ffn_w2: Tensor  # (d_ff, d)
    ffn_b2: Tensor
    norm1_scale: Tensor
    norm1_shift: Tensor
    norm2_scale: Tensor
    norm2_shift: Tensor

    FIELDS = (
        "key_proj", "value_proj", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
        "norm1_scale", "norm1_shift", "norm2_scale", "norm2_shift",
    )


@dataclass
class MlDecoderParams:
    queries: Tensor  # (G, d)
    layers: list[MlDecoderLayer]
    readout_w: Tensor  # (G, d, s), or (1, d, s) when shared across groups
    readout_b: Tensor  # (G, s)
    num_labels: int
    num_heads: int = 1
    norm_eps: float = field(default=1e-5, repr=False)

    def __post_init__(self):
        g, d = self.queries.shape
        if not self.layers:
            raise ShapeMismatch("query decoder needs at least one layer")
        if g > self.num_labels:
            raise GroupOverflow(f"{g} query groups exceed {self.num_labels} labels")
        s = ceil(self.num_labels / g)
        if self.readout_w.shape not in ((g, d, s), (1, d, s)):
            raise ShapeMismatch(f"group readout weight {self.readout_w.shape} does not fit G={g}, d={d}, s={s}")
        if self.readout_b.shape != (g, s):
            raise ShapeMismatch(f"group readout bias {self.readout_b.shape} != {(g, s)}")
        for i, layer in enumerate(self.layers):
            depth = layer.key_proj.shape[0]
            expected = {
                "key_proj": (depth, d), "value_proj": (depth, d),
                "ffn_w1": (d, layer.ffn_w1.shape[1]), "ffn_b1": (layer.ffn_w1.shape[1],),
                "ffn_w2": (layer.ffn_w1.shape[1], d), "ffn_b2": (d,),
                "norm1_scale": (d,), "norm1_shift": (d,), "norm2_scale": (d,), "norm2_shift": (d,),
            }
            for name, shape in expected.items():
                if getattr(layer, name).shape != shape:
                    raise ShapeMismatch(f"layer {i} {name} has shape {getattr(layer, name).shape}, expected {shape}")

    @property
    def num_groups(self) -> int:
        return self.queries.shape[0]

    @property
    def group_size(self) -> int:
        return ceil(self.num_labels / self.num_groups)

    @property
    def width(self) -> int:
        return self.queries.shape[1]

    @classmethod
    def init(
        cls,
        depth: int,
        num_labels: int,
        rng: np.random.Generator,
        num_groups: int | None = None,
        width: int = 32,
        ffn_dim: int | None = None,
        num_heads: int = 1,
        num_layers: int = 1,
        shared_readout: bool = False,
        dtype=np.float32,
    ) -> "MlDecoderParams":
        g = default_groups(num_labels) if num_groups is None else int(num_groups)
        if g < 1:
            raise ShapeMismatch("need at least one query group")
        if g > num_labels:
            raise GroupOverflow(f"{g} query groups exceed {num_labels} labels")
        d = width
        d_ff = ffn_dim or 4 * d
        s = ceil(num_labels / g)

        def p(arr):
            return Tensor(np.asarray(arr).astype(dtype), requires_grad=True)

        layers = []
        for _ in range(num_layers):
            layers.append(MlDecoderLayer(
                key_proj=p(rng.standard_normal((depth, d)) / sqrt(depth)),
                value_proj=p(rng.standard_normal((depth, d)) / sqrt(depth)),
                ffn_w1=p(rng.standard_normal((d, d_ff)) * sqrt(2.0 / d)),
                ffn_b1=p(np.zeros(d_ff)),
                ffn_w2=p(rng.standard_normal((d_ff, d)) / sqrt(d_ff)),
                ffn_b2=p(np.zeros(d)),
                norm1_scale=p(np.ones(d)),
                norm1_shift=p(np.zeros(d)),
                norm2_scale=p(np.ones(d)),
                norm2_shift=p(np.zeros(d)),
            ))
        return cls(
            queries=p(rng.standard_normal((g, d)) / sqrt(d)),
            layers=layers,
            readout_w=p(rng.standard_normal((1 if shared_readout else g, d, s)) / sqrt(d)),
            readout_b=p(np.zeros((g, s))),
            num_labels=num_labels,
            num_heads=num_heads,
        )

    def named(self) -> dict[str, Tensor]:
        out = {"decoder.queries": self.queries}
        for i, layer in enumerate(self.layers):
            for name in MlDecoderLayer.FIELDS:
                out[f"decoder.layer{i}.{name}"] = getattr(layer, name)
        out["decoder.readout_w"] = self.readout_w
        out["decoder.readout_b"] = self.readout_b
        return out

    @classmethod
    def from_named(cls, named: dict[str, Tensor], num_labels: int, num_heads: int = 1):
        n_layers = len({k.split(".")[1] for k in named if k.startswith("decoder.layer")})
        layers = [
            MlDecoderLayer(**{name: named[f"decoder.layer{i}.{name}"] for name in MlDecoderLayer.FIELDS})
            for i in range(n_layers)
        ]
        return cls(
            queries=named["decoder.queries"],
            layers=layers,
            readout_w=named["decoder.readout_w"],
            readout_b=named["decoder.readout_b"],
            num_labels=num_labels,
            num_heads=num_heads,
        )


def _norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float) -> Tensor:
    return forward("layer_norm_lastdim", [x], eps=eps) * scale + shift


def ml_decode(F: FeatureMap, params: MlDecoderParams) -> Tensor:
    """Query-token decoding without self-attention, followed by group read-out."""
    b, h, w, depth = F.values.shape
    if params.layers[0].key_proj.shape[0] != depth:
        raise ShapeMismatch(f"feature depth {depth} does not match key projection {params.layers[0].key_proj.shape}")
    flat = F.values.reshape(b, h * w, depth)
    tokens = params.queries
    for layer in params.layers:
        keys = flat @ layer.key_proj
        values = flat @ layer.value_proj
        r = cross_attention(tokens, keys, values, num_heads=params.num_heads)
        r = _norm(r, layer.norm1_scale, layer.norm1_shift, params.norm_eps)
        hidden = (r @ layer.ffn_w1 + layer.ffn_b1).relu() @ layer.ffn_w2 + layer.ffn_b2
        tokens = _norm(r + hidden, layer.norm2_scale, layer.norm2_shift, params.norm_eps)
    g, s = params.num_groups, params.group_size
    per_group = tokens.transpose(1, 0, 2) @ params.readout_w  # (G, B, s)
    per_group = per_group + params.readout_b.reshape(g, 1, s)
    logits = per_group.transpose(1, 0, 2).reshape(b, g * s)
    if g * s != params.num_labels:
        keep = np.eye(g * s, params.num_labels, dtype=logits.dtype)
        logits = logits @ Tensor(keep)
    return logits


def ml_decoder_macs(height: int, width: int, depth: int, params: MlDecoderParams) -> int:
    n = height * width
    g, d = params.queries.shape
    total = 0
    for layer in params.layers:
        d_ff = layer.ffn_w1.shape[1]
        total += 2 * n * depth * d  # key and value projections
        total += 2 * g * n * d  # scores and weighted sum of values
        total += 2 * g * d * d_ff  # feed-forward
    total += g * d * params.group_size
    return total


def param_count(named: dict[str, Tensor]) -> int:
    return int(sum(t.size for t in named.values()))
