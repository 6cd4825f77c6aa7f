"""Finite-difference verification of every differentiable piece of the model.

Each probe builds a small random problem at float64 and reports the worst
relative gap between backprop and central differences over many seeds. The
per-op probes name the catalog entry at fault when a backward rule is wrong;
the component probes cover the loss, both heads and the conv encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import GapDecoderParams, MlDecoderParams, gap_decode, ml_decode
from .encoder import FeatureMap, TinyEncoderConfig, encode
from .loss import AsymmetricLossConfig, batch_loss
from .tensor import Tensor, finite_difference_check, forward

TOLERANCE = 1e-4


@dataclass
class ProbeResult:
    name: str
    max_error: float
    seeds: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _away_from_zero(rng, shape, lo=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.5, size=shape)


def _op_probe(op_kind, make_inputs, **attrs):
    def build(rng):
        xs = make_inputs(rng)
        out_shape = forward(op_kind, [Tensor(x) for x in xs], **attrs).shape
        weights = Tensor(rng.standard_normal(out_shape))

        def f(*ts):
            return (forward(op_kind, list(ts), **attrs) * weights).sum()

        return f, [Tensor(x) for x in xs]

    return build


def _pool_input(rng):
    # distinct values spaced well beyond epsilon so the argmax never flips
    return [rng.permutation(32).reshape(1, 4, 4, 2) * 0.05 + rng.uniform(-0.01, 0.01)]


def op_probes() -> dict:
    n = lambda *s: (lambda rng: [rng.standard_normal(s)])  # noqa: E731
    return {
        "add": _op_probe("add", lambda r: [r.standard_normal((3, 4)), r.standard_normal((4,))]),
        "sub": _op_probe("sub", lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((1, 3, 1))]),
        "mul": _op_probe("mul", lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 1))]),
        "scalar_mul": _op_probe("scalar_mul", n(3, 4), scale=-2.5),
        "matmul": _op_probe("matmul", lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((4, 5))]),
        "conv2d": _op_probe("conv2d", lambda r: [r.standard_normal((2, 5, 6, 2)), r.standard_normal((3, 3, 2, 3))], stride=2, padding=1),
        "relu": _op_probe("relu", lambda r: [_away_from_zero(r, (3, 5))]),
        "sigmoid": _op_probe("sigmoid", n(3, 5)),
        "log_sigmoid": _op_probe("log_sigmoid", lambda r: [3 * r.standard_normal((3, 5))]),
        "softmax_lastdim": _op_probe("softmax_lastdim", n(3, 5)),
        "log": _op_probe("log", lambda r: [r.uniform(0.5, 2.0, (3, 4))]),
        "exp": _op_probe("exp", n(3, 4)),
        "power": _op_probe("power", lambda r: [r.uniform(0.5, 2.0, (3, 4))], exponent=2.5),
        "mean_axes": _op_probe("mean_axes", n(2, 3, 4), axes=(0, 2)),
        "sum_axes": _op_probe("sum_axes", n(2, 3, 4), axes=(1,), keepdims=True),
        "reshape": _op_probe("reshape", n(2, 6), shape=(3, 4)),
        "transpose": _op_probe("transpose", n(2, 3, 4), axes=(2, 0, 1)),
        "layer_norm_lastdim": _op_probe("layer_norm_lastdim", n(3, 6)),
        "pad2d": _op_probe("pad2d", n(1, 3, 4, 2), pads=(1, 0, 2, 1)),
        "max_pool2d": _op_probe("max_pool2d", _pool_input, size=2),
    }


def component_probes(
    num_labels: int = 8,
    groups: int | None = None,
    stages=((8, 2), (16, 2), (32, 2)),
    kernel_size: int = 3,
    loss_cfg: AsymmetricLossConfig = AsymmetricLossConfig(),
    max_channels: int = 4,
    width: int = 8,
) -> dict:
    """Probes shaped after a training config, shrunk so each runs in well under a second."""

    def loss_probe(rng):
        z = rng.uniform(-2.0, 2.0, (3, num_labels))
        y = (rng.random((3, num_labels)) < 0.4).astype(np.float64)
        return (lambda logits: batch_loss(logits, y, loss_cfg)), [Tensor(z)]

    def gap_probe(rng):
        depth = 6
        F = rng.standard_normal((2, 3, 3, depth))
        head = GapDecoderParams.init(depth, num_labels, rng, dtype=np.float64)
        weights = Tensor(rng.standard_normal((2, num_labels)))

        def f(F_, W, b):
            return (gap_decode(FeatureMap(F_), GapDecoderParams(W, b)) * weights).sum()

        return f, [Tensor(F), head.W, head.b]

    def ml_probe(rng):
        depth = 6
        F = rng.standard_normal((2, 2, 3, depth))
        head = MlDecoderParams.init(depth, num_labels, rng, num_groups=groups, width=width, ffn_dim=2 * width, dtype=np.float64)
        # perturb norm affine params away from the identity so their grads are generic
        for layer in head.layers:
            for name in ("norm1_scale", "norm1_shift", "norm2_scale", "norm2_shift", "ffn_b1", "ffn_b2"):
                t = getattr(layer, name)
                t.data = t.data + 0.3 * rng.standard_normal(t.shape)
        head.readout_b.data = 0.3 * rng.standard_normal(head.readout_b.shape)
        names = list(head.named())
        weights = Tensor(rng.standard_normal((2, num_labels)))

        def f(F_, *tensors):
            p = MlDecoderParams.from_named(dict(zip(names, tensors)), num_labels, head.num_heads)
            return (ml_decode(FeatureMap(F_), p) * weights).sum()

        return f, [Tensor(F)] + [head.named()[k] for k in names]

    def encoder_probe(rng):
        small = [(min(c, max_channels), s) for c, s in stages]
        total = int(np.prod([s for _, s in small]))
        side = 2 * total if total > 1 else 4
        cfg = TinyEncoderConfig(stages=small, kernel_size=kernel_size, input_size=(side, side, 3))
        x = Tensor(rng.uniform(0, 1, (1, side, side, 3)))
        tensors = []
        names = []
        cin = 3
        for i, (cout, _) in enumerate(small):
            w = rng.standard_normal((kernel_size, kernel_size, cin, cout)) * np.sqrt(2.0 / (kernel_size**2 * cin))
            tensors += [Tensor(w), Tensor(0.1 * rng.standard_normal(cout))]
            names += [f"encoder.stage{i}.weight", f"encoder.stage{i}.bias"]
            cin = cout
        out_shape = encode(x, cfg, dict(zip(names, tensors))).values.shape
        weights = Tensor(rng.standard_normal(out_shape))

        def f(*ts):
            return (encode(x, cfg, dict(zip(names, ts))).values * weights).sum()

        return f, tensors

    def constant_probe(rng):
        c = Tensor(np.array(rng.standard_normal()))
        return (lambda x: (x * 0.0).sum() + c), [Tensor(rng.standard_normal(4))]

    return {
        "loss": loss_probe,
        "gap_decoder": gap_probe,
        "ml_decoder": ml_probe,
        "tiny_encoder": encoder_probe,
        "constant": constant_probe,
    }


def run_probe(name: str, build, seeds: int = 20, epsilon: float = 1e-5, tolerance: float = TOLERANCE) -> ProbeResult:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        f, point = build(rng)
        worst = max(worst, finite_difference_check(f, point, epsilon))
    return ProbeResult(name, worst, seeds, tolerance)


def run_gradcheck(seeds: int = 20, tolerance: float = TOLERANCE, **component_kwargs) -> list[ProbeResult]:
    probes = {**op_probes(), **component_probes(**component_kwargs)}
    return [run_probe(name, build, seeds=seeds, tolerance=tolerance) for name, build in probes.items()]

