"""3D U-net mapping (B0 initial, anatomy initial, anatomy new) to B0 new."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import (ShapeError, Tensor, add, concat, conv3d, conv_transpose3d, leaky_relu, max_pool3d,
                       slice_channels, upsample_trilinear)

DECODER_ORDER = "concat-tconv-tconv-upsample"


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 4
    kernel: int = 5
    stride: int = 1
    base_channels: int = 8
    in_channels: int = 3
    out_channels: int = 1
    leaky_slope: float = 0.01
    # add input channel 0 (the initial B0) to the head output
    residual_b0: bool = False

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("a U-net needs at least 2 levels")
        if self.kernel % 2 != 1 or self.kernel < 1:
            raise ValueError("kernel size must be odd")
        if self.stride != 1:
            raise ValueError("only stride-1 convolutions are supported")
        if min(self.base_channels, self.in_channels, self.out_channels) < 1:
            raise ValueError("channel counts must be positive")

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def channels(self) -> list[int]:
        return [self.base_channels * 2 ** level for level in range(self.levels)]

    def layer_shapes(self) -> list[tuple[str, str, tuple[int, ...]]]:
        """(name, kind, weight shape) for every layer in builder order."""
        k = self.kernel
        ch = self.channels()
        out = []
        prev = self.in_channels
        for level in range(self.levels - 1):
            out.append((f"enc{level}.conv1", "conv", (ch[level], prev, k, k, k)))
            out.append((f"enc{level}.conv2", "conv", (ch[level], ch[level], k, k, k)))
            prev = ch[level]
        bottom = ch[-1]
        out.append(("bottom.conv1", "conv", (bottom, prev, k, k, k)))
        out.append(("bottom.conv2", "conv", (bottom, bottom, k, k, k)))
        out.append(("bottom.tconv", "tconv", (bottom, bottom, k, k, k)))
        prev = bottom
        for level in reversed(range(self.levels - 1)):
            out.append((f"dec{level}.tconv1", "tconv", (ch[level] + prev, ch[level], k, k, k)))
            out.append((f"dec{level}.tconv2", "tconv", (ch[level], ch[level], k, k, k)))
            prev = ch[level]
        out.append(("head", "conv", (self.out_channels, prev, 1, 1, 1)))
        return out


@dataclass
class UNetParams:
    """Layer weights and biases (ordered as built) plus optimizer state."""

    config: UNetConfig
    weights: dict[str, Tensor]
    seed: int = 0
    optimizer_state: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def tensors(self) -> list[Tensor]:
        return list(self.weights.values())

    def copy(self) -> "UNetParams":
        weights = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.weights.items()}
        state = {k: (np.copy(v) if isinstance(v, np.ndarray) else
                     {kk: vv.copy() for kk, vv in v.items()} if isinstance(v, dict) else v)
                 for k, v in self.optimizer_state.items()}
        return UNetParams(self.config, weights, self.seed, state, dict(self.metadata))

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.weights.values()))

    def allfinite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.weights.values())


def build_unet(config: UNetConfig = UNetConfig(), seed: int = 0, dtype=np.float32) -> UNetParams:
    """Seeded init, uniform in +-1/sqrt(fan_in) for weights and biases.

    With ``residual_b0`` the 1x1 head starts at zero so the untrained network
    returns its B0 input unchanged.
    """
    rng = np.random.default_rng(seed)
    weights: dict[str, Tensor] = {}
    for name, kind, shape in config.layer_shapes():
        fan_in = (shape[1] if kind == "conv" else shape[0]) * int(np.prod(shape[2:]))
        bound = 1.0 / np.sqrt(fan_in)
        n_out = shape[0] if kind == "conv" else shape[1]
        w = rng.uniform(-bound, bound, shape)
        b = rng.uniform(-bound, bound, n_out)
        if name == "head" and config.residual_b0:
            # start as the identity map b0_new = b0_init
            w, b = np.zeros_like(w), np.zeros_like(b)
        weights[f"{name}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
        weights[f"{name}.bias"] = Tensor(b.astype(dtype), requires_grad=True)
    meta = {"channels": config.channels(), "decoder_order": DECODER_ORDER, "init": "uniform_fan_in",
            "residual_b0": config.residual_b0}
    return UNetParams(config, weights, seed, {}, meta)


def forward(params: UNetParams, x) -> Tensor:
    """Run the network on a (batch, in_channels, nx, ny, nz) array or tensor."""
    cfg = params.config
    w = params.weights
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=w["head.weight"].dtype))
    if x.data.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ShapeError("input", f"expected (batch, {cfg.in_channels}, nx, ny, nz), got {x.shape}")
    if any(n % cfg.divisor for n in x.shape[2:]):
        raise ShapeError("input", f"spatial dims {x.shape[2:]} must be divisible by {cfg.divisor}")
    slope = cfg.leaky_slope

    def conv(name, t):
        return leaky_relu(conv3d(t, w[f"{name}.weight"], w[f"{name}.bias"], layer=name), slope)

    def tconv(name, t):
        return leaky_relu(conv_transpose3d(t, w[f"{name}.weight"], w[f"{name}.bias"], layer=name), slope)

    skips = []
    h = x
    for level in range(cfg.levels - 1):
        h = conv(f"enc{level}.conv2", conv(f"enc{level}.conv1", h))
        skips.append(h)
        h = max_pool3d(h, layer=f"enc{level}.pool")
    h = conv("bottom.conv2", conv("bottom.conv1", h))
    h = tconv("bottom.tconv", h)
    for level in reversed(range(cfg.levels - 1)):
        h = upsample_trilinear(h, layer=f"dec{level}.upsample")
        h = concat([skips[level], h], layer=f"dec{level}.concat")
        h = tconv(f"dec{level}.tconv2", tconv(f"dec{level}.tconv1", h))
    out = conv3d(h, w["head.weight"], w["head.bias"], layer="head")
    if cfg.residual_b0:
        out = add(out, slice_channels(x, 0, cfg.out_channels))
    return out


def config_dict(config: UNetConfig) -> dict:
    return asdict(config)
