"""Builders and forward passes for the three segmentation architectures.

All three share the same encoder/decoder skeleton: four encoder scales,
each entered through a stride-2 3x3 convolution (halving H and W), and
four decoder scales, each entered through a stride-2 transposed
convolution (doubling H and W), closed by a 1x1 output convolution. They
differ in the per-scale body and in the skip wiring:

* ``semseg``      - plain conv3x3+ReLU bodies, no skip connections.
* ``resunet``     - one residual unit per scale, U-Net skip concatenation.
* ``resunet_plus`` - three residual units per scale, wider filters, skips.

Skip concatenations attach where resolutions match: the decoder scale that
produces H/8 (H/4, H/2) features receives the encoder features of the same
resolution, concatenated before the first body unit of the scale. The
full-resolution decoder scale has no encoder counterpart (the first
encoder scale already halves), so it carries no skip. The deepest encoder
output feeds the decoder directly, with no extra bottleneck block.

Residual units are post-activation: conv3x3 -> ReLU -> conv3x3, plus an
identity shortcut (1x1 projection when the channel count changes),
followed by a final ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ConvSpec, Tensor, concat_channels, conv2d, relu, transposed_conv2d

ARCH_PRESETS = {
    "semseg": ((16, 64, 64, 128), (128, 64, 64, 16), 0),
    "resunet": ((16, 64, 64, 128), (128, 64, 64, 16), 1),
    "resunet_plus": ((32, 64, 128, 256), (256, 128, 64, 32), 3),
}

OUT_MODES = ("binary_sigmoid", "softmax")

SCALE_FACTOR = 16  # four halvings


@dataclass(frozen=True)
class ArchConfig:
    """Architecture selector plus the hyperparameters it pins."""

    arch: str
    encoder_filters: tuple
    decoder_filters: tuple
    residual_units_per_scale: int
    out_mode: str = "binary_sigmoid"

    def __post_init__(self):
        if self.arch not in ARCH_PRESETS:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {sorted(ARCH_PRESETS)}")
        enc, dec, units = ARCH_PRESETS[self.arch]
        if tuple(self.encoder_filters) != enc or tuple(self.decoder_filters) != dec:
            raise ValueError(f"filter counts {self.encoder_filters}/{self.decoder_filters} do not match {self.arch}")
        if self.residual_units_per_scale != units:
            raise ValueError(f"{self.arch} uses {units} residual units per scale, got {self.residual_units_per_scale}")
        if self.out_mode not in OUT_MODES:
            raise ValueError(f"unknown out_mode {self.out_mode!r}; expected one of {OUT_MODES}")

    @classmethod
    def preset(cls, arch: str, out_mode: str = "binary_sigmoid") -> "ArchConfig":
        if arch not in ARCH_PRESETS:
            raise ValueError(f"unknown architecture {arch!r}; expected one of {sorted(ARCH_PRESETS)}")
        enc, dec, units = ARCH_PRESETS[arch]
        return cls(arch, enc, dec, units, out_mode)

    @property
    def out_channels(self) -> int:
        return 1 if self.out_mode == "binary_sigmoid" else 2

    @property
    def has_skips(self) -> bool:
        return self.arch != "semseg"


class _Conv:
    """3x3 (or 1x1) convolution layer with He fan-in init and zero bias."""

    def __init__(self, params, name, in_ch, out_ch, rng, dtype, kernel=(3, 3), stride=1):
        self.spec = ConvSpec(in_ch, out_ch, kernel=kernel, stride=stride, padding="same")
        fan_in = in_ch * kernel[0] * kernel[1]
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch) + tuple(kernel))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        params[f"{name}.w"] = self.weight
        params[f"{name}.b"] = self.bias

    def __call__(self, x):
        return conv2d(x, self.spec, self.weight, self.bias)


class _TConv:
    """Stride-2 transposed convolution layer (spatial doubling)."""

    def __init__(self, params, name, in_ch, out_ch, rng, dtype, kernel=(3, 3)):
        self.spec = ConvSpec(in_ch, out_ch, kernel=kernel, stride=2, padding="same")
        fan_in = in_ch * kernel[0] * kernel[1]
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(in_ch, out_ch) + tuple(kernel))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        params[f"{name}.w"] = self.weight
        params[f"{name}.b"] = self.bias

    def __call__(self, x):
        return transposed_conv2d(x, self.spec, self.weight, self.bias)


class ResidualUnit:
    """conv3x3 -> ReLU -> conv3x3, shortcut add, final ReLU."""

    def __init__(self, params, name, in_ch, out_ch, rng, dtype):
        self.conv1 = _Conv(params, f"{name}.conv1", in_ch, out_ch, rng, dtype)
        self.conv2 = _Conv(params, f"{name}.conv2", out_ch, out_ch, rng, dtype)
        self.proj = None
        if in_ch != out_ch:
            self.proj = _Conv(params, f"{name}.proj", in_ch, out_ch, rng, dtype, kernel=(1, 1))

    def __call__(self, x):
        branch = self.conv2(relu(self.conv1(x)))
        shortcut = self.proj(x) if self.proj is not None else x
        return relu(branch + shortcut)


class _PlainBlock:
    """conv3x3 + ReLU body used by the semseg architecture."""

    def __init__(self, params, name, in_ch, out_ch, rng, dtype):
        self.conv = _Conv(params, f"{name}.conv", in_ch, out_ch, rng, dtype)

    def __call__(self, x):
        return relu(self.conv(x))


def _make_body(params, name, in_ch, out_ch, config, rng, dtype):
    if config.residual_units_per_scale == 0:
        return [_PlainBlock(params, f"{name}.block0", in_ch, out_ch, rng, dtype)]
    units = []
    ch = in_ch
    for j in range(config.residual_units_per_scale):
        units.append(ResidualUnit(params, f"{name}.unit{j}", ch, out_ch, rng, dtype))
        ch = out_ch
    return units


@dataclass
class Model:
    """A realized network: configuration, named parameters, layer tree."""

    config: ArchConfig
    seed: int
    dtype: np.dtype
    params: dict = field(default_factory=dict)
    _encoder: list = field(default_factory=list)
    _decoder: list = field(default_factory=list)
    _head: object = None

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def forward(self, batch, ablate_skips=()) -> Tensor:
        """Run the network on an (N, 1, H, W) batch, returning logits.

        ``ablate_skips`` (diagnostic only) lists decoder scale indices whose
        skip branch is replaced by zeros, for wiring-liveness checks.
        """
        batch = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        if batch.data.ndim != 4:
            raise ValueError(f"expected (N,1,H,W) batch, got shape {batch.shape}")
        n, c, h, w = batch.shape
        if c != 1:
            raise ValueError(f"expected a single input channel, got {c}")
        if h % SCALE_FACTOR or w % SCALE_FACTOR:
            raise ValueError(
                f"input spatial dims {h}x{w} must be divisible by {SCALE_FACTOR} (four stride-2 scales)"
            )
        skips = []
        x = batch
        for scale in self._encoder:
            x = relu(scale["down"](x))
            for unit in scale["body"]:
                x = unit(x)
            skips.append(x)
        for i, scale in enumerate(self._decoder):
            x = relu(scale["up"](x))
            if scale["skip_from"] is not None:
                enc = skips[scale["skip_from"]]
                if i in ablate_skips:
                    enc = Tensor(np.zeros_like(enc.data))
                x = concat_channels(x, enc)
            for unit in scale["body"]:
                x = unit(x)
        return self._head(x)

    __call__ = forward


def build_model(config: ArchConfig, seed: int, dtype=np.float32) -> Model:
    """Construct a model with deterministic He-initialized parameters."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    rng = np.random.default_rng(seed)
    model = Model(config=config, seed=int(seed), dtype=dtype)
    params = model.params

    enc = list(config.encoder_filters)
    dec = list(config.decoder_filters)
    ch = 1
    for i, f in enumerate(enc):
        down = _Conv(params, f"enc{i}.down", ch, f, rng, dtype, stride=2)
        body = _make_body(params, f"enc{i}", f, f, config, rng, dtype)
        model._encoder.append({"down": down, "body": body})
        ch = f

    for i, f in enumerate(dec):
        up = _TConv(params, f"dec{i}.up", ch, f, rng, dtype)
        skip_from = None
        body_in = f
        if config.has_skips and i < len(enc) - 1:
            skip_from = len(enc) - 2 - i
            body_in = f + enc[skip_from]
        body = _make_body(params, f"dec{i}", body_in, f, config, rng, dtype)
        model._decoder.append({"up": up, "skip_from": skip_from, "body": body})
        ch = f

    model._head = _Conv(params, "head", ch, config.out_channels, rng, dtype, kernel=(1, 1))
    return model
