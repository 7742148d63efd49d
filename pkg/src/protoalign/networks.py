"""Segmentation/translation modules and patch discriminators.

A :class:`SegModule` runs one encoder pass whose features feed three
branches: a segmentation head, a projection head with the same layer
structure, and an image translator that upsamples with skip connections
from every encoder stage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

from . import tensor as T
from .nn import ParameterSet, init_parameters
from .tensor import Tensor


@dataclass(frozen=True)
class ConvSpec:
    name: str
    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1

    @property
    def padding(self) -> int:
        return self.kernel // 2


@dataclass
class ModelConfig:
    num_classes: int = 5
    embed_depth: int = 16
    enc_channels: tuple[int, int, int] = (16, 32, 64)
    head_channels: int = 16
    disc_channels: tuple[int, int, int] = (8, 16, 32)
    head_skip: bool = True
    # translator predicts a residual over the input image before tanh
    translator_residual: bool = True

    @property
    def downsampling(self) -> int:
        return 4


def encoder_specs(cfg: ModelConfig) -> list[ConvSpec]:
    c1, c2, c3 = cfg.enc_channels
    return [
        ConvSpec("enc.c1", 1, c1),
        ConvSpec("enc.c2", c1, c2, stride=2),
        ConvSpec("enc.c3", c2, c3, stride=2),
    ]


def head_specs(cfg: ModelConfig, prefix: str, out_ch: int) -> list[ConvSpec]:
    c1, _, c3 = cfg.enc_channels
    in_ch = c3 + (c1 if cfg.head_skip else 0)
    return [
        ConvSpec(f"{prefix}.c1", in_ch, cfg.head_channels),
        ConvSpec(f"{prefix}.c2", cfg.head_channels, out_ch),
    ]


def translator_specs(cfg: ModelConfig) -> list[ConvSpec]:
    c1, c2, c3 = cfg.enc_channels
    return [
        ConvSpec("trans.u2", c3 + c2, c2),
        ConvSpec("trans.u1", c2 + c1, c1),
        ConvSpec("trans.out", c1, 1),
    ]


def discriminator_specs(cfg: ModelConfig, in_ch: int) -> list[ConvSpec]:
    d1, d2, d3 = cfg.disc_channels
    return [
        ConvSpec("d.c1", in_ch, d1, stride=2),
        ConvSpec("d.c2", d1, d2, stride=2),
        ConvSpec("d.c3", d2, d3, stride=2),
        ConvSpec("d.out", d3, 1),
    ]


def _layout(prefix: str, specs: list[ConvSpec]) -> dict[str, tuple[int, ...]]:
    out = {}
    for s in specs:
        out[f"{prefix}.{s.name}.w"] = (s.out_ch, s.in_ch, s.kernel, s.kernel)
        out[f"{prefix}.{s.name}.b"] = (s.out_ch,)
    return out


def _conv(params: ParameterSet, prefix: str, spec: ConvSpec, x: Tensor) -> Tensor:
    key = f"{prefix}.{spec.name}"
    return T.conv2d(x, params[f"{key}.w"], params[f"{key}.b"], spec.stride, spec.padding)


class ModuleOutput(NamedTuple):
    translated: Tensor
    logits: Tensor
    probs: Tensor
    embedding: Tensor


class SegModule:
    """Encoder E, segmentation head F, projection head P and translator T."""

    def __init__(self, cfg: ModelConfig, name: str, seed: int):
        self.cfg = cfg
        self.name = name
        self.encoder = encoder_specs(cfg)
        self.seg_head = head_specs(cfg, "seg", cfg.num_classes)
        self.proj_head = head_specs(cfg, "proj", cfg.embed_depth)
        self.translator = translator_specs(cfg)
        layout = {}
        for specs in (self.encoder, self.seg_head, self.proj_head, self.translator):
            layout.update(_layout(name, specs))
        self.params = init_parameters(layout, seed)

    def head_structure(self, which: str) -> list[tuple]:
        """Layer specs of a head without names, for structural comparison."""
        specs = self.seg_head if which == "seg" else self.proj_head
        return [(s.in_ch, s.out_ch, s.kernel, s.stride) for s in specs]

    def _head(self, specs: list[ConvSpec], features: Tensor) -> Tensor:
        h = T.relu(_conv(self.params, self.name, specs[0], features))
        return _conv(self.params, self.name, specs[1], h)

    def __call__(self, image) -> ModuleOutput:
        return forward_module(self, image)


def forward_module(module: SegModule, image) -> ModuleOutput:
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected image batch (N, 1, H, W), got {x.shape}")
    factor = module.cfg.downsampling
    h, w = x.shape[2:]
    if h % factor or w % factor:
        raise ValueError(f"image extent {h}x{w} must be a multiple of {factor}")
    p, name = module.params, module.name
    e1 = T.relu(_conv(p, name, module.encoder[0], x))
    e2 = T.relu(_conv(p, name, module.encoder[1], e1))
    e3 = T.relu(_conv(p, name, module.encoder[2], e2))

    shared = T.upsample_nearest(e3, factor)
    if module.cfg.head_skip:
        shared = T.concat([shared, e1], axis=1)
    logits = module._head(module.seg_head, shared)
    embedding = module._head(module.proj_head, shared)

    t2 = T.relu(_conv(p, name, module.translator[0], T.concat([T.upsample_nearest(e3, 2), e2], axis=1)))
    t1 = T.relu(_conv(p, name, module.translator[1], T.concat([T.upsample_nearest(t2, 2), e1], axis=1)))
    pre = _conv(p, name, module.translator[2], t1)
    translated = T.tanh(pre + x if module.cfg.translator_residual else pre)
    return ModuleOutput(translated, logits, T.softmax_channel(logits), embedding)


class PatchDiscriminator:
    """Three stride-2 convolutions with leaky ReLU, then a 1-channel score conv."""

    def __init__(self, cfg: ModelConfig, name: str, in_channels: int, kind: str, seed: int):
        self.name = name
        self.kind = kind
        self.in_channels = in_channels
        self.specs = discriminator_specs(cfg, in_channels)
        self.params = init_parameters(_layout(name, self.specs), seed)

    def __call__(self, x) -> Tensor:
        return discriminate(self, x)


def discriminate(d: PatchDiscriminator, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4 or x.shape[1] != d.in_channels:
        raise ValueError(f"{d.kind} discriminator expects {d.in_channels} channels, got shape {x.shape}")
    h = x
    for spec in d.specs[:-1]:
        h = T.leaky_relu(_conv(d.params, d.name, spec, h))
    return _conv(d.params, d.name, d.specs[-1], h)
