"""Segmentation network: ARFM encoder, weight-shared lightweight decoder, softmax head."""
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import ops
from .arfm import ARFM
from .nn import GELU, Conv2d, LayerNorm, Module
from .tensor import ShapeError, Tensor


@dataclass
class SACNetConfig:
    in_channels: int = 3
    num_classes: int = 9
    embed_dims: Tuple[int, ...] = (112, 224, 448, 896)
    depths: Tuple[int, ...] = (4, 4, 21, 4)
    groups: int = 4
    ffn_ratio: int = 4
    droppath_max: float = 0.1
    layer_scale: float = 1e-2
    share_projection: bool = True
    input_size: Tuple[int, int] = (224, 224)

    def __post_init__(self):
        self.embed_dims = tuple(int(d) for d in self.embed_dims)
        self.depths = tuple(int(d) for d in self.depths)
        self.input_size = tuple(int(s) for s in self.input_size)
        self.validate()

    def validate(self) -> None:
        if len(self.embed_dims) != 4 or len(self.depths) != 4:
            raise ValueError(f"need exactly 4 stages, got embed_dims={self.embed_dims}, depths={self.depths}")
        if any(d < 1 for d in self.depths):
            raise ValueError(f"every stage needs at least one block, got depths={self.depths}")
        for a, b in zip(self.embed_dims, self.embed_dims[1:]):
            if b != 2 * a:
                raise ValueError(f"embed_dims must double per stage, got {self.embed_dims}")
        if self.embed_dims[0] % 2:
            raise ValueError("embed_dims[0] must be even (the stem halves it)")
        for d in self.embed_dims:
            if d % self.groups:
                raise ValueError(f"embed dim {d} not divisible by groups={self.groups}")
        H, W = self.input_size
        if H % 32 or W % 32:
            raise ValueError(f"input size {self.input_size} must be divisible by 32")
        if self.num_classes < 2 or self.in_channels < 1:
            raise ValueError("num_classes must be >= 2 and in_channels >= 1")
        if not 0.0 <= self.droppath_max < 1.0:
            raise ValueError(f"droppath_max must lie in [0, 1), got {self.droppath_max}")

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    @classmethod
    def full(cls, **overrides) -> "SACNetConfig":
        return cls(**overrides)

    @classmethod
    def toy(cls, **overrides) -> "SACNetConfig":
        base = dict(num_classes=4, embed_dims=(16, 32, 64, 128), depths=(1, 1, 2, 1), groups=2,
                    input_size=(32, 32))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def micro(cls, **overrides) -> "SACNetConfig":
        base = dict(num_classes=4, embed_dims=(4, 8, 16, 32), depths=(1, 1, 1, 1), groups=2,
                    input_size=(32, 32))
        base.update(overrides)
        return cls(**base)


class ConvNormAct(Module):
    def __init__(self, in_ch, out_ch, act=True, rng=None):
        self.conv = Conv2d(in_ch, out_ch, 3, stride=2, padding=1, rng=rng)
        self.norm = LayerNorm(out_ch)
        self.act = GELU() if act else None

    def forward(self, x):
        x = self.norm(self.conv(x))
        return self.act(x) if self.act is not None else x


class DecoderBlock(Module):
    """LN -> (x2 upsample) -> ARFM -> LN -> concat skip -> 1x1 fusion.

    The bottleneck is the same block without the upsampling step.
    """

    def __init__(self, in_ch, skip_ch, cfg: SACNetConfig, upsample=True, rng=None):
        self.upsample = upsample
        self.norm_in = LayerNorm(in_ch)
        self.arfm = ARFM(in_ch, cfg.groups, cfg.ffn_ratio, 0.0, cfg.layer_scale, rng=rng)
        self.norm_out = LayerNorm(in_ch)
        self.fuse = Conv2d(in_ch + skip_ch, skip_ch, 1, rng=rng)

    def forward(self, x, skip, rng=None):
        x = self.norm_in(x)
        if self.upsample:
            x = ops.bilinear_resize(x, 2 * x.shape[2], 2 * x.shape[3])
        x = self.norm_out(self.arfm(x, rng))
        return self.fuse(ops.concat([x, skip], axis=1))


class Stage(Module):
    def __init__(self, blocks: List[ARFM]):
        self.blocks = blocks

    def forward(self, x, rng=None):
        for blk in self.blocks:
            x = blk(x, rng)
        return x


class SACNet(Module):
    def __init__(self, cfg: SACNetConfig, rng: Optional[np.random.Generator] = None):
        cfg.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        E = cfg.embed_dims
        self.stem1 = ConvNormAct(cfg.in_channels, E[0] // 2, rng=rng)
        self.stem2 = ConvNormAct(E[0] // 2, E[0], rng=rng)

        total = sum(cfg.depths)
        rates = np.linspace(0.0, cfg.droppath_max, total) if total > 1 else [0.0]
        self.stages: List[Stage] = []
        self.downsamples: List[ConvNormAct] = []
        k = 0
        for i, depth in enumerate(cfg.depths):
            blocks = []
            for _ in range(depth):
                blocks.append(ARFM(E[i], cfg.groups, cfg.ffn_ratio, float(rates[k]), cfg.layer_scale, rng=rng))
                k += 1
            self.stages.append(Stage(blocks))
            if i < 3:
                self.downsamples.append(ConvNormAct(E[i], E[i + 1], act=False, rng=rng))

        self.bottleneck = DecoderBlock(E[3], E[3], cfg, upsample=False, rng=rng)
        self.decoder = [
            DecoderBlock(E[3], E[2], cfg, rng=rng),
            DecoderBlock(E[2], E[1], cfg, rng=rng),
            DecoderBlock(E[1], E[0], cfg, rng=rng),
            DecoderBlock(E[0], E[0] // 2, cfg, rng=rng),
        ]
        self.head = Conv2d(E[0] // 2, cfg.num_classes, 1, rng=rng)
        if cfg.share_projection:
            self._share_generators()

    def decoder_blocks(self) -> List[DecoderBlock]:
        return [self.bottleneck] + self.decoder

    def encoder_source(self, decoder_index: int) -> ARFM:
        """Encoder block whose generators decoder block ``decoder_index`` (0 = bottleneck) reuses."""
        stage = (3, 3, 2, 1, 0)[decoder_index]
        return self.stages[stage].blocks[-1]

    def _share_generators(self):
        for j, block in enumerate(self.decoder_blocks()):
            src = self.encoder_source(j).dcn.core
            dst = block.arfm.dcn.core
            dst.offset_gen = src.offset_gen
            dst.modulation_gen = src.modulation_gen

    def encode(self, img: Tensor, rng=None):
        H, W = self.cfg.input_size
        if img.ndim != 4 or img.shape[1] != self.cfg.in_channels or img.shape[2:] != (H, W):
            raise ShapeError(f"input {img.shape} does not match config "
                             f"(B, {self.cfg.in_channels}, {H}, {W})")
        stem_mid = self.stem1(img)
        x = self.stem2(stem_mid)
        feats = []
        for i, stage in enumerate(self.stages):
            x = stage(x, rng)
            feats.append(x)
            if i < 3:
                x = self.downsamples[i](x)
        return feats, stem_mid

    def decode(self, feats, stem_mid, rng=None):
        X1, X2, X3, X4 = feats
        x = self.bottleneck(X4, X4, rng)
        for block, skip in zip(self.decoder, (X3, X2, X1, stem_mid)):
            x = block(x, skip, rng)
        logits = ops.bilinear_resize(self.head(x), *self.cfg.input_size)
        return ops.softmax(logits, axis=1)

    def forward(self, img: Tensor, rng=None) -> Tensor:
        feats, stem_mid = self.encode(img, rng)
        return self.decode(feats, stem_mid, rng)


def encoder_forward(img: Tensor, model: SACNet, mode: str = "eval", rng=None) -> List[Tensor]:
    model.train(mode == "train")
    return model.encode(img, rng)[0]


def decoder_forward(features, model: SACNet, mode: str = "eval", stem_features=None, rng=None) -> Tensor:
    model.train(mode == "train")
    if stem_features is None:
        raise ValueError("decoder_forward needs the stem features returned by SACNet.encode")
    return model.decode(features, stem_features, rng)


def model_forward(img: Tensor, model: SACNet, mode: str = "eval", rng=None) -> Tensor:
    model.train(mode == "train")
    return model(img, rng)


def count_parameters(model: Module) -> Dict[str, int]:
    """Distinct parameter count, the aliased part of it, and the count without aliasing."""
    refs: Dict[int, int] = {}
    sizes: Dict[int, int] = {}
    for _, p in model.parameter_references():
        refs[id(p)] = refs.get(id(p), 0) + 1
        sizes[id(p)] = p.size
    total = sum(sizes.values())
    shared = sum(sizes[k] for k, n in refs.items() if n > 1)
    unshared = sum(sizes[k] * refs[k] for k in refs)
    return {"total": total, "shared": shared, "unshared_equivalent": unshared}


def shared_parameter_registry(model: Module) -> Dict[str, List[str]]:
    """Map each aliased parameter (by first name) to every name it is reachable under."""
    names: Dict[int, List[str]] = {}
    for name, p in model.parameter_references():
        names.setdefault(id(p), []).append(name)
    return {refs[0]: refs for refs in names.values() if len(refs) > 1}
