"""Xception-style backbone with named block boundaries.

Blocks are numbered from 1. Each block is two separable convolutions with a
residual branch; a block listed in ``downsample_blocks`` halves the raster
(ceil) at its end, so block ``b`` produces a raster of side
``stem_side / 2**(#downsample blocks <= b)``.
"""
from dataclasses import asdict, dataclass, field, replace

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, load_state_into, save_checkpoint
from .errors import ConfigurationError, ShapeError


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 64
    channel_widths: tuple = (16, 32, 64, 64)
    num_blocks: int = 4
    downsample_blocks: tuple = (1, 3)
    preset: str = "desk"
    in_channels: int = 3
    stem_widths: tuple = (16,)
    # paper preset: stride-2 valid stem convolutions at Xception's native 299 resolution
    working_size: int | None = None
    valid_stem: bool = False
    classifier: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channel_widths", tuple(int(c) for c in self.channel_widths))
        object.__setattr__(self, "downsample_blocks",
                           tuple(sorted(int(b) for b in self.downsample_blocks)))
        object.__setattr__(self, "stem_widths", tuple(int(c) for c in self.stem_widths))
        self.validate()

    def validate(self):
        if self.preset not in ("desk", "paper"):
            raise ConfigurationError(f"unknown preset {self.preset!r}")
        if self.num_blocks < 2:
            raise ConfigurationError("num_blocks must be >= 2")
        if len(self.channel_widths) != self.num_blocks:
            raise ConfigurationError(
                f"channel_widths has {len(self.channel_widths)} entries for {self.num_blocks} blocks")
        if any(c < 1 for c in self.channel_widths) or not self.stem_widths:
            raise ConfigurationError("channel widths must be positive and the stem nonempty")
        if any(not 1 <= b <= self.num_blocks for b in self.downsample_blocks):
            raise ConfigurationError("downsample block index out of range")
        if self.input_size < 4:
            raise ConfigurationError("input_size too small")

    def truncated(self, num_blocks, classifier=False):
        """Same topology cut after ``num_blocks`` blocks."""
        if not 2 <= num_blocks <= self.num_blocks:
            raise ConfigurationError(f"cannot truncate at block {num_blocks}")
        return replace(
            self,
            channel_widths=self.channel_widths[:num_blocks],
            num_blocks=num_blocks,
            downsample_blocks=tuple(b for b in self.downsample_blocks if b <= num_blocks),
            classifier=classifier,
        )

    def to_dict(self):
        d = asdict(self)
        for k in ("channel_widths", "downsample_blocks", "stem_widths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def stem_side(self):
        side = self.working_size or self.input_size
        if self.valid_stem:
            side = (side - 3) // 2 + 1
            for _ in self.stem_widths[1:]:
                side -= 2
        return side

    def raster_side(self, block):
        side = self.stem_side()
        for b in self.downsample_blocks:
            if b <= block:
                side = math.ceil(side / 2)
        return side


def desk_config(**overrides):
    return BackboneConfig(**overrides)


def paper_config(**overrides):
    """Xception topology: 12 blocks, block 11 is the last one before the final downsampling."""
    params = dict(
        input_size=256,
        channel_widths=(128, 256) + (728,) * 9 + (1024,),
        num_blocks=12,
        downsample_blocks=(1, 2, 3, 12),
        preset="paper",
        stem_widths=(32, 64),
        working_size=299,
        valid_stem=True,
    )
    params.update(overrides)
    return BackboneConfig(**params)


def preset_config(name, **overrides):
    if name == "desk":
        return desk_config(**overrides)
    if name == "paper":
        return paper_config(**overrides)
    raise ConfigurationError(f"unknown preset {name!r}")


@dataclass
class FeatureStack:
    activations: dict = field(default_factory=dict)
    final_logit: torch.Tensor | None = None


class SeparableConv(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.depthwise = nn.Conv2d(cin, cin, 3, padding=1, groups=cin, bias=False)
        self.pointwise = nn.Conv2d(cin, cout, 1, bias=False)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class Block(nn.Module):
    def __init__(self, cin, cout, downsample):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReLU(),
            SeparableConv(cin, cout),
            nn.BatchNorm2d(cout),
            nn.ReLU(),
            SeparableConv(cout, cout),
            nn.BatchNorm2d(cout),
        )
        self.pool = (nn.AvgPool2d(3, stride=2, padding=1, count_include_pad=False)
                     if downsample else nn.Identity())
        if cin != cout or downsample:
            self.skip = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=2 if downsample else 1, bias=False),
                nn.BatchNorm2d(cout),
            )
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        return self.pool(self.body(x)) + self.skip(x)


class Backbone(nn.Module):
    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        stem = []
        cin = config.in_channels
        for i, width in enumerate(config.stem_widths):
            if config.valid_stem:
                stem.append(nn.Conv2d(cin, width, 3, stride=2 if i == 0 else 1, bias=False))
            else:
                stem.append(nn.Conv2d(cin, width, 3, padding=1, bias=False))
            stem += [nn.BatchNorm2d(width), nn.ReLU()]
            cin = width
        self.stem = nn.Sequential(*stem)
        blocks = []
        for b, width in enumerate(config.channel_widths, start=1):
            blocks.append(Block(cin, width, b in config.downsample_blocks))
            cin = width
        self.blocks = nn.ModuleList(blocks)
        self.fc = nn.Linear(cin, 1) if config.classifier else None

    @property
    def num_blocks(self):
        return len(self.blocks)

    def _check_input(self, image):
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if image.dim() != 4:
            raise ShapeError(f"expected (N, C, H, W) image batch, got shape {tuple(image.shape)}")
        size = self.config.input_size
        if image.shape[1] != self.config.in_channels or image.shape[-2:] != (size, size):
            raise ShapeError(f"expected {self.config.in_channels}x{size}x{size} input, "
                             f"got {tuple(image.shape[1:])}")
        if self.config.working_size and self.config.working_size != size:
            image = F.interpolate(image, size=(self.config.working_size,) * 2,
                                  mode="bilinear", align_corners=False)
        return image

    def forward_features(self, image, upto_block=None):
        upto = self.num_blocks if upto_block is None else upto_block
        if not 1 <= upto <= self.num_blocks:
            raise ConfigurationError(f"upto_block must be in 1..{self.num_blocks}, got {upto}")
        x = self.stem(self._check_input(image))
        stack = FeatureStack()
        for b in range(1, upto + 1):
            x = self.blocks[b - 1](x)
            stack.activations[b] = x
        if upto == self.num_blocks and self.fc is not None:
            stack.final_logit = self.head(x)
        return stack

    def forward_from(self, activation, start_block):
        """Continue the forward pass from the output of ``start_block`` to the logit."""
        if self.fc is None:
            raise ConfigurationError("backbone has no classification top")
        x = activation
        for b in range(start_block + 1, self.num_blocks + 1):
            x = self.blocks[b - 1](x)
        return self.head(x)

    def head(self, x):
        return self.fc(F.relu(x).mean(dim=(2, 3))).squeeze(-1)

    def forward(self, image):
        return self.forward_features(image).final_logit


def init_parameters(module, seed):
    """He fan-in normal for convolution/linear weights, zero biases."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()
    return module


def build_backbone(config, seed=0):
    if not isinstance(config, BackboneConfig):
        raise ConfigurationError("config must be a BackboneConfig")
    model = Backbone(config)
    init_parameters(model, seed)
    return model.eval()


def forward_features(model, image, upto_block):
    return model.forward_features(image, upto_block)


def forward_logit(model, image):
    if model.fc is None:
        raise ConfigurationError("backbone has no classification top")
    return model.forward_features(image).final_logit


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def save_backbone(path, model):
    return save_checkpoint(path, "backbone", model.config.to_dict(), model.state_dict())


def load_backbone(path, config=None):
    expected = config.to_dict() if config is not None else None
    _, cfg, arrays = load_checkpoint(path, "backbone", expected)
    model = Backbone(BackboneConfig.from_dict(cfg))
    return load_state_into(model, arrays).eval()
