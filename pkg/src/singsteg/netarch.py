"""Multi-stage growing generator and the shared patch critic.

The generator is one network that grows with training: a front-end conv
lifts the coarsest noise map into feature space, then a chain of conv
blocks (three 3x3 conv layers each, batch-norm + leaky ReLU) refines it.
Between consecutive blocks the features are bilinearly upsampled to the
next pyramid level and rejoined through two residual connections: the
level's noise map is added onto the upsampled features, and the upsampled
features skip around the block. A back-end conv with tanh turns features
into an RGB image in [-1, 1].

"Stage n" of a pyramid with levels 0..N means running the front-end plus
the first N-n+1 blocks; growing from stage n+1 to stage n appends exactly
one freshly initialized block while every older tensor is carried over
unchanged.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import pyramid

LEAKY_SLOPE = 0.05
CRITIC_RECEPTIVE_FIELD = 11  # five stacked 3x3 convs
FORMAT_VERSION = 1


def _init_module(mod: nn.Module, rng: torch.Generator) -> None:
    """Fresh-weight init: conv N(0, 0.02), norm gain N(1, 0.02), biases 0."""
    for m in mod.modules():
        if isinstance(m, nn.Conv2d):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=rng)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.normal_(1.0, 0.02, generator=rng)
                m.bias.zero_()


def _conv_unit(in_ch: int, out_ch: int, kernel: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, padding=kernel // 2),
        nn.BatchNorm2d(out_ch),
        nn.LeakyReLU(LEAKY_SLOPE),
    )


def _conv_block(width: int, kernel: int, layers: int) -> nn.Sequential:
    return nn.Sequential(*[_conv_unit(width, width, kernel) for _ in range(layers)])


class GrowingGenerator(nn.Module):
    def __init__(self, width: int = 64, kernel: int = 3, block_layers: int = 3,
                 rng: torch.Generator | None = None):
        super().__init__()
        self.width = width
        self.kernel = kernel
        self.block_layers = block_layers
        self.front = _conv_unit(3, width, kernel)
        self.blocks = nn.ModuleList([_conv_block(width, kernel, block_layers)])
        self.back = nn.Conv2d(width, 3, kernel, padding=kernel // 2)
        if rng is not None:
            _init_module(self, rng)

    def grow(self, rng: torch.Generator) -> None:
        """Append one fresh block; all existing weights are kept as-is."""
        block = _conv_block(self.width, self.kernel, self.block_layers)
        _init_module(block, rng)
        self.blocks.append(block)

    def forward(self, noises, amps):
        """Run the first ``len(noises)`` blocks, coarsest noise first.

        ``noises[b]`` is the 1x1xHxW map for block b's level, ``amps[b]``
        its injection amplitude. The coarsest map enters through the
        front-end as a pure-noise image; every later map is added onto the
        upsampled features of the previous block.
        """
        depth = len(noises)
        if depth < 1 or depth > len(self.blocks):
            raise ValueError(f"forward: got {depth} noise maps for {len(self.blocks)} blocks")
        if len(amps) != depth:
            raise ValueError("forward: amps/noises length mismatch")
        z0 = noises[0] * amps[0]
        f = self.front(z0.expand(z0.shape[0], 3, *z0.shape[-2:]))
        f = self.blocks[0](f) + f
        for b in range(1, depth):
            h, w = noises[b].shape[-2], noises[b].shape[-1]
            up = pyramid.resize_tensor(f, h, w)
            f = self.blocks[b](up + amps[b] * noises[b]) + up
        return torch.tanh(self.back(f))


class Critic(nn.Module):
    """Five 3x3 conv layers producing a spatial map of patch scores."""

    def __init__(self, width: int = 64, rng: torch.Generator | None = None):
        super().__init__()
        layers = [nn.Conv2d(3, width, 3, padding=1), nn.LeakyReLU(LEAKY_SLOPE)]
        for _ in range(3):
            layers += [nn.Conv2d(width, width, 3, padding=1), nn.LeakyReLU(LEAKY_SLOPE)]
        layers.append(nn.Conv2d(width, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)
        if rng is not None:
            _init_module(self, rng)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        h, w = img.shape[-2], img.shape[-1]
        if h < CRITIC_RECEPTIVE_FIELD or w < CRITIC_RECEPTIVE_FIELD:
            raise ValueError(
                f"critic: image {h}x{w} below the {CRITIC_RECEPTIVE_FIELD}x"
                f"{CRITIC_RECEPTIVE_FIELD} receptive field"
            )
        return self.net(img)


@dataclass
class StegoModel:
    """Trained generator plus the metadata extraction needs.

    This is the publicly transmitted artifact: generator weights, the
    pyramid geometry, per-level noise amplitudes, and the names of the
    derivation schemes the receiver must reproduce. The critic never
    leaves the training process.
    """

    generator: GrowingGenerator
    pyramid_dims: list            # [(h, w)] finest first
    ratio: float
    noise_amps: list              # per level, finest first
    noise_scheme: str
    obfuscated: bool = False
    shuffle_scheme: str | None = None
    width: int = 64
    trainable_window: int = 3
    format_version: int = FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    @property
    def stage_count(self) -> int:
        return len(self.pyramid_dims)


def param_count(module: nn.Module) -> int:
    """Exact number of learnable scalars."""
    return sum(p.numel() for p in module.parameters())


def generator_forward(generator: GrowingGenerator, noise, amps, to_stage: int = 0,
                      pyramid_dims=None) -> np.ndarray:
    """Forward a noise pyramid through the generator down to ``to_stage``.

    ``noise`` is a :class:`~singsteg.keynoise.NoisePyramid` (or a list of
    HxW float maps, finest first) whose dims must match ``pyramid_dims``
    when given. Returns an HxWx3 float image in [-1, 1].
    """
    maps = noise.maps if hasattr(noise, "maps") else list(noise)
    n_levels = len(maps)
    if not 0 <= to_stage < n_levels:
        raise ValueError(f"to_stage {to_stage} out of range for {n_levels} levels")
    if pyramid_dims is not None:
        got = [(m.shape[0], m.shape[1]) for m in maps]
        if got != [tuple(d) for d in pyramid_dims]:
            raise ValueError(f"noise dims {got} do not match model pyramid dims {pyramid_dims}")
    was_training = generator.training
    generator.eval()
    try:
        with torch.no_grad():
            levels = range(n_levels - 1, to_stage - 1, -1)  # coarsest -> to_stage
            tensors = [
                torch.from_numpy(np.ascontiguousarray(maps[n], dtype=np.float32))[None, None]
                for n in levels
            ]
            out = generator(tensors, [amps[n] for n in levels])
    finally:
        generator.train(was_training)
    img = pyramid.to_image(out)
    return np.clip(img, -1.0, 1.0)
