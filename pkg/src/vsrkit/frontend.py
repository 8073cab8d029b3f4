"""Visual front-end: 3D stem plus 2D residual stages over a clip.

Produces two feature maps per clip: the final-stage map (spatially
coarse, semantically strong) and the penultimate-stage map (more
spatial detail), which downstream branches consume separately.

Shape arithmetic: every convolution uses same padding, so a spatial
dimension of size n becomes ceil(n / stride).  With the default
stem_stride=2 and stride-2 stages [16, 32], a 32x32 input yields a
penultimate map of 8x8 and a final map of 4x4.  The temporal axis is
never downsampled.
"""

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ShapeError


def _ceil_div(n, s):
    return -(-n // s)


@dataclass
class FrontendConfig:
    in_height: int = 32
    in_width: int = 32
    conv3d_kernel: tuple = (3, 5, 5)
    stem_stride: int = 2
    stage_channels: tuple = (16, 32)
    blocks_per_stage: int = 2
    embed_dim: int = 32

    def __post_init__(self):
        if len(self.stage_channels) < 2:
            raise ConfigError("need at least two stages (final + penultimate)")
        h, w = self.spatial_sizes()[-1]
        if h < 2 or w < 2:
            raise ConfigError(
                f"spatial size after all stages is {h}x{w}, need >= 2x2")

    def spatial_sizes(self):
        """(h, w) after the stem and after each stage, in order."""
        h = _ceil_div(self.in_height, self.stem_stride)
        w = _ceil_div(self.in_width, self.stem_stride)
        sizes = [(h, w)]
        for _ in self.stage_channels:
            h, w = _ceil_div(h, 2), _ceil_div(w, 2)
            sizes.append((h, w))
        return sizes


class ResidualBlock(nn.Module):
    """conv-relu-conv branch added to the (possibly projected) input.

    With branch weights zeroed and an identity shortcut, output equals
    input exactly.
    """

    def __init__(self, rng, c_in, c_out, stride):
        scale1 = np.sqrt(2.0 / (c_in * 9))
        scale2 = np.sqrt(2.0 / (c_out * 9))
        self.w1 = nn.param(rng, (c_out, c_in, 3, 3), scale1)
        self.b1 = nn.zeros_param((c_out,))
        self.w2 = nn.param(rng, (c_out, c_out, 3, 3), scale2)
        self.b2 = nn.zeros_param((c_out,))
        self.stride = stride
        if stride != 1 or c_in != c_out:
            self.w_skip = nn.param(rng, (c_out, c_in, 1, 1),
                                   np.sqrt(1.0 / c_in))
            self.b_skip = nn.zeros_param((c_out,))
        else:
            self.w_skip = None

    def __call__(self, x):
        h = T.conv2d(x, self.w1, self.b1, stride=(self.stride, self.stride),
                     padding=(1, 1))
        h = T.conv2d(T.relu(h), self.w2, self.b2, padding=(1, 1))
        if self.w_skip is not None:
            x = T.conv2d(x, self.w_skip, self.b_skip,
                         stride=(self.stride, self.stride))
        return T.add(x, h)


@dataclass
class FeaturePair:
    """Final-stage map (T, C, Hf, Wf) and penultimate map (T, c, h, w)."""
    F: T.Tensor
    F_prime: T.Tensor


class VisualFrontend(nn.Module):
    def __init__(self, rng, config):
        self.config = config
        kt, kh, kw = config.conv3d_kernel
        c0 = config.stage_channels[0]
        self.stem_w = nn.param(rng, (c0, 1, kt, kh, kw),
                               np.sqrt(2.0 / (kt * kh * kw)))
        self.stem_b = nn.zeros_param((c0,))
        self.stages = []
        c_in = c0
        for c_out in config.stage_channels:
            blocks = [ResidualBlock(rng, c_in, c_out, stride=2)]
            for _ in range(config.blocks_per_stage - 1):
                blocks.append(ResidualBlock(rng, c_out, c_out, stride=1))
            self.stages.append(blocks)
            c_in = c_out

    def stem(self, clip):
        """clip: (T, 1, H, W) -> (T, C0, H', W') after the 3D stem.

        The stem mixes adjacent frames (temporal kernel) but preserves
        the frame count; everything after it is per-frame.
        """
        t, c, h, w = clip.shape
        cfg = self.config
        if c != 1 or h != cfg.in_height or w != cfg.in_width:
            raise ShapeError(
                f"expected clip (T, 1, {cfg.in_height}, {cfg.in_width}), "
                f"got {clip.shape}")
        kt, kh, kw = cfg.conv3d_kernel
        x = T.reshape(clip, (1, 1, t, h, w))
        x = T.conv3d(x, self.stem_w, self.stem_b,
                     stride=(1, cfg.stem_stride, cfg.stem_stride),
                     padding=(kt // 2, kh // 2, kw // 2))
        return T.transpose(T.relu(x)[0], (1, 0, 2, 3))

    def stages_forward(self, x):
        """Run the residual stages over a frame batch (B, C0, H', W');
        returns (final map, penultimate map)."""
        maps = []
        for blocks in self.stages:
            for block in blocks:
                x = block(x)
            maps.append(x)
        return maps[-1], maps[-2]

    def forward_clips(self, clips):
        """Batched forward: clips' frames share the 2D stages.

        clips: list of (T_i, 1, H, W) tensors -> list of FeaturePair.
        Per-frame stage computation makes concatenation along the frame
        axis exact (no cross-clip mixing).
        """
        stems = [self.stem(c) for c in clips]
        lens = [s.shape[0] for s in stems]
        x = stems[0] if len(stems) == 1 else T.concat(stems, axis=0)
        final, penult = self.stages_forward(x)
        pairs = []
        offset = 0
        for n in lens:
            pairs.append(FeaturePair(F=final[offset:offset + n],
                                     F_prime=penult[offset:offset + n]))
            offset += n
        return pairs

    def __call__(self, clip):
        """clip: (T, 1, H, W) -> FeaturePair; temporal length preserved
        end to end, only spatial axes downsampled."""
        stem = self.stem(clip)
        final, penult = self.stages_forward(stem)
        return FeaturePair(F=final, F_prime=penult)
