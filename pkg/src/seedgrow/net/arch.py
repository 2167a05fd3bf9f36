"""Layer layout of the dilated fully-convolutional classifier."""

from __future__ import annotations

from dataclasses import dataclass
from math import gcd


@dataclass(frozen=True)
class LayerSpec:
    in_ch: int
    out_ch: int
    kernel: int = 3
    dilation: int = 1

    @property
    def n_params(self) -> int:
        return self.kernel * self.kernel * self.in_ch * self.out_ch + self.out_ch


@dataclass(frozen=True)
class Architecture:
    """Ordered conv layers; ReLU after every layer except the last, which is
    followed by a softmax over its output channels."""

    layers: tuple

    @classmethod
    def default(cls, in_ch: int = 3, width: int = 32, n_classes: int = 2,
                dilations=(1, 1, 2, 4, 8, 16, 16)) -> "Architecture":
        layers = []
        c = in_ch
        for d in dilations:
            layers.append(LayerSpec(c, width, 3, d))
            c = width
        layers.append(LayerSpec(width, width, 1, 1))
        layers.append(LayerSpec(width, n_classes, 1, 1))
        return cls(tuple(layers))

    @property
    def in_ch(self) -> int:
        return self.layers[0].in_ch

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out_ch

    @property
    def margin(self) -> int:
        """Input pixels consumed on each border by valid-mode convolution."""
        return (receptive_field(self) - 1) // 2

    def cone_strides(self) -> list:
        """Output-grid stride of every layer when only the centre output pixel
        is needed.  Each entry is the gcd of the dilations of all later
        spatial layers (0 where no spatial layer follows)."""
        strides = []
        for i in range(len(self.layers)):
            g = 0
            for later in self.layers[i + 1:]:
                if later.kernel > 1:
                    g = gcd(g, later.dilation)
            strides.append(g)
        return strides

    def to_dict(self) -> dict:
        return {"layers": [[l.in_ch, l.out_ch, l.kernel, l.dilation] for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(tuple(LayerSpec(*map(int, row)) for row in d["layers"]))


def param_count(arch: Architecture) -> int:
    return sum(l.n_params for l in arch.layers)


def receptive_field(arch: Architecture) -> int:
    return 1 + sum(l.dilation * (l.kernel - 1) for l in arch.layers)
