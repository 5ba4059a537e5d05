"""Permutation-invariant Wasserstein critic: shared per-point layers, max pool, dense head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core_math import Parameter, Tensor, as_tensor, get_default_dtype, leaky_relu, linear_forward, no_grad, xavier_uniform
from .treegcn import ConfigError


@dataclass
class CriticConfig:
    point_widths: list[int] = field(default_factory=lambda: [3, 64, 128, 256, 512])
    head_widths: list[int] = field(default_factory=lambda: [512, 128, 64, 1])
    slope: float = 0.2

    def __post_init__(self):
        self.point_widths = [int(w) for w in self.point_widths]
        self.head_widths = [int(w) for w in self.head_widths]
        if self.point_widths[0] != 3:
            raise ConfigError(f"critic input width must be 3, got {self.point_widths[0]}")
        if self.head_widths[-1] != 1:
            raise ConfigError(f"critic output width must be 1, got {self.head_widths[-1]}")
        if self.head_widths[0] != self.point_widths[-1]:
            raise ConfigError("critic head must start at the pooled feature width")

    def to_dict(self) -> dict:
        return asdict(self)


class PointSetNet:
    """Shared per-point stack, symmetric max pool, dense head.

    Hidden layers use LeakyReLU, the last head layer is linear. The critic and
    the feature extractor's classifier are both instances of this.
    """

    def __init__(self, point_widths, head_widths, slope: float, rng, prefix: str):
        self.slope = slope
        dt = get_default_dtype()
        self.point_layers = [
            (Parameter(xavier_uniform(rng, a, b), f"{prefix}/point{i}/W"),
             Parameter(np.zeros(b, dtype=dt), f"{prefix}/point{i}/b"))
            for i, (a, b) in enumerate(zip(point_widths[:-1], point_widths[1:]))
        ]
        self.head_layers = [
            (Parameter(xavier_uniform(rng, a, b), f"{prefix}/head{i}/W"),
             Parameter(np.zeros(b, dtype=dt), f"{prefix}/head{i}/b"))
            for i, (a, b) in enumerate(zip(head_widths[:-1], head_widths[1:]))
        ]

    def parameters(self) -> list[Parameter]:
        return [p for pair in self.point_layers + self.head_layers for p in pair]

    def pooled(self, x: Tensor) -> Tensor:
        """(B, n, 3) -> (B, F) global feature."""
        h = as_tensor(x)
        for W, b in self.point_layers:
            h = leaky_relu(linear_forward(h, W, b), self.slope)
        return h.max(axis=-2)

    def head(self, h: Tensor, upto: int | None = None) -> Tensor:
        """Apply head layers; ``upto`` stops after that many layers (hidden activations kept)."""
        layers = self.head_layers if upto is None else self.head_layers[:upto]
        last = len(self.head_layers) - 1
        for i, (W, b) in enumerate(layers):
            h = linear_forward(h, W, b)
            if i != last:
                h = leaky_relu(h, self.slope)
        return h

    def __call__(self, x: Tensor) -> Tensor:
        return self.head(self.pooled(x))


class Critic(PointSetNet):
    def __init__(self, config: CriticConfig | None = None, rng=0, prefix: str = "critic"):
        config = config or CriticConfig()
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.config = config
        super().__init__(config.point_widths, config.head_widths, config.slope, rng, prefix)

    def __call__(self, x) -> Tensor:
        """Scores of shape (B,) for clouds (B, n, 3); a single (n, 3) cloud gives shape (1,)."""
        x = as_tensor(x)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        return super().__call__(x).reshape(x.shape[0])


def critic_score(cloud, critic: Critic) -> float:
    """Unbounded real score of one cloud."""
    pts = getattr(cloud, "points", cloud)
    with no_grad():
        return critic(np.asarray(pts, dtype=critic.parameters()[0].dtype)).item()
