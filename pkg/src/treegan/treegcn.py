"""Tree-structured graph convolution generator.

Each layer branches every node into ``d`` children and then updates each child
from a K-support loop map of its own value plus linear maps of all of its
ancestors. Ancestor contributions are computed once per ancestor and repeated
over that ancestor's contiguous block of descendants, so no layer ever builds a
node-by-node adjacency structure.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core_math import (
    ContractError,
    Parameter,
    Tensor,
    as_tensor,
    get_default_dtype,
    leaky_relu,
    linear_forward,
    matmul,
    no_grad,
    repeat_rows,
    xavier_uniform,
)


class ConfigError(ValueError):
    """A model configuration violates its invariants."""


@dataclass
class GeneratorConfig:
    degrees: list[int] = field(default_factory=lambda: [1, 2, 2, 2, 2, 2, 64])
    feature_dims: list[int] = field(default_factory=lambda: [96, 256, 256, 256, 128, 128, 128, 3])
    support: int = 10
    latent_dim: int = 96
    slope: float = 0.2
    branch_first: bool = True
    per_node_branching: bool = False
    ancestors: bool = True

    def __post_init__(self):
        self.degrees = [int(d) for d in self.degrees]
        self.feature_dims = [int(f) for f in self.feature_dims]
        self.validate()

    @property
    def n_layers(self) -> int:
        return len(self.degrees)

    @property
    def n_points(self) -> int:
        return math.prod(self.degrees)

    @property
    def layer_sizes(self) -> list[int]:
        """Node counts of layers 0..L (layer 0 is the latent root)."""
        sizes = [1]
        for d in self.degrees:
            sizes.append(sizes[-1] * d)
        return sizes

    def validate(self, n_points: int | None = None) -> None:
        if not self.degrees or any(d < 1 for d in self.degrees):
            raise ConfigError(f"degrees must be positive integers, got {self.degrees}")
        if len(self.feature_dims) != len(self.degrees) + 1:
            raise ConfigError(
                f"need {len(self.degrees) + 1} feature widths for {len(self.degrees)} layers, "
                f"got {len(self.feature_dims)}")
        if self.feature_dims[0] != self.latent_dim:
            raise ConfigError(f"first feature width {self.feature_dims[0]} != latent_dim {self.latent_dim}")
        if self.feature_dims[-1] != 3:
            raise ConfigError(f"last feature width must be 3, got {self.feature_dims[-1]}")
        if self.support < 1:
            raise ConfigError("support count K must be >= 1")
        if not 0.0 < self.slope < 1.0:
            raise ConfigError(f"slope must lie in (0, 1), got {self.slope}")
        if n_points is not None and self.n_points != n_points:
            raise ConfigError(f"product of degrees {self.degrees} is {self.n_points}, expected {n_points} points")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TreeState:
    """Node features of every layer plus the child -> parent maps.

    ``nodes[l]`` has shape (batch, |p^l|, feature_dims[l]); ``parents[l]`` for
    l >= 1 maps each layer-l node to its layer-(l-1) parent.
    """

    nodes: list[np.ndarray]
    parents: list[np.ndarray | None]

    @property
    def n_layers(self) -> int:
        return len(self.nodes) - 1


def parent_maps(degrees: Sequence[int]) -> list[np.ndarray | None]:
    maps: list[np.ndarray | None] = [None]
    size = 1
    for d in degrees:
        size *= d
        maps.append(np.arange(size) // d)
    return maps


def ancestors_of(tree: TreeState, final_index: int) -> list[int]:
    """Ancestor indices at layers 0..L-1 of a final-layer node."""
    n = tree.nodes[-1].shape[-2]
    if not 0 <= final_index < n:
        raise IndexError(f"final index {final_index} out of range for {n} points")
    path = []
    idx = final_index
    for l in range(tree.n_layers, 0, -1):
        idx = int(tree.parents[l][idx])
        path.append(idx)
    return path[::-1]


def branching(points: Tensor, V: Tensor, degree: int) -> Tensor:
    """Map each parent row to ``degree`` contiguous child rows.

    ``points`` is (..., m, f). ``V`` is (f, degree*f) when shared across
    parents, or (m, f, degree*f) per parent. Child j of parent i is row
    ``i*degree + j`` and equals the j-th f-wide block of ``p_i @ V``.
    """
    *lead, m, f = points.shape
    if V.ndim == 2:
        if V.shape != (f, degree * f):
            raise ContractError(f"branching weight shape {V.shape} != {(f, degree * f)}")
        out = matmul(points, V)
    else:
        if V.shape != (m, f, degree * f):
            raise ContractError(f"per-node branching weight shape {V.shape} != {(m, f, degree * f)}")
        out = matmul(points.reshape(tuple(lead) + (m, 1, f)), V)
    return out.reshape(tuple(lead) + (m * degree, f))


def loop_k_supports(points: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, slope: float = 0.2) -> Tensor:
    """Loop term: input -> K hidden supports -> output width."""
    return matmul(leaky_relu(linear_forward(points, W1, b1), slope), W2)


def ancestor_term(ancestors: Sequence[Tensor], U: Sequence[Tensor], n_nodes: int) -> Tensor | None:
    """Sum over ancestor depths j of ``ancestors[j] @ U[j]``, each repeated over its descendants."""
    # widen the running sum one level at a time: linear in n_nodes, same summation order
    total = None
    for q, u in zip(ancestors, U):
        term = matmul(q, u)
        total = term if total is None else repeat_rows(total, term.shape[-2] // total.shape[-2]) + term
    if total is None:
        return None
    return repeat_rows(total, n_nodes // total.shape[-2])


def gcn_reference_layer(points: Tensor, neighbors: Sequence[Sequence[int]] | None,
                        W: Tensor, U: Tensor, b: Tensor, slope: float = 0.2,
                        activate: bool = True) -> Tensor:
    """First-order graph convolution ``sigma(W p_i + sum_{q in N(i)} U q + b)``.

    Connectivity must be supplied explicitly; this variant exists for
    comparison with the tree layer.
    """
    if neighbors is None:
        raise ContractError("gcn_reference_layer needs explicit neighbor lists")
    points = as_tensor(points)
    m = points.shape[0]
    if len(neighbors) != m:
        raise ContractError(f"got {len(neighbors)} neighbor lists for {m} points")
    adj = np.zeros((m, m), dtype=points.dtype)
    for i, nb in enumerate(neighbors):
        for j in nb:
            adj[i, j] += 1.0
    out = linear_forward(points, W, b) + matmul(Tensor(adj), matmul(points, U))
    return leaky_relu(out, slope) if activate else out


class TreeGCNLayer:
    """One generator layer producing layer ``l+1`` from layers ``0..l``."""

    def __init__(self, config: GeneratorConfig, l: int, rng: np.random.Generator, prefix: str = "gen"):
        self.l = l
        self.degree = config.degrees[l]
        self.branch_first = config.branch_first
        self.slope = config.slope
        self.final = l == config.n_layers - 1
        self.use_ancestors = config.ancestors
        dims = config.feature_dims
        f_in, f_out, K = dims[l], dims[l + 1], config.support
        sizes = config.layer_sizes
        dt = get_default_dtype()
        name = f"{prefix}/layer{l}"
        fb = f_in if self.branch_first else f_out
        if config.per_node_branching:
            m = sizes[l]
            V = xavier_uniform(rng, fb, self.degree * fb, shape=(m, fb, self.degree * fb))
        else:
            V = xavier_uniform(rng, fb, self.degree * fb)
        self.V = Parameter(V, f"{name}/V")
        self.W1 = Parameter(xavier_uniform(rng, f_in, K), f"{name}/F1")
        self.b1 = Parameter(np.zeros(K, dtype=dt), f"{name}/F1b")
        self.W2 = Parameter(xavier_uniform(rng, K, f_out), f"{name}/F2")
        # branch-first children see ancestors at layers 0..l; conv-first nodes at 0..l-1
        depth = l + 1 if self.branch_first else l
        self.U = [Parameter(xavier_uniform(rng, dims[j], f_out), f"{name}/U{j}")
                  for j in range(depth)] if self.use_ancestors else []
        self.b = Parameter(np.zeros(f_out, dtype=dt), f"{name}/b")

    def parameters(self) -> list[Parameter]:
        return [self.V, self.W1, self.b1, self.W2, *self.U, self.b]

    def _convolve(self, x: Tensor, ancestors: Sequence[Tensor]) -> Tensor:
        out = loop_k_supports(x, self.W1, self.b1, self.W2, self.slope)
        anc = ancestor_term(ancestors, self.U, x.shape[-2]) if self.U else None
        if anc is not None:
            out = out + anc
        out = out + self.b
        return out if self.final else leaky_relu(out, self.slope)

    def __call__(self, tree: Sequence[Tensor]) -> Tensor:
        parent = tree[self.l]
        if self.branch_first:
            children = branching(parent, self.V, self.degree)
            return self._convolve(children, tree[: self.l + 1])
        h = self._convolve(parent, tree[: self.l])
        return branching(h, self.V, self.degree)


class Generator:
    """Latent codes (B, latent_dim) -> point clouds (B, n, 3) through a growing tree."""

    def __init__(self, config: GeneratorConfig, rng: np.random.Generator | int = 0, prefix: str = "gen"):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.config = config
        self.layers = [TreeGCNLayer(config, l, rng, prefix) for l in range(config.n_layers)]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward_tree(self, z) -> list[Tensor]:
        z = as_tensor(z)
        if z.ndim == 1:
            z = z.reshape(1, -1)
        if z.shape[-1] != self.config.latent_dim:
            raise ContractError(f"latent has width {z.shape[-1]}, generator expects {self.config.latent_dim}")
        tree = [z.reshape(z.shape[0], 1, z.shape[-1])]
        for layer in self.layers:
            tree.append(layer(tree))
        return tree

    def __call__(self, z) -> Tensor:
        return self.forward_tree(z)[-1]


def layer_sizes_of(tree: Sequence) -> list[int]:
    return [t.shape[-2] for t in tree]


def generate(generator: Generator, z) -> tuple[np.ndarray, TreeState]:
    """Pure forward pass: clouds of shape (B, n, 3) and the retained tree.

    A 1-d latent yields a single (n, 3) cloud.
    """
    z = np.asarray(z, dtype=generator.layers[0].W1.dtype)
    single = z.ndim == 1
    with no_grad():
        tree = generator.forward_tree(z)
    state = TreeState([t.data for t in tree], parent_maps(generator.config.degrees))
    clouds = tree[-1].data
    return (clouds[0] if single else clouds), state
