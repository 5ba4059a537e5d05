"""Tree semantics: ancestor blocks, part extraction, interpolation and the
distance identities of the simplified additive recursion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core_math import Tensor, leaky_relu, linear_forward, matmul, no_grad
from .data import PointCloud
from .treegcn import Generator, TreeState, branching, generate


def _sizes(degrees: Sequence[int]) -> list[int]:
    sizes = [1]
    for d in degrees:
        sizes.append(sizes[-1] * int(d))
    return sizes


def ancestor_index(degrees: Sequence[int], layer: int, leaf) -> np.ndarray | int:
    """Index at ``layer`` of the ancestor of final-layer node(s) ``leaf``."""
    sizes = _sizes(degrees)
    return leaf // (sizes[-1] // sizes[layer])


def leaves_of_ancestor(degrees: Sequence[int], layer: int, index: int) -> np.ndarray:
    """Final-layer indices descending from node ``index`` at ``layer``: one contiguous block."""
    sizes = _sizes(degrees)
    if not 0 <= layer < len(sizes):
        raise IndexError(f"layer {layer} out of range 0..{len(sizes) - 1}")
    if not 0 <= index < sizes[layer]:
        raise IndexError(f"node {index} out of range for layer {layer} with {sizes[layer]} nodes")
    span = sizes[-1] // sizes[layer]
    return np.arange(index * span, (index + 1) * span)


def shared_ancestor_depth(degrees: Sequence[int], i: int, j: int) -> int:
    """Deepest layer at which the root-to-leaf paths of leaves i and j coincide (L when i == j)."""
    n = math.prod(degrees)
    for k in (i, j):
        if not 0 <= k < n:
            raise IndexError(f"leaf {k} out of range for {n} points")
    L = len(degrees)
    for layer in range(L, -1, -1):
        if ancestor_index(degrees, layer, i) == ancestor_index(degrees, layer, j):
            return layer
    return 0


def shared_depth_matrix(degrees: Sequence[int]) -> np.ndarray:
    """All-pairs shared ancestor depth of the final layer."""
    n = math.prod(degrees)
    leaves = np.arange(n)
    depth = np.zeros((n, n), dtype=np.int64)
    for layer in range(len(degrees) + 1):
        a = ancestor_index(degrees, layer, leaves)
        depth[a[:, None] == a[None, :]] = layer
    return depth


@dataclass
class PartSelection:
    layer: int
    indices: list[int]
    leaves: np.ndarray

    @classmethod
    def make(cls, degrees: Sequence[int], layer: int, indices: Sequence[int]) -> "PartSelection":
        blocks = [leaves_of_ancestor(degrees, layer, a) for a in indices]
        leaves = np.unique(np.concatenate(blocks)) if blocks else np.empty(0, dtype=np.int64)
        return cls(layer, list(indices), leaves)


def parse_selection(text: str, degrees: Sequence[int]) -> PartSelection:
    """Parse ``layer:index[,index...]``."""
    try:
        layer_s, idx_s = text.split(":", 1)
        layer = int(layer_s)
        indices = [int(t) for t in idx_s.split(",") if t.strip()]
    except ValueError as exc:
        raise ValueError(f"bad part selection {text!r}; expected layer:index[,index...]") from exc
    if not indices:
        raise ValueError(f"part selection {text!r} names no nodes")
    return PartSelection.make(degrees, layer, indices)


def extract_part(cloud, tree: TreeState | None, selection: PartSelection, selection_id: int = 0) -> PointCloud:
    """Rows of ``cloud`` descending from the selected ancestors, labelled ``selection_id``."""
    if tree is None:
        raise ValueError("extract_part needs the tree state retained from generation")
    pts = np.asarray(getattr(cloud, "points", cloud))
    if tree.nodes[-1].shape[-2] != len(pts):
        raise ValueError("tree state does not belong to this cloud")
    J = selection.leaves
    return PointCloud(pts[J], np.full(len(J), selection_id, dtype=np.int64))


def part_labels(n: int, selections: Sequence[PartSelection]) -> np.ndarray:
    """Per-point label: index of the first selection containing the point, else len(selections)."""
    labels = np.full(n, len(selections), dtype=np.int64)
    for k in range(len(selections) - 1, -1, -1):
        labels[selections[k].leaves] = k
    return labels


def interpolate(generator: Generator, z1, z2, alphas: Sequence[float] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)) -> list[np.ndarray]:
    """Clouds G((1 - a) z1 + a z2) in alpha order.

    Every latent is generated on its own. The latent is formed as
    ``z1 + a (z2 - z1)`` with ``a = 1`` mapped to ``z2``, so the endpoints
    reproduce G(z1) and G(z2) bit for bit and equal endpoints give equal clouds.
    """
    z1, z2 = np.asarray(z1, dtype=np.float64), np.asarray(z2, dtype=np.float64)
    out = []
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha {a} outside [0, 1]")
        z = z2 if a == 1.0 else z1 + a * (z2 - z1)
        cloud, _ = generate(generator, z)
        out.append(cloud)
    return out


# ---------------------------------------------------------------- simplified recursion

@dataclass
class Prop1Report:
    n_same: int
    n_different: int
    same_parent_max_residual: float
    factored_satisfied_rate: float
    unfactored_violation_rate: float
    max_ratio: float

    def summary(self) -> str:
        return (f"same-parent pairs {self.n_same}: max residual {self.same_parent_max_residual:.3g}; "
                f"different-parent pairs {self.n_different}: depth-factored bound holds in "
                f"{100 * self.factored_satisfied_rate:.1f}%, unfactored bound violated in "
                f"{100 * self.unfactored_violation_rate:.1f}% (max LHS/RHS {self.max_ratio:.3f})")


def additive_leaves(degrees: Sequence[int], loops: Sequence[np.ndarray]) -> np.ndarray:
    """Leaf values of the simplified recursion: sum of loop outputs along each ancestor path.

    ``loops[l-1]`` holds the loop outputs of the layer-l nodes, l = 1..L.
    """
    widths = {np.shape(s)[-1] for s in loops}
    if len(widths) != 1:
        raise ValueError(f"additive recursion needs one width across layers, got {sorted(widths)}")
    n = math.prod(degrees)
    leaves = np.arange(n)
    return sum(loops[l - 1][ancestor_index(degrees, l, leaves)] for l in range(1, len(degrees) + 1))


def loop_outputs(generator: Generator, z) -> list[np.ndarray]:
    """Per-layer loop-term values of one latent, taken from a trained or random generator.

    Follows the simplified recursion: identity activation and no ancestor
    mixing, each layer's loop map applied to the branched parent values.
    """
    tree = [Tensor(np.asarray(z, dtype=generator.layers[0].W1.dtype).reshape(1, 1, -1))]
    loops = []
    with no_grad():
        for layer in generator.layers:
            x = tree[-1]
            if layer.branch_first:
                x = branching(x, layer.V, layer.degree)
            s = matmul(leaky_relu(linear_forward(x, layer.W1, layer.b1), layer.slope), layer.W2)
            if not layer.branch_first:
                s = branching(s, layer.V, layer.degree)
            loops.append(s.data[0])
            tree.append(s)
    return loops


def prop1_oracle(degrees: Sequence[int], draws: int = 1000, pairs_per_draw: int = 4, dim: int = 3,
                 seed: int = 0, loops: Sequence[Sequence[np.ndarray]] | None = None,
                 tol: float = 1e-12) -> Prop1Report:
    """Check the same-parent identity and the different-parent bound.

    For each draw (random Gaussian loop outputs unless ``loops`` gives them),
    leaves are the additive path sums. Same-parent pairs compare
    ||p_s - p_i||^2 against ||S_s - S_i||^2. Different-parent pairs compare
    ||p_d - p_i||^2 with the sum of per-layer squared loop differences, both
    plain and multiplied by the number of layers at which the paths differ
    (the Cauchy-Schwarz factor).
    """
    rng = np.random.default_rng(seed)
    sizes = _sizes(degrees)
    L, n = len(degrees), sizes[-1]
    d_last = degrees[-1]
    parent = np.arange(n) // d_last
    residuals, ratios, factored_ok, unfactored_bad = [], [], [], []
    n_draws = len(loops) if loops is not None else draws
    for k in range(n_draws):
        S = list(loops[k]) if loops is not None else [rng.standard_normal((sizes[l], dim)) for l in range(1, L + 1)]
        p = additive_leaves(degrees, S)
        for _ in range(pairs_per_draw):
            if d_last >= 2:
                i = int(rng.integers(n))
                block = np.arange(parent[i] * d_last, (parent[i] + 1) * d_last)
                s = int(rng.choice(block[block != i]))
                lhs = float(np.sum((p[s] - p[i]) ** 2))
                rhs = float(np.sum((S[-1][s] - S[-1][i]) ** 2))
                residuals.append(abs(lhs - rhs))
            if parent[-1] == 0:
                continue
            while True:
                i, d = (int(v) for v in rng.integers(n, size=2))
                if parent[i] != parent[d]:
                    break
            terms = []
            for l in range(1, L + 1):
                ai, ad = ancestor_index(degrees, l, i), ancestor_index(degrees, l, d)
                terms.append(float(np.sum((S[l - 1][ad] - S[l - 1][ai]) ** 2)))
            lhs = float(np.sum((p[d] - p[i]) ** 2))
            rhs = sum(terms)
            m = sum(ancestor_index(degrees, l, i) != ancestor_index(degrees, l, d) for l in range(1, L + 1))
            ratios.append(lhs / rhs if rhs > 0 else 0.0)
            factored_ok.append(lhs <= m * rhs * (1 + tol) + tol)
            unfactored_bad.append(lhs > rhs * (1 + tol) + tol)
    return Prop1Report(
        n_same=len(residuals),
        n_different=len(ratios),
        same_parent_max_residual=max(residuals) if residuals else 0.0,
        factored_satisfied_rate=float(np.mean(factored_ok)) if factored_ok else 1.0,
        unfactored_violation_rate=float(np.mean(unfactored_bad)) if unfactored_bad else 0.0,
        max_ratio=max(ratios) if ratios else 0.0,
    )


# ---------------------------------------------------------------- cohesion

def sibling_cohesion(cloud, degrees: Sequence[int]) -> tuple[float, float]:
    """Mean 3D distance within final sibling blocks vs. between the least related leaves.

    The second value averages over leaf pairs whose shared ancestor depth is
    the smallest occurring one (the pairs split at the first branching).
    """
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    depth = shared_depth_matrix(degrees)
    L = len(degrees)
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    within = dist[depth == L - 1]
    far = dist[depth == depth.min()]
    return float(within.mean()), float(far.mean())


def cohesion_rate(generator: Generator, latents: np.ndarray) -> float:
    """Fraction of latents whose sibling blocks are tighter than the least related leaf pairs."""
    wins = 0
    for z in latents:
        cloud, _ = generate(generator, z)
        within, far = sibling_cohesion(cloud, generator.config.degrees)
        wins += within < far
    return wins / len(latents)
