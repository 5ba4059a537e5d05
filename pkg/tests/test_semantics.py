import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treegan.treegcn import Generator, GeneratorConfig, ancestors_of, generate
from treegan.semantics import (
    PartSelection,
    additive_leaves,
    ancestor_index,
    cohesion_rate,
    extract_part,
    interpolate,
    leaves_of_ancestor,
    loop_outputs,
    parse_selection,
    part_labels,
    prop1_oracle,
    shared_ancestor_depth,
    shared_depth_matrix,
    sibling_cohesion,
)

FULL = [1, 2, 2, 2, 2, 2, 64]
degree_lists = st.lists(st.integers(1, 4), min_size=1, max_size=4)


def tiny_generator(seed=0, degrees=(1, 2, 2), width=4):
    dims = [width] * len(degrees) + [3]
    return Generator(GeneratorConfig(degrees=list(degrees), feature_dims=dims, support=3, latent_dim=width), seed)


# ---------------------------------------------------------------- index arithmetic

def test_layer_one_block_is_first_half():
    np.testing.assert_array_equal(leaves_of_ancestor(FULL, 2, 0), np.arange(1024))
    np.testing.assert_array_equal(leaves_of_ancestor(FULL, 0, 0), np.arange(2048))
    np.testing.assert_array_equal(leaves_of_ancestor(FULL, 7, 1500), [1500])


def test_out_of_range_is_index_error():
    with pytest.raises(IndexError):
        leaves_of_ancestor(FULL, 8, 0)
    with pytest.raises(IndexError):
        leaves_of_ancestor(FULL, 2, 2)
    with pytest.raises(IndexError):
        shared_ancestor_depth([1, 2, 2], 0, 4)


def test_shared_depth_examples():
    assert shared_ancestor_depth([1, 2, 2], 0, 2) == 1  # root plus the degree-1 layer
    assert shared_ancestor_depth([2, 2], 0, 2) == 0
    assert shared_ancestor_depth([2, 2], 0, 1) == 1
    assert shared_ancestor_depth([2, 2], 3, 3) == 2


@settings(max_examples=30)
@given(degree_lists, st.data())
def test_shared_depth_agrees_with_path_walk(degrees, data):
    n = int(np.prod(degrees))
    i = data.draw(st.integers(0, n - 1))
    j = data.draw(st.integers(0, n - 1))
    G = Generator(GeneratorConfig(degrees=degrees, feature_dims=[2] * len(degrees) + [3],
                                  latent_dim=2, support=2), 0)
    _, tree = generate(G, np.zeros(2))
    pi, pj = ancestors_of(tree, i) + [i], ancestors_of(tree, j) + [j]
    walk = max(k for k in range(len(pi)) if pi[: k + 1] == pj[: k + 1])
    assert shared_ancestor_depth(degrees, i, j) == walk
    assert shared_depth_matrix(degrees)[i, j] == walk


@settings(max_examples=30)
@given(degree_lists, st.data())
def test_blocks_partition_each_layer(degrees, data):
    sizes = np.cumprod([1] + degrees)
    layer = data.draw(st.integers(0, len(degrees)))
    blocks = [leaves_of_ancestor(degrees, layer, a) for a in range(sizes[layer])]
    np.testing.assert_array_equal(np.concatenate(blocks), np.arange(sizes[-1]))
    for a, blk in enumerate(blocks):
        assert np.all(ancestor_index(degrees, layer, blk) == a)


# ---------------------------------------------------------------- parts

def test_part_index_sets_identical_across_latents():
    G = tiny_generator()
    sel = PartSelection.make(G.config.degrees, 2, [0])
    parts = []
    for seed in (1, 2):
        cloud, tree = generate(G, np.random.default_rng(seed).standard_normal(4))
        parts.append((extract_part(cloud, tree, sel), cloud))
    np.testing.assert_array_equal(parts[0][0].points, parts[0][1][sel.leaves])
    np.testing.assert_array_equal(parts[1][0].points, parts[1][1][sel.leaves])
    assert not np.array_equal(parts[0][0].points, parts[1][0].points)


def test_root_selection_is_full_cloud():
    G = tiny_generator()
    cloud, tree = generate(G, np.ones(4))
    part = extract_part(cloud, tree, parse_selection("0:0", G.config.degrees))
    np.testing.assert_array_equal(part.points, cloud)


def test_disjoint_selections():
    a = parse_selection("2:0", FULL)
    b = parse_selection("2:1", FULL)
    assert len(np.intersect1d(a.leaves, b.leaves)) == 0
    labels = part_labels(2048, [a, b])
    assert np.sum(labels == 0) == 1024 and np.sum(labels == 1) == 1024


def test_unselected_points_get_extra_label():
    labels = part_labels(2048, [parse_selection("3:1", FULL)])
    assert set(labels.tolist()) == {0, 1}
    assert np.sum(labels == 0) == 512


def test_extract_part_needs_tree():
    with pytest.raises(ValueError):
        extract_part(np.zeros((4, 3)), None, parse_selection("0:0", [1, 2, 2]))


@pytest.mark.parametrize("text", ["", "2", "a:1", "2:", "9:0", "2:5"])
def test_bad_selections(text):
    with pytest.raises((ValueError, IndexError)):
        parse_selection(text, FULL)


# ---------------------------------------------------------------- interpolation

def test_interpolation_endpoints_exact():
    G = tiny_generator(3)
    z1, z2 = np.random.default_rng(0).standard_normal((2, 4))
    out = interpolate(G, z1, z2)
    assert len(out) == 6
    np.testing.assert_array_equal(out[0], generate(G, z1)[0])
    np.testing.assert_array_equal(out[-1], generate(G, z2)[0])


def test_interpolation_constant_when_endpoints_equal():
    G = tiny_generator(3)
    z = np.random.default_rng(1).standard_normal(4)
    out = interpolate(G, z, z, [0.0, 0.3, 0.7, 1.0])
    for c in out[1:]:
        np.testing.assert_array_equal(c, out[0])


def test_interpolation_alpha_range():
    with pytest.raises(ValueError):
        interpolate(tiny_generator(), np.zeros(4), np.ones(4), [1.5])


# ---------------------------------------------------------------- additive recursion

def test_additive_leaves_path_sum():
    degrees = [2, 2]
    S = [np.array([[1.0, 0, 0], [0, 1.0, 0]]), np.arange(12.0).reshape(4, 3)]
    p = additive_leaves(degrees, S)
    np.testing.assert_array_equal(p[3], S[0][1] + S[1][3])
    np.testing.assert_array_equal(p[0], S[0][0] + S[1][0])


def test_prop1_identity_and_bound_random_draws():
    rep = prop1_oracle([1, 2, 2, 2, 4, 8], draws=200, seed=1)
    assert rep.same_parent_max_residual < 1e-9
    assert rep.factored_satisfied_rate == 1.0
    assert 0.0 <= rep.unfactored_violation_rate <= 1.0
    assert "same-parent" in rep.summary()


def test_prop1_identical_leaves_zero():
    S = [np.random.default_rng(0).standard_normal((2, 3)), np.random.default_rng(1).standard_normal((4, 3))]
    p = additive_leaves([2, 2], S)
    assert np.sum((p[1] - p[1]) ** 2) == 0.0


def test_prop1_from_generator_loops():
    G = tiny_generator(2, degrees=(2, 2, 2), width=3)
    loops = [loop_outputs(G, np.random.default_rng(s).standard_normal(3)) for s in range(20)]
    assert [l.shape[0] for l in loops[0]] == [2, 4, 8]
    rep = prop1_oracle([2, 2, 2], loops=loops, seed=0)
    assert rep.same_parent_max_residual < 1e-9
    assert rep.factored_satisfied_rate == 1.0


def test_additive_leaves_width_mismatch():
    with pytest.raises(ValueError):
        additive_leaves([2, 2], [np.zeros((2, 4)), np.zeros((4, 3))])


def test_prop1_last_degree_one_skips_same_parent():
    rep = prop1_oracle([2, 2, 1], draws=20, seed=0)
    assert rep.n_same == 0 and rep.n_different > 0


# ---------------------------------------------------------------- cohesion statistic

def test_sibling_cohesion_on_constructed_cloud():
    degrees = [2, 2]
    # two well separated clusters of two siblings each
    pts = np.array([[0, 0, 0], [0.1, 0, 0], [5, 0, 0], [5.1, 0, 0]], dtype=float)
    within, far = sibling_cohesion(pts, degrees)
    assert within == pytest.approx(0.1)
    assert far == pytest.approx(np.mean([5.0, 5.1, 4.9, 5.0]))
    assert within < far


def test_cohesion_rate_bounds():
    G = tiny_generator(0, degrees=(2, 2, 2))
    rate = cohesion_rate(G, np.random.default_rng(0).standard_normal((5, 4)))
    assert 0.0 <= rate <= 1.0
