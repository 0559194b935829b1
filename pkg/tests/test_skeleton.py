import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poseattn.skeleton import (
    SkeletonFormatError,
    SkeletonSequence,
    SkeletonTopology,
    TopologyError,
    build_euler_tour,
    build_preorder_tour,
    check_tour,
    encode_pose_tensor,
    load_topology,
    normalize_sequence,
    parse_joint_map,
    parse_topology,
    random_tour,
    read_skeleton,
    read_topology,
    remap_topology,
    sample_subsequence,
    write_skeleton,
    write_topology,
)


@st.composite
def trees(draw, max_joints=40):
    k = draw(st.integers(1, max_joints))
    parents = [draw(st.integers(0, i - 1)) for i in range(1, k)]
    perm = draw(st.permutations(range(k)))
    edges = tuple((perm[p], perm[i + 1]) for i, p in enumerate(parents))
    return SkeletonTopology(k, edges, root=perm[0])


def tour_properties_hold(topo, tour):
    k = topo.num_joints
    assert len(tour) == 2 * k
    counts = {}
    for i, (a, b) in enumerate(zip(tour[:-1], tour[1:])):
        if i == len(tour) - 2:
            assert a == b == topo.root
            continue
        assert b in topo.neighbors(a)
        counts[frozenset((a, b))] = counts.get(frozenset((a, b)), 0) + 1
    assert all(counts.get(frozenset(e), 0) == 2 for e in topo.edges)


@settings(max_examples=300, deadline=None)
@given(trees())
def test_euler_tour_properties_on_random_trees(topo):
    tour = build_euler_tour(topo)
    tour_properties_hold(topo, tour)
    check_tour(topo, tour)


def test_two_joint_chain():
    topo = SkeletonTopology(2, ((0, 1),), 0, ("A", "B"))
    assert build_euler_tour(topo) == [0, 1, 0, 0]


def test_star_tour_counts():
    topo = SkeletonTopology(5, ((0, 1), (0, 2), (0, 3), (0, 4)), 0)
    tour = build_euler_tour(topo)
    assert tour == [0, 1, 0, 2, 0, 3, 0, 4, 0, 0]
    assert tour.count(0) == 6 and all(tour.count(j) == 1 for j in range(1, 5))


def test_ntu_tour_width():
    topo = load_topology("ntu25")
    tour = build_euler_tour(topo)
    assert len(tour) == 50
    check_tour(topo, tour)
    assert topo.names[topo.root] == "spine_mid"
    coords = np.zeros((20, 2, 25, 3))
    assert encode_pose_tensor(coords, tour, persons=2).shape == (20, 300, 3)


def test_desk_topology_has_hands():
    topo = load_topology("desk12")
    assert topo.num_joints == 12
    for name in ("hand_left", "hand_right"):
        topo.index(name)
    tour_properties_hold(topo, build_euler_tour(topo))


def test_preorder_and_random_orders():
    topo = load_topology("desk12")
    pre = build_preorder_tour(topo)
    assert len(pre) == 13 and sorted(set(pre)) == list(range(12))
    base = build_euler_tour(topo)
    r = random_tour(base, 3)
    assert sorted(r) == sorted(base) and r != base
    assert random_tour(base, 3) == r


@pytest.mark.parametrize(
    "k, edges, root",
    [(3, ((0, 1),), 0), (3, ((0, 1), (1, 0)), 0), (3, ((0, 1), (1, 2)), 5), (4, ((0, 1), (1, 2), (2, 0)), 0)],
)
def test_invalid_topologies_rejected(k, edges, root):
    with pytest.raises(TopologyError):
        SkeletonTopology(k, edges, root)


def test_bad_tour_override_rejected():
    with pytest.raises(TopologyError):
        SkeletonTopology(3, ((0, 1), (1, 2)), 0, tour_override=(0, 1, 2, 1, 0))


# ---------------------------------------------------------------- normalization and encoding


def random_sequence(rng, frames=6, persons=2, joints=12):
    coords = rng.normal(size=(frames, persons, joints, 3))
    return SkeletonSequence(coords, np.ones((frames, persons), bool))


def test_normalize_puts_person0_root_at_origin(rng):
    topo = load_topology("desk12")
    seq = random_sequence(rng)
    out = normalize_sequence(seq, topo)
    np.testing.assert_allclose(out.coords[:, 0, topo.root], 0.0, atol=1e-15)
    # inter-person geometry survives
    np.testing.assert_allclose(out.coords[:, 1] - out.coords[:, 0], seq.coords[:, 1] - seq.coords[:, 0], atol=1e-12)


def test_normalize_translation_invariance(rng):
    topo = load_topology("desk12")
    seq = random_sequence(rng)
    shifted = SkeletonSequence(seq.coords + np.array([3.0, -1.0, 2.5]), seq.present)
    np.testing.assert_allclose(
        normalize_sequence(seq, topo).coords, normalize_sequence(shifted, topo).coords, atol=1e-12
    )


def test_single_person_second_block_zero(rng):
    topo = load_topology("desk12")
    coords = rng.normal(size=(4, 2, 12, 3))
    coords[:, 1] = 0
    present = np.array([[True, False]] * 4)
    out = normalize_sequence(SkeletonSequence(coords, present), topo)
    assert np.all(out.coords[:, 1] == 0)
    x = encode_pose_tensor(out.coords, build_euler_tour(topo), 2)
    assert np.all(x[:, 72:, :] == 0)


def test_normalize_falls_back_when_person0_absent(rng):
    topo = load_topology("desk12")
    coords = rng.normal(size=(3, 2, 12, 3))
    present = np.array([[True, True], [False, True], [True, True]])
    coords[1, 0] = 0
    out = normalize_sequence(SkeletonSequence(coords, present), topo)
    np.testing.assert_allclose(out.coords[1, 1, topo.root], 0.0, atol=1e-15)
    assert np.all(out.coords[1, 0] == 0)
    with pytest.raises(SkeletonFormatError):
        normalize_sequence(SkeletonSequence(coords, np.array([[True, True], [False, False], [True, True]])), topo)


def test_encoding_channels_for_constant_and_linear_motion():
    tour = [0, 1, 0, 0]
    const = np.ones((5, 1, 2, 3))
    x = encode_pose_tensor(const, tour, persons=1)
    assert np.all(x[:, :, 1:] == 0)
    v = np.array([0.1, -0.2, 0.3])
    lin = np.arange(5)[:, None, None, None] * v + np.zeros((5, 1, 2, 3))
    x = encode_pose_tensor(lin, tour, persons=1)
    np.testing.assert_allclose(x[1:, :3, 1], np.tile(v, (4, 1)), atol=1e-12)
    assert np.all(x[0, :, 1] == 0) and np.all(x[:2, :, 2] == 0)
    np.testing.assert_allclose(x[:, :, 2], 0.0, atol=1e-12)


def test_encoding_round_trip_and_permutation_equivariance(rng):
    topo = load_topology("desk12")
    coords = rng.normal(size=(7, 2, 12, 3))
    tour = build_euler_tour(topo)
    x = encode_pose_tensor(coords, tour, 2)
    blocks = x[:, :, 0].reshape(7, 2, len(tour), 3)
    for e, j in enumerate(tour):
        np.testing.assert_array_equal(blocks[:, :, e], coords[:, :, j])
    perm = np.random.default_rng(1).permutation(len(tour))
    y = encode_pose_tensor(coords, [tour[i] for i in perm], 2)
    np.testing.assert_array_equal(y[:, :, 0].reshape(7, 2, -1, 3), blocks[:, :, perm])


def test_encoding_rejects_bad_tour():
    with pytest.raises(TopologyError):
        encode_pose_tensor(np.zeros((2, 1, 3, 3)), [0, 5], 1)


# ---------------------------------------------------------------- sampling


def test_sampling_spans():
    assert list(sample_subsequence(20, 20, 0)) == list(range(20))
    idx = sample_subsequence(200, 20, 5)
    assert all(10 * i <= t < 10 * (i + 1) for i, t in enumerate(idx))
    short = sample_subsequence(5, 20, 0)
    assert list(short[:5]) == [0, 1, 2, 3, 4] and set(short[5:]) == {4}
    np.testing.assert_array_equal(sample_subsequence(97, 20, 9), sample_subsequence(97, 20, 9))
    with pytest.raises(ValueError):
        sample_subsequence(10, 0, 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 500), st.integers(1, 40), st.integers(0, 2**31))
def test_sampling_is_nondecreasing_and_in_range(length, t, seed):
    idx = sample_subsequence(length, t, seed)
    assert len(idx) == t
    assert np.all(np.diff(idx) >= 0)
    assert idx.min() >= 0 and idx.max() < length


# ---------------------------------------------------------------- remapping


def test_remap_identity_and_midpoints(rng):
    desk = load_topology("desk12")
    seq = SkeletonSequence(rng.normal(size=(3, 1, 12, 3)), np.ones((3, 1), bool))
    same = remap_topology(seq, desk, desk)
    np.testing.assert_array_equal(same.coords, seq.coords)

    toy = SkeletonTopology(
        15, tuple((0, i) for i in range(1, 15)), 0, tuple(f"j{i}" for i in range(15))
    )
    ntu = load_topology("ntu25")
    rules = {n: f"j{i % 15}" for i, n in enumerate(ntu.names)}
    rules[ntu.names[24]] = ("j3", "j7")
    seq = SkeletonSequence(rng.normal(size=(2, 1, 15, 3)), np.ones((2, 1), bool))
    out = remap_topology(seq, toy, ntu, rules)
    assert out.coords.shape == (2, 1, 25, 3)
    np.testing.assert_allclose(out.coords[:, :, 24], 0.5 * (seq.coords[:, :, 3] + seq.coords[:, :, 7]))
    del rules[ntu.names[5]]
    with pytest.raises(TopologyError, match=ntu.names[5]):
        remap_topology(seq, toy, ntu, rules)


def test_parse_joint_map():
    m = parse_joint_map("# comment\nhead = top\nspine_mid = mid(hip, neck)\n")
    assert m == {"head": "top", "spine_mid": ("hip", "neck")}
    with pytest.raises(SkeletonFormatError):
        parse_joint_map("head top")


# ---------------------------------------------------------------- files


def test_topology_file_round_trip(tmp_path):
    for name in ("ntu25", "desk12"):
        topo = load_topology(name)
        write_topology(tmp_path / f"{name}.topo", topo)
        back = read_topology(tmp_path / f"{name}.topo")
        assert back == topo and build_euler_tour(back) == build_euler_tour(topo)
        assert load_topology(str(tmp_path / f"{name}.topo")) == topo
    with pytest.raises(SkeletonFormatError):
        parse_topology("joints=2\n0 1\n")


def test_skeleton_file_round_trip_and_truncation(tmp_path, rng):
    seq = SkeletonSequence(
        rng.normal(size=(3, 2, 4, 3)), np.array([[True, False]] * 3), rng.normal(size=(3, 2, 4, 2)) * 100
    )
    seq.coords[:, 1] = 0
    path = tmp_path / "v.skel"
    write_skeleton(path, seq)
    back = read_skeleton(path)
    np.testing.assert_array_equal(back.coords, seq.coords)
    np.testing.assert_array_equal(back.pixels, seq.pixels)
    np.testing.assert_array_equal(back.present, seq.present)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-5]) + "\n")
    with pytest.raises(SkeletonFormatError, match=r"v\.skel.*frames=3"):
        read_skeleton(path)
