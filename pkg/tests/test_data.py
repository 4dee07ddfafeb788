import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coseg3d.data import (
    BinaryMask,
    KWayLabeling,
    PointCloud,
    ShapeSet,
    knn,
    load_labeling,
    load_pointcloud,
    normalize_points,
    radius_neighbors,
    save_labeling,
    save_pointcloud,
)

RNG = np.random.default_rng(7)


def random_cloud(n=40, seed=0):
    pts, _ = normalize_points(np.random.default_rng(seed).normal(size=(n, 3)))
    return PointCloud(points=pts, id=f"rand{seed}")


class TestNormalization:
    def test_cube_corners(self):
        corners = np.array(
            [[x, y, z] for x in (0, 2) for y in (0, 2) for z in (0, 2)], float
        )
        pts, transform = normalize_points(corners)
        np.testing.assert_allclose(pts.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(pts, axis=1).max(), 1.0, atol=1e-12)
        np.testing.assert_allclose(transform.invert(pts), corners, atol=1e-12)

    def test_idempotent(self):
        for seed in range(10):
            raw = np.random.default_rng(seed).normal(size=(30, 3)) * 5 + 2
            once, _ = normalize_points(raw)
            twice, _ = normalize_points(once)
            assert np.abs(twice - once).max() <= 1e-9

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            normalize_points(np.ones((10, 3)))

    def test_cloud_validation(self):
        pts, _ = normalize_points(RNG.normal(size=(20, 3)))
        with pytest.raises(ValueError):
            PointCloud(points=pts[:5])  # too few
        with pytest.raises(ValueError):
            PointCloud(points=pts + 3.0)  # not centered
        with pytest.raises(ValueError):
            PointCloud(points=pts * 5.0)  # not unit-scaled
        bad = np.array(pts)
        bad[0, 0] = np.nan
        with pytest.raises(ValueError):
            PointCloud(points=bad)

    def test_points_read_only(self):
        cloud = random_cloud()
        with pytest.raises(ValueError):
            cloud.points[0, 0] = 9.0


class TestCloudIO:
    def test_round_trip(self, tmp_path):
        cloud = random_cloud(50, seed=3)
        p = tmp_path / "c.xyz"
        save_pointcloud(cloud, p)
        back, _ = load_pointcloud(p)
        assert np.abs(back.points - cloud.points).max() <= 1e-9

    def test_malformed_line_names_lineno(self, tmp_path):
        p = tmp_path / "bad.xyz"
        p.write_text("0 0 0\n1 1 1\n1 2\n")
        with pytest.raises(ValueError, match="line 3"):
            load_pointcloud(p)

    def test_non_numeric_field(self, tmp_path):
        p = tmp_path / "bad.xyz"
        p.write_text("0 0 0\n1 x 1\n")
        with pytest.raises(ValueError, match="line 2"):
            load_pointcloud(p)

    def test_too_few_points(self, tmp_path):
        p = tmp_path / "tiny.xyz"
        p.write_text("0 0 0\n1 0 0\n0 1 0\n")
        with pytest.raises(ValueError, match=">= 8"):
            load_pointcloud(p)

    def test_blank_lines_skipped(self, tmp_path):
        cloud = random_cloud(12, seed=5)
        p = tmp_path / "c.xyz"
        lines = [f"{float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in cloud.points]
        lines.insert(4, "")
        lines.append("")
        p.write_text("\n".join(lines) + "\n")
        back, _ = load_pointcloud(p)
        assert back.n_points == 12


class TestLabelIO:
    def test_tiny_round_trip(self, tmp_path):
        lab = KWayLabeling(labels=np.array([0, 1, 0]), k_bound=2)
        p = tmp_path / "l.labels"
        save_labeling(lab, p)
        assert p.read_text() == "0\n1\n0\n"
        back = load_labeling(p)
        np.testing.assert_array_equal(back.labels, lab.labels)

    def test_negative_rejected(self, tmp_path):
        p = tmp_path / "l.labels"
        p.write_text("0\n-1\n")
        with pytest.raises(ValueError, match="negative"):
            load_labeling(p)

    def test_large_round_trip_byte_identical(self, tmp_path):
        labels = np.random.default_rng(0).integers(0, 4, size=2048)
        lab = KWayLabeling(labels=labels, k_bound=4)
        p1, p2 = tmp_path / "a.labels", tmp_path / "b.labels"
        save_labeling(lab, p1)
        save_labeling(load_labeling(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_association_check(self):
        cloud = random_cloud(20)
        with pytest.raises(ValueError):
            KWayLabeling(labels=np.zeros(19, int), k_bound=1).check_for(cloud)
        with pytest.raises(ValueError):
            BinaryMask(flags=np.zeros(21, bool)).check_for(cloud)

    def test_label_range_enforced(self):
        with pytest.raises(ValueError):
            KWayLabeling(labels=np.array([0, 3]), k_bound=3)
        with pytest.raises(ValueError):
            KWayLabeling(labels=np.array([-1, 0]), k_bound=3)


class TestShapeSet:
    def test_needs_two_shapes(self):
        with pytest.raises(ValueError):
            ShapeSet(shapes=[random_cloud()])

    def test_ground_truth_alignment(self):
        clouds = [random_cloud(20, seed=s) for s in (0, 1)]
        good = [KWayLabeling(labels=np.zeros(20, int), k_bound=2) for _ in clouds]
        ShapeSet(shapes=clouds, ground_truth=good)
        bad = [KWayLabeling(labels=np.zeros(19, int), k_bound=2), good[1]]
        with pytest.raises(ValueError):
            ShapeSet(shapes=clouds, ground_truth=bad)


def brute_radius(cloud, center, radius):
    d = [float(np.linalg.norm(cloud.points[i] - cloud.points[center])) for i in range(cloud.n_points)]
    hits = [i for i in range(cloud.n_points) if d[i] <= radius]
    return sorted(hits, key=lambda i: (d[i], i))


def brute_knn(cloud, center, k):
    d = [float(np.linalg.norm(cloud.points[i] - cloud.points[center])) for i in range(cloud.n_points)]
    return sorted(range(cloud.n_points), key=lambda i: (d[i], i))[:k]


class TestNeighborQueries:
    def test_radius_covers_everything(self):
        cloud = random_cloud(30)
        idx = radius_neighbors(cloud, 4, radius=10.0)
        assert sorted(idx.tolist()) == list(range(30))
        assert idx[0] == 4  # center at distance 0 comes first

    def test_knn_one_is_center(self):
        cloud = random_cloud(30)
        assert knn(cloud, 11, 1).tolist() == [11]

    def test_invalid_args(self):
        cloud = random_cloud(10)
        with pytest.raises(ValueError):
            radius_neighbors(cloud, 0, radius=0.0)
        with pytest.raises(ValueError):
            knn(cloud, 0, 0)
        with pytest.raises(ValueError):
            knn(cloud, 0, 11)

    def test_matches_brute_force(self):
        # 200 random queries across clouds, radii, and k values
        rng = np.random.default_rng(42)
        for trial in range(200):
            cloud = random_cloud(n=int(rng.integers(8, 60)), seed=int(rng.integers(1000)))
            c = int(rng.integers(cloud.n_points))
            r = float(rng.uniform(0.05, 2.2))
            assert radius_neighbors(cloud, c, r).tolist() == brute_radius(cloud, c, r)
            k = int(rng.integers(1, cloud.n_points + 1))
            assert knn(cloud, c, k).tolist() == brute_knn(cloud, c, k)

    def test_tie_break_by_index(self):
        # duplicate points force exact distance ties
        base = np.random.default_rng(3).normal(size=(10, 3))
        raw = np.concatenate([base, base[:3]])  # rows 10,11,12 duplicate 0,1,2
        pts, _ = normalize_points(raw)
        cloud = PointCloud(points=pts)
        out = knn(cloud, 0, 2).tolist()
        assert out == [0, 10]
