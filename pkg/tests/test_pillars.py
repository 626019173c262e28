import numpy as np
import pytest
import torch

from pillartrack.pillars import (
    CAR_SEARCH_PILLARS,
    CAR_TEMPLATE_PILLARS,
    DECORATED_DIM,
    PillarConfig,
    PillarFeatureNet,
    PillarTensor,
    PointCloud,
    crop_points,
    pillarize,
)

AREA = (-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)
CFG = PillarConfig(area=AREA, pillar_size=(0.5, 0.5, 2.0), max_points_per_pillar=4,
                   max_pillars=16)


def random_cloud(rng, n, area=AREA):
    x0, y0, z0, x1, y1, z1 = area
    pts = np.column_stack([
        rng.uniform(x0, x1, n),
        rng.uniform(y0, y1, n),
        rng.uniform(z0, z1, n),
        rng.uniform(0, 1, n),
    ])
    return PointCloud(pts)


class TestPointCloud:
    def test_empty_is_legal(self):
        pc = PointCloud.empty()
        assert len(pc) == 0
        assert pc.points.shape == (0, 4)

    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((3, 3)))

    def test_rejects_non_finite(self):
        pts = np.zeros((2, 4))
        pts[1, 2] = np.nan
        with pytest.raises(ValueError):
            PointCloud(pts)


class TestCropPoints:
    def test_all_inside_identity(self):
        rng = np.random.default_rng(0)
        pc = random_cloud(rng, 50)
        out = crop_points(pc, AREA)
        np.testing.assert_array_equal(out.points, pc.points)

    def test_all_outside_empty(self):
        pc = PointCloud(np.array([[5.0, 5.0, 5.0, 0.0], [-9, 0, 0, 1]]))
        assert len(crop_points(pc, AREA)) == 0

    def test_matches_per_point_oracle(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(-2, 2, size=(300, 4))
        pc = PointCloud(pts)
        out = crop_points(pc, AREA)
        keep = []
        for p in pts:
            inside = all(lo <= v < hi for v, lo, hi in
                         zip(p[:3], AREA[:3], AREA[3:]))
            if inside:
                keep.append(p)
        np.testing.assert_array_equal(out.points, np.array(keep).reshape(-1, 4))

    def test_max_boundary_excluded(self):
        pc = PointCloud(np.array([[1.0, 0.0, 0.0, 0.0], [-1.0, 0.0, 0.0, 0.0]]))
        out = crop_points(pc, AREA)
        # x = 1.0 sits on the max face and is dropped; x = -1.0 on min is kept
        assert len(out) == 1
        assert out.points[0, 0] == -1.0


class TestPillarize:
    def test_single_point_decoration(self):
        pc = PointCloud(np.array([[0.3, -0.6, 0.2, 0.5]]))
        pt = pillarize(pc, CFG, seed=0)
        assert pt.num_pillars == 1
        assert pt.mask.sum() == 1
        row, col = pt.coords[0]
        # cell (row 0, col 2): x in [0, 0.5), y in [-1, -0.5)
        assert (row, col) == (0, 2)
        feat = pt.features[0, 0]
        np.testing.assert_allclose(feat[0:4], [0.3, -0.6, 0.2, 0.5])
        np.testing.assert_allclose(feat[4:7], 0.0, atol=1e-15)  # mean offsets
        np.testing.assert_allclose(feat[7:10], [0.3 - 0.25, -0.6 + 0.75, 0.2], atol=1e-12)

    def test_conservation_without_caps(self):
        rng = np.random.default_rng(2)
        cfg = PillarConfig(area=AREA, pillar_size=(0.5, 0.5, 2.0),
                           max_points_per_pillar=1000, max_pillars=1000)
        pc = random_cloud(rng, 137)
        pt = pillarize(pc, cfg, seed=0)
        assert pt.mask.sum() == 137

    def test_partition_property(self):
        rng = np.random.default_rng(3)
        cfg = PillarConfig(area=AREA, pillar_size=(0.5, 0.5, 2.0),
                           max_points_per_pillar=1000, max_pillars=1000)
        for _ in range(20):
            pc = random_cloud(rng, int(rng.integers(0, 80)))
            pt = pillarize(pc, cfg, seed=0)
            # brute-force occupancy: every in-area point maps to one cell
            counts = {}
            for p in pc.points:
                col = int(np.floor((p[0] + 1.0) / 0.5))
                row = int(np.floor((p[1] + 1.0) / 0.5))
                counts[(row, col)] = counts.get((row, col), 0) + 1
            got = {tuple(c): int(m.sum()) for c, m in zip(pt.coords, pt.mask)}
            assert got == counts

    def test_overflow_drop_is_seeded(self):
        pc = PointCloud(np.array([
            [0.1, 0.1, 0.0, 1.0],
            [0.2, 0.2, 0.0, 2.0],
        ]))
        cfg = PillarConfig(area=AREA, pillar_size=(0.5, 0.5, 2.0),
                           max_points_per_pillar=1, max_pillars=16)
        first = pillarize(pc, cfg, seed=7)
        again = pillarize(pc, cfg, seed=7)
        assert first.mask.sum() == 1
        np.testing.assert_array_equal(first.features, again.features)
        np.testing.assert_array_equal(first.coords, again.coords)

    def test_max_pillars_cap_is_seeded(self):
        rng = np.random.default_rng(4)
        cfg = PillarConfig(area=AREA, pillar_size=(0.5, 0.5, 2.0),
                           max_points_per_pillar=8, max_pillars=3)
        pc = random_cloud(rng, 60)
        a = pillarize(pc, cfg, seed=11)
        b = pillarize(pc, cfg, seed=11)
        assert a.num_pillars == 3
        np.testing.assert_array_equal(a.coords, b.coords)
        np.testing.assert_array_equal(a.features, b.features)

    def test_masked_rows_are_zero(self):
        rng = np.random.default_rng(5)
        pt = pillarize(random_cloud(rng, 30), CFG, seed=0)
        assert np.all(pt.features[~pt.mask] == 0.0)

    def test_car_preset_grid(self):
        assert CAR_SEARCH_PILLARS.grid_shape == (64, 64)
        assert CAR_TEMPLATE_PILLARS.grid_shape == (32, 32)


class TestPillarConfig:
    def test_rejects_non_integral_grid(self):
        with pytest.raises(ValueError):
            PillarConfig(area=(-1, -1, -1, 1.1, 1, 1), pillar_size=(0.5, 0.5, 2.0))

    def test_rejects_partial_z(self):
        with pytest.raises(ValueError):
            PillarConfig(area=AREA, pillar_size=(0.5, 0.5, 1.0))


class TestPillarFeatureNet:
    def test_empty_input_zero_map(self):
        net = PillarFeatureNet(out_channels=8)
        bev = net(pillarize(PointCloud.empty(), CFG, seed=0))
        assert bev.shape == (8, 4, 4)
        assert torch.all(bev.tensor == 0)

    def test_single_pillar_hand_trace(self):
        torch.manual_seed(0)
        net = PillarFeatureNet(out_channels=3)
        pc = PointCloud(np.array([[0.3, -0.6, 0.2, 0.5]]))
        pt = pillarize(pc, CFG, seed=0)
        bev = net(pt)
        feat = torch.as_tensor(pt.features[0, 0], dtype=torch.float64)
        expected = torch.relu(net.linear(feat))
        row, col = pt.coords[0]
        torch.testing.assert_close(bev.tensor[:, row, col], expected)
        # all other cells untouched
        total = bev.tensor.abs().sum()
        torch.testing.assert_close(total, expected.abs().sum())

    def test_permutation_invariance(self):
        rng = np.random.default_rng(6)
        torch.manual_seed(1)
        net = PillarFeatureNet(out_channels=8)
        pc = random_cloud(rng, 40)
        pt = pillarize(pc, CFG, seed=0)
        out1 = net(pt).tensor
        # shuffle points within each pillar
        perm_feats = pt.features.copy()
        perm_mask = pt.mask.copy()
        for i in range(pt.num_pillars):
            n = int(pt.mask[i].sum())
            perm = rng.permutation(n)
            perm_feats[i, :n] = pt.features[i, :n][perm]
        out2 = net(PillarTensor(perm_feats, pt.coords, perm_mask, pt.grid_shape)).tensor
        torch.testing.assert_close(out1, out2)

    def test_gradient_matches_finite_differences(self):
        from conftest import check_parameter_gradients

        rng = np.random.default_rng(7)
        torch.manual_seed(2)
        net = PillarFeatureNet(out_channels=4)
        pt = pillarize(random_cloud(rng, 25), CFG, seed=0)
        proj = torch.randn(4, 4, 4, dtype=torch.float64)
        rel = check_parameter_gradients(net, lambda m: (m(pt).tensor * proj).sum())
        assert rel < 1e-3
