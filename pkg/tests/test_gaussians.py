import numpy as np
import pytest

from splatstream import gaussians as gs


def make_primitive(position=(0, 0, 0), rotation=(1, 0, 0, 0), scale=(1, 1, 1),
                   opacity=1.0, sh0=(0, 0, 0)):
    return gs.GaussianPrimitive(np.array(position, dtype=float),
                                np.array(rotation, dtype=float),
                                np.array(scale, dtype=float),
                                opacity, np.array(sh0, dtype=float))


def random_cloud(n, seed=0, spread=1.0):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return gs.GaussianCloud(
        rng.uniform(-spread, spread, (n, 3)),
        q,
        rng.uniform(0.05, 1.5, (n, 3)),
        rng.uniform(0.0, 1.0, n),
        rng.uniform(-1.0, 1.0, (n, 3)),
    )


def test_covariance_identity():
    g = make_primitive()
    assert np.allclose(gs.covariance(g), np.eye(3))


def test_covariance_axis_aligned():
    g = make_primitive(scale=(2, 1, 1))
    assert np.allclose(gs.covariance(g), np.diag([4.0, 1.0, 1.0]))


def test_covariance_rotated_matches_matrix_oracle():
    # 90 degree rotation about z
    q = np.array([np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4)])
    g = make_primitive(rotation=q, scale=(2, 1, 1))
    rot = gs.quat_to_matrix(q)
    oracle = rot @ np.diag([4.0, 1.0, 1.0]) @ rot.T
    got = gs.covariance(g)
    assert np.allclose(got, oracle)
    assert np.allclose(got, np.diag([1.0, 4.0, 1.0]), atol=1e-12)


def test_covariance_rejects_nonfinite():
    g = make_primitive()
    g.position = np.array([np.nan, 0.0, 0.0])
    with pytest.raises(gs.ValidationError):
        gs.covariance(g)


def test_render_weight_examples():
    assert gs.render_weight(make_primitive()) == pytest.approx(1.0)
    assert gs.render_weight(make_primitive(opacity=0.0, scale=(3, 2, 1))) == 0.0
    assert gs.render_weight(make_primitive(opacity=0.5, scale=(2, 2, 2))) == pytest.approx(4.0)


def test_render_weight_determinant_oracle_random():
    cloud = random_cloud(1000, seed=4)
    fast = gs.render_weights(cloud)
    for i in range(len(cloud)):
        g = cloud.primitive(i)
        oracle = g.opacity * np.sqrt(np.linalg.det(gs.covariance(g)))
        assert abs(fast[i] - oracle) < 1e-9
        assert abs(fast[i] - g.opacity * np.prod(g.scale)) < 1e-9


def make_tile(ids, gof=0, cloud=None):
    lo, hi = (np.zeros(3), np.ones(3)) if cloud is None else cloud.bbox()
    return gs.Tile(id=0, gof_index=gof, bbox=(lo, hi), primitive_ids=np.asarray(ids))


def test_sample_probabilities_uniform_weights():
    cloud = gs.GaussianCloud(np.zeros((4, 3)), np.tile([1, 0, 0, 0], (4, 1)),
                             np.ones((4, 3)), np.full(4, 0.5), np.zeros((4, 3)))
    p = gs.sample_probabilities(make_tile([0, 1, 2, 3]), cloud)
    assert np.allclose(p, 0.25)


def test_sample_probabilities_normalization():
    cloud = gs.GaussianCloud(np.zeros((2, 3)), np.tile([1, 0, 0, 0], (2, 1)),
                             np.stack([np.ones(3), np.cbrt(3.0) * np.ones(3)]),
                             np.ones(2), np.zeros((2, 3)))
    p = gs.sample_probabilities(make_tile([0, 1]), cloud)
    assert np.allclose(p, [0.25, 0.75])


def test_sample_probabilities_zero_weight_fallback():
    cloud = gs.GaussianCloud(np.zeros((5, 3)), np.tile([1, 0, 0, 0], (5, 1)),
                             np.ones((5, 3)), np.zeros(5), np.zeros((5, 3)))
    p = gs.sample_probabilities(make_tile(range(5)), cloud)
    assert np.allclose(p, 0.2)


def test_sample_probabilities_properties():
    cloud = random_cloud(40, seed=8)
    tile = make_tile(np.arange(40), cloud=cloud)
    p = gs.sample_probabilities(tile, cloud)
    assert abs(p.sum() - 1.0) < 1e-9
    w = gs.render_weights(cloud)
    assert np.array_equal(np.argsort(p), np.argsort(w))
    # permutation equivariance
    perm = np.random.default_rng(3).permutation(40)
    p_perm = gs.sample_probabilities(make_tile(perm, cloud=cloud), cloud)
    assert np.allclose(p_perm, p[perm])


def test_adjusted_prune_rate_constants():
    cfg = gs.PruneConfig()
    assert gs.adjusted_prune_rate(0.0, cfg) == pytest.approx(0.15, abs=1e-15)
    assert gs.adjusted_prune_rate(1.0, cfg) == pytest.approx(0.08, abs=1e-15)
    assert gs.adjusted_prune_rate(0.5, cfg) == pytest.approx(0.115, abs=1e-15)
    assert cfg.alpha == pytest.approx(7.0 / 15.0)


def test_adjusted_prune_rate_rejects_out_of_range():
    cfg = gs.PruneConfig()
    for bad in (-0.01, 1.01, np.nan):
        with pytest.raises(gs.ValidationError):
            gs.adjusted_prune_rate(bad, cfg)


def test_prune_config_invariants():
    with pytest.raises(gs.ValidationError):
        gs.PruneConfig(p_base=0.05, p_min=0.08)
    with pytest.raises(gs.ValidationError):
        gs.PruneConfig(ceiling_hi=0.6, ceiling_lo=0.5)


def test_build_ladder_ceilings():
    cloud = random_cloud(200, seed=5)
    tile = make_tile(np.arange(200), cloud=cloud)
    hi = gs.build_ladder(tile, cloud, 1.0)
    lo = gs.build_ladder(tile, cloud, 0.0)
    assert hi.levels[4].cumulative_prune_fraction == pytest.approx(0.30)
    assert lo.levels[4].cumulative_prune_fraction == pytest.approx(0.50)


def test_build_ladder_level1_count():
    cloud = random_cloud(100, seed=6)
    tile = make_tile(np.arange(100), cloud=cloud)
    ladder = gs.build_ladder(tile, cloud, 0.0)
    assert len(ladder.retained(1)) == 85
    assert len(ladder.retained(0)) == 100


def test_build_ladder_nested_and_monotone():
    cloud = random_cloud(120, seed=7)
    tile = make_tile(np.arange(120), cloud=cloud)
    for s in np.linspace(0, 1, 6):
        for seed in (None, 0, 1):
            stochastic = seed is not None
            ladder = gs.build_ladder(tile, cloud, s, seed=seed, stochastic=stochastic)
            for r in range(4):
                a = set(ladder.retained(r))
                b = set(ladder.retained(r + 1))
                assert b.issubset(a)
            c4 = ladder.levels[4].cumulative_prune_fraction
            assert 0.30 - 1e-12 <= c4 <= 0.50 + 1e-12
    # monotone in saliency: higher saliency never retains fewer primitives
    counts = []
    for s in np.linspace(0, 1, 11):
        ladder = gs.build_ladder(tile, cloud, s)
        counts.append([len(ladder.retained(r)) for r in range(1, 5)])
    counts = np.array(counts)
    assert np.all(np.diff(counts, axis=0) >= 0)


def test_build_ladder_removes_lowest_weight_first():
    cloud = random_cloud(50, seed=9)
    tile = make_tile(np.arange(50), cloud=cloud)
    ladder = gs.build_ladder(tile, cloud, 0.5)
    w = gs.render_weights(cloud)
    for r in range(1, 5):
        kept = ladder.retained(r)
        dropped = np.setdiff1d(np.arange(50), kept)
        if len(dropped) and len(kept):
            assert w[dropped].max() <= w[kept].min() + 1e-12


def test_build_ladder_tiny_tile_degrades():
    cloud = random_cloud(3, seed=10)
    tile = make_tile(np.arange(3), cloud=cloud)
    ladder = gs.build_ladder(tile, cloud, 0.0)
    for r in range(5):
        assert len(ladder.retained(r)) >= 1


def test_ladder_size_bookkeeping():
    cloud = random_cloud(100, seed=11)
    tile = make_tile(np.arange(100), cloud=cloud)
    ladder = gs.build_ladder(tile, cloud, 0.5)
    lv0 = ladder.levels[0]
    assert lv0.size_reconstructed_bytes == 100 * 59 * 4
    assert lv0.decode_time_s == pytest.approx(100 * 0.033 / 10_000)
    ladder.set_encoded_bytes(5000)
    for lv in ladder.levels:
        assert lv.size_encoded_bytes <= lv.size_reconstructed_bytes
        assert lv.size_encoded_bytes <= 5000 + gs.ENCODED_HEADER_BYTES


def test_normalize_scores():
    s = gs.normalize_scores([1.0, 3.0, 2.0])
    assert np.allclose(s, [0.0, 1.0, 0.5])
    assert np.allclose(gs.normalize_scores([2.0, 2.0]), 0.5)


def test_quaternion_helpers():
    q90 = np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])
    q180 = gs.quat_multiply(q90, q90)
    assert np.allclose(gs.quat_to_matrix(q180), gs.quat_to_matrix([0, 0, 0, 1]), atol=1e-12)
    with pytest.raises(gs.ValidationError):
        gs.quat_normalize([0, 0, 0, 0])


def test_primitive_validation():
    with pytest.raises(gs.ValidationError):
        make_primitive(rotation=(1, 1, 0, 0)).validate()
    with pytest.raises(gs.ValidationError):
        make_primitive(scale=(0, 1, 1)).validate()
    with pytest.raises(gs.ValidationError):
        make_primitive(opacity=1.5).validate()


def test_scene_io_roundtrip(tmp_path):
    cloud = random_cloud(25, seed=12)
    for name in ("scene.gsc", "scene.csv"):
        path = tmp_path / name
        gs.write_scene(path, cloud)
        back = gs.read_scene(path)
        assert len(back) == 25
        assert np.allclose(back.positions, cloud.positions, atol=1e-5)
        assert np.allclose(back.opacities, cloud.opacities, atol=1e-6)
        assert np.allclose(np.abs(np.sum(back.rotations * cloud.rotations, axis=1)), 1.0, atol=1e-6)


def test_scene_io_malformed_text(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1,2,3\n")
    with pytest.raises(gs.ValidationError):
        gs.read_scene(path)
