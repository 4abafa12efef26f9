import numpy as np
import pytest

from splatstream import render as rd
from splatstream.gaussians import GaussianCloud, ValidationError


def single_gaussian_cloud(position=(0, 0, 0), scale=0.5, opacity=1.0, sh0=(1.0, 0.5, -0.5)):
    return GaussianCloud(np.array([position], float), np.array([[1, 0, 0, 0]], float),
                         np.full((1, 3), scale), np.array([opacity]),
                         np.array([sh0], dtype=float))


def front_camera(dist=5.0, size=64):
    return rd.Camera(np.array([0.0, 0.0, -dist]), 0.0, 0.0, 0.0,
                     np.pi / 3, np.pi / 3, size, size)


def test_render_empty_scene_black():
    cloud = single_gaussian_cloud()
    img = rd.render(cloud, front_camera(), indices=[])
    assert img.shape == (64, 64, 3)
    assert np.all(img == 0.0)


def test_render_single_gaussian_peak_and_falloff():
    cloud = single_gaussian_cloud()
    img = rd.render(cloud, front_camera(size=65))
    cy, cx = 32, 32
    expected = rd.sh0_color(cloud.sh0[0])
    assert np.allclose(img[cy, cx], expected, atol=0.02)
    # monotone falloff along a row moving away from center
    row = img[cy, cx:, 0]
    assert np.all(np.diff(row) <= 1e-12)


def test_render_occlusion_two_term_compositing():
    # near semi-transparent occluder in front of a far primitive
    near = 0.6
    cloud = GaussianCloud(
        np.array([[0, 0, 0], [0, 0, 2.0]]),
        np.tile([1, 0, 0, 0], (2, 1)),
        np.full((2, 3), 0.4),
        np.array([near, 1.0]),
        np.array([[1.0, 1.0, 1.0], [-1.0, -1.0, -1.0]]),
    )
    cam = front_camera(dist=6.0, size=65)
    img = rd.render(cloud, cam)
    c_near = rd.sh0_color(cloud.sh0[0])
    c_far = rd.sh0_color(cloud.sh0[1])
    expected = near * c_near + (1 - near) * 1.0 * c_far
    assert np.allclose(img[32, 32], expected, atol=0.03)


def test_render_permutation_invariance():
    rng = np.random.default_rng(0)
    n = 12
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    cloud = GaussianCloud(rng.uniform(-1, 1, (n, 3)), q, rng.uniform(0.1, 0.5, (n, 3)),
                          rng.uniform(0.2, 1.0, n), rng.uniform(-1, 1, (n, 3)))
    cam = front_camera()
    a = rd.render(cloud, cam)
    perm = rng.permutation(n)
    b = rd.render(cloud, cam, indices=perm)
    assert np.array_equal(a, b)


def test_render_opacity_accumulation_monotone():
    rng = np.random.default_rng(1)
    base = single_gaussian_cloud(opacity=0.5)
    cam = front_camera()
    img1 = rd.render(base, cam)
    two = GaussianCloud(np.array([[0, 0, 0], [0.2, 0.1, 0.5]]),
                        np.tile([1, 0, 0, 0], (2, 1)), np.full((2, 3), 0.5),
                        np.array([0.5, 0.7]), np.ones((2, 3)))
    img2 = rd.render(two, cam)
    # adding a bright primitive never darkens pixels when all colors are max
    assert np.all(img2 >= img1 - 1e-12)


def test_render_behind_camera_skipped():
    cloud = single_gaussian_cloud(position=(0, 0, -10))
    img = rd.render(cloud, front_camera(dist=5.0))
    assert np.all(img == 0.0)


def test_psnr_examples():
    a = np.zeros((16, 16, 3))
    assert rd.psnr(a, a) == 100.0
    b = np.full((16, 16, 3), 0.1)
    assert rd.psnr(a, b) == pytest.approx(20.0)
    c = np.full((16, 16, 3), 0.01)
    assert rd.psnr(a, c) == pytest.approx(40.0)
    assert rd.psnr(b, a) == rd.psnr(a, b)
    with pytest.raises(ValidationError):
        rd.psnr(a, np.zeros((8, 8, 3)))


def test_ssim_identical_is_exactly_one():
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 1, (32, 32, 3))
    assert rd.ssim(img, img) == 1.0


def test_ssim_inverted_checkerboard_low():
    yy, xx = np.mgrid[0:32, 0:32]
    checker = ((xx // 4 + yy // 4) % 2).astype(float)
    img = np.stack([checker] * 3, axis=-1)
    assert rd.ssim(img, 1.0 - img) < 0.2


def test_ssim_constant_shift_closed_form():
    mu = 0.4
    delta = 0.05
    a = np.full((8, 8), mu)
    b = np.full((8, 8), mu + delta)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    expected = ((2 * mu * (mu + delta) + c1) * c2) / ((mu ** 2 + (mu + delta) ** 2 + c1) * c2)
    assert rd.ssim(a, b) == pytest.approx(expected, abs=1e-12)


def test_ssim_small_image_uses_global_window():
    a = np.random.default_rng(3).uniform(0, 1, (8, 8))
    assert rd.ssim(a, a) == pytest.approx(1.0)


def test_visibility_centered():
    cam = rd.look_at([0, 0, -5], [0, 0, 0])
    assert rd.visibility((np.array([-0.5] * 3), np.array([0.5] * 3)), cam) == pytest.approx(1.0)


def test_visibility_behind():
    cam = rd.look_at([0, 0, -5], [0, 0, 0])
    bbox = (np.array([-0.5, -0.5, -8.0]), np.array([0.5, 0.5, -7.0]))
    assert rd.visibility(bbox, cam) == 0.0


def test_visibility_half_overlap_monte_carlo():
    cam = rd.Camera(np.array([0.0, 0.0, -5.0]), 0.0, 0.0, 0.0,
                    np.pi / 2, np.pi / 2, 128, 128)
    # box straddling the right image edge: center x chosen so roughly half
    # of the projected footprint is outside
    half = 0.15
    edge_x = 5.0 * np.tan(np.pi / 4)  # world x mapping to image border at z=0
    bbox = (np.array([edge_x - half, -half, -half]), np.array([edge_x + half, half, half]))
    v = rd.visibility(bbox, cam)

    # Monte-Carlo oracle: project random surface points, fraction inside frame
    rng = np.random.default_rng(7)
    pts = rng.uniform(bbox[0], bbox[1], (20000, 3))
    cam_pts = cam.world_to_camera(pts)
    proj = cam.project(cam_pts)
    inside = ((proj[:, 0] >= 0) & (proj[:, 0] <= 128) & (proj[:, 1] >= 0) & (proj[:, 1] <= 128))
    oracle = inside.mean()
    assert abs(v - oracle) < 0.05
    assert abs(v - 0.5) < 0.1


def test_compositing_weight_bound():
    # accumulated alpha cannot exceed 1: white primitives over black bg
    rng = np.random.default_rng(5)
    n = 10
    cloud = GaussianCloud(rng.uniform(-0.5, 0.5, (n, 3)), np.tile([1, 0, 0, 0], (n, 1)),
                          np.full((n, 3), 0.4), np.ones(n),
                          np.full((n, 3), 10.0))  # clamps to color 1.0
    img = rd.render(cloud, front_camera())
    assert np.all(img <= 1.0 + 1e-12)


def test_ppm_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    img = rng.uniform(0, 1, (20, 24, 3))
    path = tmp_path / "frame.ppm"
    rd.write_ppm(path, img)
    back = rd.read_ppm(path)
    assert back.shape == img.shape
    assert np.allclose(back, img, atol=1.0 / 255.0)


def test_camera_validation():
    with pytest.raises(ValidationError):
        rd.Camera(np.zeros(3), 0, 0, 0, 0.0, 1.0, 64, 64)
    with pytest.raises(ValidationError):
        rd.Camera(np.zeros(3), 0, 0, 0, 1.0, 1.0, 8, 64)


def test_look_at_points_camera_at_target():
    cam = rd.look_at([3.0, 2.0, -4.0], [0.0, 0.0, 0.0], width=64, height=64)
    cam_pts = cam.world_to_camera(np.array([[0.0, 0.0, 0.0]]))
    # target sits on the optical axis, in front
    assert cam_pts[0, 2] > 0
    assert abs(cam_pts[0, 0]) < 1e-9 and abs(cam_pts[0, 1]) < 1e-9
