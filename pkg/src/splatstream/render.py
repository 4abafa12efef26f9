"""Reference splatting renderer and image-quality metrics.

Primitives are projected through a pinhole camera with a local affine
(EWA-style) covariance, then alpha-composited front to back. Colors come from
the zero-order SH coefficients only. Deliberately simple and pure: the output
feeds PSNR/SSIM ground truth for the QoE model, not a display path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d
from shapely.geometry import MultiPoint, box

from .gaussians import ValidationError, quat_to_matrix

SH0_BASIS = 0.28209479177387814
Z_NEAR = 1e-2
ALPHA_CUTOFF = 1.0 / 1024.0
PSNR_CAP_DB = 100.0


@dataclass
class Camera:
    position: np.ndarray      # (3,)
    pitch: float              # radians
    yaw: float
    roll: float
    hfov: float               # radians, horizontal
    vfov: float
    width: int = 256
    height: int = 256

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        if not (0.0 < self.hfov < np.pi and 0.0 < self.vfov < np.pi):
            raise ValidationError("field of view must lie in (0, pi)")
        if self.width < 16 or self.height < 16:
            raise ValidationError("image must be at least 16x16")

    def rotation_camera_to_world(self):
        cy, sy = np.cos(self.yaw), np.sin(self.yaw)
        cp, sp = np.cos(self.pitch), np.sin(self.pitch)
        cr, sr = np.cos(self.roll), np.sin(self.roll)
        ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
        rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
        return ry @ rx @ rz

    def world_to_camera(self, points):
        rot = self.rotation_camera_to_world().T
        return (np.atleast_2d(points) - self.position) @ rot.T

    def focal(self):
        fx = (self.width / 2.0) / np.tan(self.hfov / 2.0)
        fy = (self.height / 2.0) / np.tan(self.vfov / 2.0)
        return fx, fy

    def project(self, cam_points):
        """Camera-space points (z forward) to pixel coordinates."""
        fx, fy = self.focal()
        z = cam_points[:, 2]
        u = fx * cam_points[:, 0] / z + self.width / 2.0
        v = fy * cam_points[:, 1] / z + self.height / 2.0
        return np.stack([u, v], axis=1)


def look_at(eye, target, width=256, height=256, hfov=np.pi / 3, vfov=np.pi / 3):
    """Camera at `eye` facing `target` with zero roll."""
    eye = np.asarray(eye, dtype=np.float64)
    d = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(d)
    if norm < 1e-12:
        raise ValidationError("look_at target coincides with eye")
    d = d / norm
    yaw = float(np.arctan2(d[0], d[2]))
    pitch = float(np.arctan2(-d[1], np.hypot(d[0], d[2])))
    return Camera(eye, pitch, yaw, 0.0, hfov, vfov, width, height)


def sh0_color(sh0):
    """View-independent color from zero-order SH coefficients, clamped."""
    return np.clip(0.5 + SH0_BASIS * np.asarray(sh0, dtype=np.float64), 0.0, 1.0)


@dataclass
class RenderStats:
    skipped_degenerate: int = 0
    drawn: int = 0


def render(cloud, camera, indices=None, return_stats=False):
    """Front-to-back alpha compositing of the selected primitives."""
    h, w = camera.height, camera.width
    image = np.zeros((h, w, 3), dtype=np.float64)
    transmittance = np.ones((h, w), dtype=np.float64)
    stats = RenderStats()
    idx = np.arange(len(cloud)) if indices is None else np.asarray(indices, dtype=np.intp)
    if len(idx) == 0:
        return (image, stats) if return_stats else image

    positions = cloud.positions[idx]
    if not np.all(np.isfinite(positions)):
        raise ValidationError("non-finite primitive positions")
    cam_pts = camera.world_to_camera(positions)
    in_front = cam_pts[:, 2] > Z_NEAR
    idx, cam_pts = idx[in_front], cam_pts[in_front]
    if len(idx) == 0:
        return (image, stats) if return_stats else image

    # Depth order independent of the caller's primitive order.
    order = np.lexsort((cam_pts[:, 1], cam_pts[:, 0], cam_pts[:, 2]))
    idx, cam_pts = idx[order], cam_pts[order]

    fx, fy = camera.focal()
    rot_wc = camera.rotation_camera_to_world().T
    ys, xs = np.mgrid[0:h, 0:w]

    for k in range(len(idx)):
        i = idx[k]
        x, y, z = cam_pts[k]
        rot = quat_to_matrix(cloud.rotations[i])
        cov3 = rot @ np.diag(cloud.scales[i] ** 2) @ rot.T
        cov_cam = rot_wc @ cov3 @ rot_wc.T
        jac = np.array([[fx / z, 0.0, -fx * x / z ** 2],
                        [0.0, fy / z, -fy * y / z ** 2]])
        cov2 = jac @ cov_cam @ jac.T
        det = cov2[0, 0] * cov2[1, 1] - cov2[0, 1] ** 2
        if not np.isfinite(det) or det <= 1e-12 or cov2[0, 0] <= 0 or cov2[1, 1] <= 0:
            stats.skipped_degenerate += 1
            continue
        inv = np.array([[cov2[1, 1], -cov2[0, 1]], [-cov2[0, 1], cov2[0, 0]]]) / det
        center = np.array([fx * x / z + w / 2.0, fy * y / z + h / 2.0])
        radius = 3.5 * np.sqrt(max(cov2[0, 0], cov2[1, 1]))
        x0 = max(0, int(np.floor(center[0] - radius)))
        x1 = min(w, int(np.ceil(center[0] + radius)) + 1)
        y0 = max(0, int(np.floor(center[1] - radius)))
        y1 = min(h, int(np.ceil(center[1] + radius)) + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        dx = xs[y0:y1, x0:x1] - center[0]
        dy = ys[y0:y1, x0:x1] - center[1]
        power = -0.5 * (inv[0, 0] * dx * dx + 2.0 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy)
        alpha = cloud.opacities[i] * np.exp(power)
        mask = alpha > ALPHA_CUTOFF
        if not mask.any():
            continue
        color = sh0_color(cloud.sh0[i])
        contrib = alpha * transmittance[y0:y1, x0:x1]
        image[y0:y1, x0:x1] += contrib[:, :, None] * color
        transmittance[y0:y1, x0:x1] *= 1.0 - alpha
        stats.drawn += 1

    np.clip(image, 0.0, 1.0, out=image)
    return (image, stats) if return_stats else image


def psnr(a, b):
    """Peak signal-to-noise ratio in dB over [0,1] images, capped at 100."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError("psnr requires equal image dimensions")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def to_grayscale(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return 0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]


def _gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(a, b, window_size=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Windowed structural similarity on the grayscale conversion.

    Images smaller than the window fall back to a single global window.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError("ssim requires equal image dimensions")
    ga, gb = to_grayscale(a), to_grayscale(b)
    if min(ga.shape) < window_size:
        mu_a, mu_b = ga.mean(), gb.mean()
        va, vb = ga.var(), gb.var()
        cov = float(np.mean((ga - mu_a) * (gb - mu_b)))
        return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)
                / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
    kernel = _gaussian_window(window_size, sigma)
    mu_a = convolve2d(ga, kernel, mode="valid")
    mu_b = convolve2d(gb, kernel, mode="valid")
    mu_aa = convolve2d(ga * ga, kernel, mode="valid")
    mu_bb = convolve2d(gb * gb, kernel, mode="valid")
    mu_ab = convolve2d(ga * gb, kernel, mode="valid")
    var_a = mu_aa - mu_a ** 2
    var_b = mu_bb - mu_b ** 2
    cov = mu_ab - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)
             / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(score.mean())


def bbox_corners(lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return np.array([[x, y, z] for x in (lo[0], hi[0])
                     for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


def visibility(tile_bbox, camera):
    """Fraction of the tile's projected footprint inside the image.

    The bbox is clipped to the near plane, projected, and its convex hull
    intersected with the image rectangle; 0 when fully behind the camera.
    """
    lo, hi = tile_bbox
    corners = bbox_corners(lo, hi)
    cam_pts = camera.world_to_camera(corners)
    front = cam_pts[:, 2] > Z_NEAR
    if not front.any():
        return 0.0
    pts = [cam_pts[i] for i in range(8) if front[i]]
    # add near-plane crossings so partially-behind boxes project sanely
    edges = [(a, b) for a in range(8) for b in range(a + 1, 8)
             if bin(a ^ b).count("1") == 1]
    for a, b in edges:
        if front[a] != front[b]:
            pa, pb = cam_pts[a], cam_pts[b]
            t = (Z_NEAR * 1.001 - pa[2]) / (pb[2] - pa[2])
            pts.append(pa + t * (pb - pa))
    proj = camera.project(np.array(pts))
    hull = MultiPoint([tuple(p) for p in proj]).convex_hull
    if hull.is_empty or hull.area < 1e-12:
        inside = [(0 <= p[0] <= camera.width and 0 <= p[1] <= camera.height) for p in proj]
        return float(np.mean(inside)) if inside else 0.0
    frame = box(0.0, 0.0, float(camera.width), float(camera.height))
    return float(hull.intersection(frame).area / hull.area)


def write_ppm(path, image):
    """Binary PPM (P6, 8-bit) for quick inspection of rendered frames."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise ValidationError(f"{path}: not a binary PPM")
        dims = fh.readline().split()
        maxval = int(fh.readline())
        w, h = int(dims[0]), int(dims[1])
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / float(maxval)
