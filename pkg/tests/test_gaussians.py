import numpy as np
import pytest
import torch

from helpers import front_camera, random_gaussians
from voxsplat.gaussians import (LOWPASS, SH_C1, Gaussians, build_covariance, cov2d_inverse, gaussian_weight,
                                project_covariance, project_gaussians, screen_bounds, sh_colors)
from voxsplat.geometry import Pose, projection_jacobian, quat_to_rotmat, world_to_camera

J0 = torch.tensor([[1.0, 0, 0], [0, 1, 0]], dtype=torch.float64)


def random_rotation(rng):
    return quat_to_rotmat(rng.normal(size=4)).numpy()


class TestBuildCovariance:
    def test_identity(self):
        cov = build_covariance(torch.tensor([1.0, 0, 0, 0]), torch.ones(3, dtype=torch.float64))
        np.testing.assert_array_equal(cov.numpy(), np.eye(3))

    def test_squared_scales(self):
        cov = build_covariance(torch.tensor([1.0, 0, 0, 0]), torch.tensor([2.0, 1.0, 1.0]))
        np.testing.assert_array_equal(cov.numpy(), np.diag([4.0, 1, 1]))

    def test_eigenvalues_are_squared_scales(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            s = rng.uniform(0.1, 3.0, 3)
            cov = build_covariance(torch.tensor(rng.normal(size=4)), torch.tensor(s)).numpy()
            np.testing.assert_allclose(np.linalg.eigvalsh(cov), np.sort(s**2), atol=1e-9)

    def test_exactly_symmetric_and_pd(self):
        rng = np.random.default_rng(1)
        cov = build_covariance(torch.tensor(rng.normal(size=(200, 4))), torch.tensor(rng.uniform(1e-3, 2, (200, 3))))
        assert torch.equal(cov, cov.transpose(-1, -2))
        assert (torch.linalg.eigvalsh(cov) > 0).all()

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError):
            build_covariance(torch.tensor([1.0, 0, 0, 0]), torch.tensor([1.0, 0.0, 1.0]))


class TestProjectCovariance:
    def test_identity_case(self):
        out = project_covariance(torch.eye(3, dtype=torch.float64), Pose.identity(), J0)
        np.testing.assert_allclose(out.numpy(), (1 + LOWPASS) * np.eye(2), rtol=1e-15)

    def test_isotropic_rotation_invariance(self):
        rng = np.random.default_rng(2)
        cov = 2.5 * torch.eye(3, dtype=torch.float64)
        ref = project_covariance(cov, Pose.identity(), J0)
        for _ in range(10):
            out = project_covariance(cov, Pose(random_rotation(rng), rng.normal(size=3)), J0)
            np.testing.assert_allclose(out.numpy(), ref.numpy(), atol=1e-12)

    def test_matches_dense_product(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = rng.normal(size=(3, 3))
            cov = a @ a.T
            pose = Pose(random_rotation(rng), rng.normal(size=3))
            jac = rng.normal(size=(2, 3))
            ref = np.zeros((2, 2))
            m = jac @ pose.rotation
            for i in range(2):
                for j in range(2):
                    for k in range(3):
                        for l in range(3):
                            ref[i, j] += m[i, k] * cov[k, l] * m[j, l]
            out = project_covariance(torch.tensor(cov), pose, torch.tensor(jac), lowpass=0.0)
            np.testing.assert_allclose(out.numpy(), ref, atol=1e-12)

    def test_linear_in_sigma(self):
        rng = np.random.default_rng(4)
        pose = Pose(random_rotation(rng), rng.normal(size=3))
        jac = torch.tensor(rng.normal(size=(2, 3)))
        s1, s2 = (torch.tensor(b @ b.T) for b in rng.normal(size=(2, 3, 3)))
        a, b = 0.7, -1.3
        eye = LOWPASS * torch.eye(2, dtype=torch.float64)
        lhs = project_covariance(a * s1 + b * s2, pose, jac) - eye
        rhs = a * (project_covariance(s1, pose, jac) - eye) + b * (project_covariance(s2, pose, jac) - eye)
        np.testing.assert_allclose(lhs.numpy(), rhs.numpy(), atol=1e-12)


class TestGaussianWeight:
    def test_mode(self):
        cov = torch.tensor([[3.0, 0.5], [0.5, 1.0]], dtype=torch.float64)
        assert gaussian_weight(cov, torch.zeros(2, dtype=torch.float64)).item() == 1.0

    def test_unit_covariance(self):
        w = gaussian_weight(torch.eye(2, dtype=torch.float64), torch.tensor([1.0, 0.0], dtype=torch.float64))
        assert w.item() == pytest.approx(np.exp(-0.5), abs=1e-15)
        assert w.item() == pytest.approx(0.6065, abs=1e-4)

    def test_anisotropic_vs_adjugate(self):
        a, b, d = 4.0, 1.2, 2.0
        det = a * d - b * b
        inv = np.array([[d, -b], [-b, a]]) / det
        delta = np.array([1.5, -0.7])
        ref = np.exp(-0.5 * delta @ inv @ delta)
        w = gaussian_weight(torch.tensor([[a, b], [b, d]], dtype=torch.float64), torch.tensor(delta))
        assert w.item() == pytest.approx(ref, rel=1e-14)

    def test_monotone_along_rays(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            m = rng.normal(size=(2, 2))
            cov = torch.tensor(m @ m.T + 0.1 * np.eye(2))
            direction = torch.tensor(rng.normal(size=2))
            ts = torch.linspace(0, 5, 50, dtype=torch.float64)
            w = gaussian_weight(cov.expand(50, 2, 2), ts[:, None] * direction)
            assert (w[1:] <= w[:-1]).all()

    def test_singular_flagged(self):
        _, ok = cov2d_inverse(torch.tensor([[[1.0, 1.0], [1.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]]], dtype=torch.float64))
        assert ok.tolist() == [False, True]


class TestScreenBounds:
    def test_unit_covariance_radius_three(self):
        rect = screen_bounds([50.0, 50.0], np.eye(2), 100, 100, cutoff=3.0)
        assert rect.tolist() == [47, 47, 53, 53]

    def test_off_screen_is_empty(self):
        x0, y0, x1, y1 = screen_bounds([-10.0, 50.0], np.eye(2), 100, 100, cutoff=3.0)
        assert x0 > x1 or y0 > y1

    def test_contains_all_pixels_above_threshold(self):
        rng = np.random.default_rng(6)
        cutoff = 3.0
        ys, xs = np.mgrid[0:64, 0:64]
        pix = np.stack([xs, ys], -1).reshape(-1, 2).astype(np.float64)
        for _ in range(30):
            m = rng.normal(size=(2, 2)) * rng.uniform(0.5, 4)
            cov = m @ m.T + LOWPASS * np.eye(2)
            center = rng.uniform(-10, 74, 2)
            x0, y0, x1, y1 = screen_bounds(center, cov, 64, 64, cutoff)
            w = gaussian_weight(torch.tensor(cov).expand(len(pix), 2, 2), torch.tensor(pix - center)).numpy()
            hot = pix[w >= np.exp(-cutoff**2 / 2)]
            assert ((hot[:, 0] >= x0) & (hot[:, 0] <= x1) & (hot[:, 1] >= y0) & (hot[:, 1] <= y1)).all()


class TestShColors:
    def test_degree_zero_is_coefficient(self):
        c = torch.tensor([[[0.2, 0.5, 0.9]]], dtype=torch.float64)
        out = sh_colors(c, torch.zeros(1, 3, dtype=torch.float64), np.array([0.0, 0.0, -1.0]))
        np.testing.assert_array_equal(out.numpy(), [[0.2, 0.5, 0.9]])

    def test_degree_one_linear_terms(self):
        rng = np.random.default_rng(7)
        coeffs = rng.uniform(-0.3, 0.3, (1, 4, 3))
        coeffs[0, 0] = 0.5
        mean = np.array([1.0, 2.0, 2.0])
        x, y, z = mean / 3.0
        ref = coeffs[0, 0] + SH_C1 * (-y * coeffs[0, 1] + z * coeffs[0, 2] - x * coeffs[0, 3])
        out = sh_colors(torch.tensor(coeffs), torch.tensor(mean[None]), np.zeros(3))
        np.testing.assert_allclose(out[0].numpy(), ref, atol=1e-15)

    def test_clamp_has_zero_gradient_outside(self):
        c = torch.tensor([[[1.4, -0.2, 0.5]]], dtype=torch.float64, requires_grad=True)
        out = sh_colors(c, torch.zeros(1, 3, dtype=torch.float64), np.array([0.0, 0, -1]))
        out.sum().backward()
        np.testing.assert_array_equal(out.detach().numpy(), [[1.0, 0.0, 0.5]])
        np.testing.assert_array_equal(c.grad.numpy(), [[[0.0, 0.0, 1.0]]])


class TestProjectGaussians:
    def test_fused_matches_unfused(self):
        rng = np.random.default_rng(8)
        cam = front_camera()
        g = random_gaussians(rng, 100)
        proj = project_gaussians(g, cam)
        p_cam = world_to_camera(cam.pose, g.means)
        jac = projection_jacobian(cam.intrinsics, p_cam)
        ref = project_covariance(build_covariance(g.quats, g.scales), cam.pose, jac)
        np.testing.assert_allclose(proj.cov2d.numpy(), ref.numpy(), atol=1e-10)

    def test_behind_camera_culled_without_error(self):
        g = Gaussians(torch.tensor([[0.0, 0, 2], [0.0, 0, -1], [0.0, 0, 0.01]], dtype=torch.float64),
                      torch.tensor([[1.0, 0, 0, 0]] * 3, dtype=torch.float64), torch.full((3, 3), 0.1, dtype=torch.float64),
                      torch.full((3,), 0.5, dtype=torch.float64), torch.full((3, 1, 3), 0.5, dtype=torch.float64))
        proj = project_gaussians(g, front_camera())
        assert proj.valid.tolist() == [True, False, False]
        assert torch.isfinite(proj.cov2d).all()

    def test_center_projection(self):
        cam = front_camera()
        g = random_gaussians(np.random.default_rng(9), 10)
        proj = project_gaussians(g, cam)
        k = cam.intrinsics
        m = g.means.detach().numpy()
        ref = np.c_[k.fx * m[:, 0] / m[:, 2] + k.cx, k.fy * m[:, 1] / m[:, 2] + k.cy]
        np.testing.assert_allclose(proj.means2d.numpy(), ref, atol=1e-12)
        np.testing.assert_allclose(proj.depths.numpy(), m[:, 2], atol=1e-15)
