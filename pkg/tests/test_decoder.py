import numpy as np
import pytest
import torch
import torch.nn.functional as F

from helpers import front_camera, random_gaussians
from voxsplat.decoder import AnchorMlp, VelocityHead, VoxelGrid, decode_primitives, filter_gaussians, predict_velocity
from voxsplat.rasterizer import RenderOptions, render


def make_grid(dims=(3, 2, 2), channels=8, seed=0, voxel_size=(0.5, 0.5, 0.75)):
    gen = torch.Generator().manual_seed(seed)
    feats = torch.randn(*dims, channels, generator=gen, dtype=torch.float64)
    return VoxelGrid(feats, origin=(-1.0, -0.5, 0.0), voxel_size=voxel_size)


def zero_mlp(channels, **kw):
    mlp = AnchorMlp(channels, **kw)
    with torch.no_grad():
        for p in mlp.parameters():
            p.zero_()
    return mlp


class TestVoxelGrid:
    def test_centers_and_extent(self):
        grid = make_grid()
        lo, hi = grid.extent
        np.testing.assert_array_equal(hi, [0.5, 0.5, 1.5])
        np.testing.assert_allclose(grid.centers()[0, 0, 0].numpy(), [-0.75, -0.25, 0.375])

    def test_world_to_grid_maps_centers_to_integers(self):
        grid = make_grid()
        idx = grid.world_to_grid(grid.centers())
        ref = torch.stack(torch.meshgrid(*(torch.arange(n, dtype=torch.float64) for n in grid.dims), indexing="ij"), -1)
        np.testing.assert_allclose(idx.numpy(), ref.numpy(), atol=1e-12)

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            VoxelGrid(torch.zeros(2, 2, 4), (0, 0, 0), (1, 1, 1))
        with pytest.raises(ValueError):
            VoxelGrid(torch.zeros(2, 2, 2, 4), (0, 0, 0), (1, 0, 1))


class TestDecode:
    def test_zero_mlp(self):
        grid = make_grid()
        g = decode_primitives(grid, zero_mlp(8)).detach()
        anchors = grid.centers().reshape(-1, 1, 3).expand(-1, 2, 3).reshape(-1, 3)
        assert torch.equal(g.means, anchors)
        assert torch.equal(g.opacities, torch.zeros(len(g), dtype=torch.float64))
        unit = 0.5 * np.mean(grid.voxel_size)
        np.testing.assert_allclose(g.scales.numpy(), np.log(2.0) * unit, rtol=1e-15)
        # all-zero raw quaternion falls back to the identity rotation
        assert torch.equal(g.quats, torch.tensor([[1.0, 0, 0, 0]], dtype=torch.float64).expand(len(g), 4))
        np.testing.assert_array_equal(g.colors.numpy(), 0.5)

    def test_count(self):
        grid = make_grid(dims=(2, 2, 1))
        assert len(decode_primitives(grid, AnchorMlp(8, per_anchor=2))) == 8

    @pytest.mark.parametrize("sh_degree", [0, 1])
    def test_output_width(self, sh_degree):
        mlp = AnchorMlp(8, per_anchor=3, sh_degree=sh_degree)
        assert mlp.fc2.out_features == 3 * (11 + 3 * (sh_degree + 1) ** 2)
        g = decode_primitives(make_grid(), mlp)
        assert g.colors.shape[1:] == ((sh_degree + 1) ** 2, 3)

    def test_offsets_bounded(self):
        grid = make_grid(dims=(2, 2, 2))
        anchors = grid.centers().reshape(-1, 1, 3).expand(-1, 2, 3).reshape(-1, 3)
        limit = torch.from_numpy(0.5 * grid.voxel_size)
        lo, hi = grid.extent
        for seed in range(1000):
            torch.manual_seed(seed)
            mlp = AnchorMlp(8, hidden=16)
            with torch.no_grad():
                for p in mlp.parameters():
                    p.mul_(20.0)
            g = decode_primitives(grid, mlp)
            assert ((g.means - anchors).abs() <= limit).all()
            means = g.means.detach().numpy()
            assert (means >= lo - 0.5 * grid.voxel_size).all() and (means <= hi + 0.5 * grid.voxel_size).all()

    def test_scale_activation_bounds(self):
        grid = make_grid()
        mlp = AnchorMlp(8)
        with torch.no_grad():
            mlp.fc2.bias.view(2, -1)[0, 7:10] = torch.tensor([-1e4, 0.0, 1e4])
        s = decode_primitives(grid, mlp).scales
        assert (s > 0).all() and (s <= 2 * grid.voxel_size.max()).all()
        assert s.min().item() == 1e-4

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            decode_primitives(make_grid(channels=4), AnchorMlp(8))

    def test_differentiable_end_to_end(self):
        grid = make_grid()
        feats = grid.features.clone().requires_grad_(True)
        mlp = AnchorMlp(8)
        g = decode_primitives(grid.with_features(feats), mlp)
        (g.means.sum() + g.scales.sum() + g.opacities.sum() + g.colors.sum() + g.quats.sum()).backward()
        assert feats.grad.abs().sum() > 0
        assert all(p.grad is not None for p in mlp.parameters())

    def test_detach_params_blocks_mlp(self):
        grid = make_grid()
        feats = grid.features.clone().requires_grad_(True)
        mlp = AnchorMlp(8)
        g = decode_primitives(grid.with_features(feats), mlp, detach_params=True)
        g.means.sum().backward()
        assert feats.grad is not None
        assert all(p.grad is None for p in mlp.parameters())


class TestFilter:
    def gaussians_with(self, opacities):
        g = random_gaussians(np.random.default_rng(0), len(opacities))
        return g.with_opacities(torch.tensor(opacities, dtype=torch.float64))

    def test_threshold(self):
        out = filter_gaussians(self.gaussians_with([-0.5, 0.0, 0.3]))
        assert out.opacities.tolist() == [0.3]

    def test_all_negative(self):
        out = filter_gaussians(self.gaussians_with([-0.5, -0.1]))
        assert len(out) == 0
        frame = render(out, front_camera(), RenderOptions(background=(0.2, 0.2, 0.2)))
        assert torch.equal(frame.color, torch.full((64, 64, 3), 0.2, dtype=torch.float64))

    def test_idempotent_and_order_preserving(self):
        rng = np.random.default_rng(1)
        g = self.gaussians_with(rng.uniform(-1, 1, 50))
        once = filter_gaussians(g)
        twice = filter_gaussians(once)
        assert torch.equal(once.means, twice.means)
        keep = (g.opacities > 0).numpy()
        assert torch.equal(once.means, g.means[keep])

    def test_render_equivalence_with_clamp(self):
        rng = np.random.default_rng(2)
        cam = front_camera()
        for _ in range(5):
            g = random_gaussians(rng, 60).with_opacities(torch.tensor(rng.uniform(-1, 1, 60)))
            a = render(filter_gaussians(g), cam)
            b = render(g.with_opacities(g.opacities.clamp_min(0)), cam)
            for k in ("color", "depth_raw", "alpha"):
                assert float((getattr(a, k) - getattr(b, k)).abs().max()) <= 1e-12


class TestVelocityHead:
    def test_fresh_head_predicts_zero(self):
        grid = make_grid()
        vel = predict_velocity(grid, VelocityHead(8))
        assert vel.shape == grid.dims + (3,)
        assert torch.equal(vel, torch.zeros_like(vel))

    def test_zero_parameters_give_zero_field(self):
        head = VelocityHead(8)
        with torch.no_grad():
            for p in head.parameters():
                p.zero_()
        vel = predict_velocity(make_grid(dims=(4, 3, 2)), head)
        assert torch.equal(vel, torch.zeros(4, 3, 2, 3, dtype=torch.float64))

    def test_fresh_head_still_receives_gradient(self):
        head = VelocityHead(8)
        vel = predict_velocity(make_grid(), head)
        (vel * torch.arange(vel.numel(), dtype=torch.float64).reshape(vel.shape)).sum().backward()
        assert head.fc2.weight.grad.abs().sum() > 0
        assert head.conv_out.weight.grad.abs().sum() > 0

    def test_matches_manual_forward(self):
        torch.manual_seed(0)
        head = VelocityHead(8)
        with torch.no_grad():
            for p in (head.fc2.weight, head.conv_out.weight):
                p.normal_()
        head.eval()
        grid = make_grid()
        v = head.fc2(torch.relu(head.fc1(grid.features)))
        vol = v.permute(3, 0, 1, 2)[None]
        h = F.conv3d(vol, head.conv_in.weight, head.conv_in.bias, padding=1)
        h = (h - head.bn.running_mean[None, :, None, None, None]) / torch.sqrt(
            head.bn.running_var[None, :, None, None, None] + head.bn.eps)
        h = h * head.bn.weight[None, :, None, None, None] + head.bn.bias[None, :, None, None, None]
        r = F.conv3d(torch.relu(h), head.conv_out.weight, head.conv_out.bias)
        ref = v + r[0].permute(1, 2, 3, 0)
        np.testing.assert_allclose(predict_velocity(grid, head).detach().numpy(), ref.detach().numpy(), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            predict_velocity(make_grid(channels=4), VelocityHead(8))
