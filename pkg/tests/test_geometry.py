import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from monoindoor import kernels, synthetic
from monoindoor.geometry import (Intrinsics, Pose, axis_angle_to_pose, axis_angle_to_rotation, backproject,
                                 bilinear_sample, compose, invert, pixel_grid, project, rotation_to_axis_angle,
                                 warp)

from conftest import to_chw

D = torch.float64
K8 = Intrinsics(10.0, 12.0, 3.5, 4.0, 8, 8)


def rz(deg):
    a = math.radians(deg)
    return torch.tensor([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]],
                        dtype=D)


def pose(rot, t):
    return Pose(torch.as_tensor(rot, dtype=D), torch.as_tensor(t, dtype=D))


def assert_pose_close(a, b, tol=1e-6):
    np.testing.assert_allclose(a.matrix().numpy(), b.matrix().numpy(), atol=tol)


vec3 = st.lists(st.floats(-2.0, 2.0), min_size=3, max_size=3)


def random_pose(r, t):
    return axis_angle_to_pose(torch.tensor(r, dtype=D), torch.tensor(t, dtype=D))


class TestPoseAlgebra:
    def test_compose_identity(self):
        T = random_pose([0.3, -0.2, 0.5], [1.0, 2.0, -0.5])
        assert_pose_close(compose(T, Pose.identity(dtype=D)), T)

    def test_compose_inverse(self):
        T = random_pose([0.3, -0.2, 0.5], [1.0, 2.0, -0.5])
        assert_pose_close(compose(T, invert(T)), Pose.identity(dtype=D))

    def test_compose_rotations_add(self):
        a = pose(rz(30), [1.0, 0.0, 0.0])
        b = pose(rz(15), [0.0, 2.0, 0.0])
        c = compose(a, b)
        oracle = a.matrix().numpy() @ b.matrix().numpy()
        np.testing.assert_allclose(c.matrix().numpy(), oracle, atol=1e-12)
        np.testing.assert_allclose(c.rotation.numpy(), rz(45).numpy(), atol=1e-12)

    def test_compose_applies_right_first(self):
        a = random_pose([0.1, 0.2, 0.3], [1, 2, 3])
        b = random_pose([-0.3, 0.1, 0.0], [0, 1, 0])
        x = torch.tensor([[0.5], [-1.0], [2.0]], dtype=D)
        np.testing.assert_allclose(compose(a, b).apply(x).numpy(), a.apply(b.apply(x)).numpy(), atol=1e-12)

    def test_invert_identity(self):
        assert_pose_close(invert(Pose.identity(dtype=D)), Pose.identity(dtype=D))

    def test_invert_translation(self):
        p = invert(pose(torch.eye(3), [1.0, -2.0, 3.0]))
        np.testing.assert_allclose(p.translation.numpy(), [-1.0, 2.0, -3.0])
        np.testing.assert_allclose(p.rotation.numpy(), np.eye(3))

    def test_invert_matches_matrix_inverse(self):
        T = axis_angle_to_pose(torch.tensor([0, 0, math.pi / 2], dtype=D), torch.tensor([1.0, 0, 0], dtype=D))
        np.testing.assert_allclose(invert(T).matrix().numpy(), np.linalg.inv(T.matrix().numpy()), atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(vec3, vec3, vec3, vec3, vec3, vec3)
    def test_associativity(self, r1, t1, r2, t2, r3, t3):
        a, b, c = random_pose(r1, t1), random_pose(r2, t2), random_pose(r3, t3)
        assert_pose_close(compose(compose(a, b), c), compose(a, compose(b, c)))

    @settings(max_examples=60, deadline=None)
    @given(vec3, vec3)
    def test_inverse_laws(self, r, t):
        p = random_pose(r, t)
        assert_pose_close(compose(p, invert(p)), Pose.identity(dtype=D))
        assert_pose_close(compose(invert(p), p), Pose.identity(dtype=D))
        rot = p.rotation
        np.testing.assert_allclose((rot.T @ rot).numpy(), np.eye(3), atol=1e-6)
        assert abs(torch.linalg.det(rot).item() - 1.0) < 1e-6

    def test_batched(self):
        r = torch.randn(5, 3, dtype=D)
        t = torch.randn(5, 3, dtype=D)
        p = axis_angle_to_pose(r, t)
        c = compose(p, invert(p))
        np.testing.assert_allclose(c.rotation.numpy(), np.broadcast_to(np.eye(3), (5, 3, 3)), atol=1e-12)


def quaternion_rotation(r):
    """Rotation matrix via the unit quaternion of axis-angle ``r``."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    axis = r / theta
    w = math.cos(theta / 2)
    x, y, z = axis * math.sin(theta / 2)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


class TestAxisAngle:
    def test_zero_is_identity(self):
        p = axis_angle_to_pose(torch.zeros(3, dtype=D), torch.zeros(3, dtype=D))
        assert_pose_close(p, Pose.identity(dtype=D), tol=0)

    def test_half_turn(self):
        rot = axis_angle_to_rotation(torch.tensor([0, 0, math.pi], dtype=D))
        np.testing.assert_allclose(rot.numpy(), np.diag([-1.0, -1.0, 1.0]), atol=1e-12)

    def test_matches_quaternion_oracle(self):
        r = [0.1, 0.2, 0.3]
        rot = axis_angle_to_rotation(torch.tensor(r, dtype=D)).numpy()
        np.testing.assert_allclose(rot, quaternion_rotation(r), atol=1e-8)

    @settings(max_examples=50, deadline=None)
    @given(vec3)
    def test_quaternion_oracle_random(self, r):
        if np.linalg.norm(r) < 1e-3:
            return
        rot = axis_angle_to_rotation(torch.tensor(r, dtype=D)).numpy()
        np.testing.assert_allclose(rot, quaternion_rotation(r), atol=1e-8)

    def test_continuity_at_zero(self):
        tiny = axis_angle_to_rotation(torch.tensor([1e-12, 0, 0], dtype=D))
        zero = axis_angle_to_rotation(torch.zeros(3, dtype=D))
        assert (tiny - zero).abs().max() < 1e-9

    def test_gradient_finite_at_zero(self):
        r = torch.zeros(3, dtype=D, requires_grad=True)
        axis_angle_to_rotation(r).sum().backward()
        assert torch.isfinite(r.grad).all()

    def test_log_map_round_trip(self):
        r = torch.tensor([[0.1, -0.4, 0.25], [1e-9, 0, 0], [0.0, 2.0, 1.0]], dtype=D)
        back = rotation_to_axis_angle(axis_angle_to_rotation(r))
        np.testing.assert_allclose(back.numpy(), r.numpy(), atol=1e-8)


class TestProjection:
    def test_backproject_principal_point(self):
        K = Intrinsics(10.0, 10.0, 3.0, 2.0, 8, 8)
        pts = backproject(torch.ones(1, 1, 8, 8, dtype=D), K)
        np.testing.assert_allclose(pts[0, :, 2, 3].numpy(), [0.0, 0.0, 1.0], atol=1e-12)

    def test_backproject_offset_pixel(self):
        K = Intrinsics(2.0, 2.0, 3.0, 2.0, 8, 8)
        # pixel (cx + fx, cy) = (5, 2)
        pts = backproject(torch.full((1, 1, 8, 8), 2.0, dtype=D), K)
        np.testing.assert_allclose(pts[0, :, 2, 5].numpy(), [2.0, 0.0, 2.0], atol=1e-12)

    def test_backproject_rejects_nonpositive(self):
        d = torch.ones(1, 1, 8, 8, dtype=D)
        d[0, 0, 3, 3] = 0.0
        with pytest.raises(ValueError):
            backproject(d, K8)

    def test_round_trip_identity(self):
        torch.manual_seed(0)
        depth = torch.rand(2, 1, 8, 8, dtype=D) * 4 + 0.5
        coords, valid = project(backproject(depth, K8), Pose.identity(2, D), K8)
        grid = pixel_grid(8, 8, D)[:2].T.reshape(8, 8, 2)
        assert (coords - grid).abs().max() < 1e-5
        assert valid.all()

    def test_forward_translation_expands_radially(self):
        K = Intrinsics(6.0, 6.0, 3.0, 3.0, 7, 7)
        T = Pose(torch.eye(3, dtype=D)[None], torch.tensor([[0.0, 0.0, -0.5]], dtype=D))
        coords, valid = project(backproject(torch.ones(1, 1, 7, 7, dtype=D), K), T, K)
        grid = pixel_grid(7, 7, D)[:2].T.reshape(7, 7, 2)
        # moving the plane from z=1 to z=0.5 doubles offsets from the principal point
        expected = torch.tensor([3.0, 3.0], dtype=D) + 2.0 * (grid - torch.tensor([3.0, 3.0], dtype=D))
        np.testing.assert_allclose(coords[0].numpy(), expected.numpy(), atol=1e-10)
        np.testing.assert_allclose(coords[0, 3, 3].numpy(), [3.0, 3.0])
        assert valid[0, 3, 3] and not valid[0, 0, 0]

    def test_zero_depth_point_masked(self):
        pts = torch.zeros(1, 3, 2, 2, dtype=D)
        pts[0, 2] = 1.0
        pts[0, :, 0, 0] = torch.tensor([0.1, 0.1, 0.0])
        K = Intrinsics(1.0, 1.0, 0.5, 0.5, 2, 2)
        _, valid = project(pts, Pose.identity(1, D), K)
        assert not valid[0, 0, 0]
        assert valid[0, 1, 1]


class TestBilinear:
    def test_identity_grid(self):
        torch.manual_seed(1)
        src = torch.rand(1, 3, 6, 9, dtype=D)
        grid = pixel_grid(6, 9, D)[:2].T.reshape(1, 6, 9, 2)
        out, mask = bilinear_sample(src, grid)
        assert torch.equal(out, src) or (out - src).abs().max() < 1e-12
        assert mask.all()

    def test_half_pixel_on_ramp(self):
        ramp = torch.arange(6, dtype=D).repeat(4, 1)[None, None] * 0.1
        grid = pixel_grid(4, 6, D)[:2].T.reshape(1, 4, 6, 2).clone()
        grid[..., 0] += 0.5
        out, mask = bilinear_sample(ramp, grid)
        # averages of horizontal neighbours; last column falls off the edge
        np.testing.assert_allclose(out[0, 0, :, :5].numpy(), (ramp[0, 0, :, :5] + 0.05).numpy(), atol=1e-12)
        assert mask[0, :, :5].all() and not mask[0, :, 5].any()

    def test_fully_outside(self):
        src = torch.rand(1, 1, 4, 4, dtype=D)
        coords = torch.full((1, 4, 4, 2), -3.0, dtype=D)
        _, mask = bilinear_sample(src, coords)
        assert not mask.any()

    @pytest.mark.parametrize("backend", ["numba", "numpy"])
    def test_matches_reference_sampler(self, backend):
        rng = np.random.default_rng(0)
        src = rng.random((7, 9, 3))
        coords = rng.uniform(-2, 11, size=(5, 6, 2))
        ref, ref_mask = kernels.bilinear_sample_ref(src, coords, backend=backend)
        out, mask = bilinear_sample(torch.from_numpy(src.transpose(2, 0, 1))[None], torch.from_numpy(coords)[None])
        np.testing.assert_allclose(out[0].numpy().transpose(1, 2, 0), ref, atol=1e-12)
        np.testing.assert_array_equal(mask[0].numpy(), ref_mask)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        h, w = 10, 12
        src = torch.tensor(rng.random((1, 2, h, w)), dtype=D, requires_grad=True)
        # keep probes away from integer kinks
        base = rng.integers(0, [w - 1, h - 1], size=(100, 2)) + rng.uniform(0.1, 0.9, size=(100, 2))
        coords = torch.tensor(base.reshape(1, 10, 10, 2), dtype=D, requires_grad=True)
        weights = torch.tensor(rng.standard_normal((1, 2, 10, 10)), dtype=D)

        def f(s, c):
            return (bilinear_sample(s, c)[0] * weights).sum()

        f(src, coords).backward()
        eps = 1e-4
        for idx in np.ndindex(10, 10):
            for k in range(2):
                cp = coords.detach().clone()
                cm = coords.detach().clone()
                cp[0, idx[0], idx[1], k] += eps
                cm[0, idx[0], idx[1], k] -= eps
                fd = (f(src.detach(), cp) - f(src.detach(), cm)).item() / (2 * eps)
                an = coords.grad[0, idx[0], idx[1], k].item()
                assert abs(fd - an) <= 1e-3 * max(abs(fd), 1e-3), (idx, k, fd, an)
        flat = rng.choice(src.numel(), size=100, replace=False)
        for i in flat:
            sp = src.detach().clone().reshape(-1)
            sm = src.detach().clone().reshape(-1)
            sp[i] += eps
            sm[i] -= eps
            fd = (f(sp.reshape(src.shape), coords.detach()) - f(sm.reshape(src.shape), coords.detach())).item() / (2 * eps)
            an = src.grad.reshape(-1)[i].item()
            assert abs(fd - an) <= 1e-3 * max(abs(fd), 1e-3)


def plane_scene(step=0.1, depth=2.0, n=3, size=(48, 64)):
    spec = synthetic.SceneSpec("fronto-plane", synthetic.lateral_trajectory(n, step), texture_seed=5,
                               depth_range=(0.1, 50.0), image_size=size, plane_depth=depth)
    return synthetic.render_scene(spec)


class TestWarp:
    def test_identity_pose(self):
        torch.manual_seed(0)
        src = torch.rand(2, 3, 8, 8, dtype=D)
        depth = torch.rand(2, 1, 8, 8, dtype=D) + 0.5
        out, mask = warp(src, depth, Pose.identity(2, D), K8)
        assert mask.all()
        assert (out - src).abs().max() < 1e-5

    def test_lateral_shift_matches_rendered_view(self):
        scene = plane_scene()
        K = scene.K
        T = torch.tensor(scene.relative_pose(0, 1), dtype=D)
        src = to_chw(scene.image(1)).double()
        depth = torch.from_numpy(scene.depths[0]).double()[None, None]
        out, mask = warp(src, depth, Pose.from_matrix(T[None]), K)
        target = to_chw(scene.image(0)).double()
        m = mask[:, None].expand_as(out)
        assert mask.float().mean() > 0.8
        assert (out - target).abs()[m].mean() < 2e-2

    def test_forward_then_inverse_recovers_source(self):
        scene = plane_scene()
        T = Pose.from_matrix(torch.tensor(scene.relative_pose(0, 1), dtype=D)[None])
        src = to_chw(scene.image(1)).double()
        depth = torch.full((1, 1, 48, 64), 2.0, dtype=D)
        there, m1 = warp(src, depth, T, scene.K)
        back, m2 = warp(there, depth, invert(T), scene.K)
        interior = torch.zeros_like(m2)
        interior[:, 4:-4, 12:-12] = True
        sel = (m2 & interior)[:, None].expand_as(back)
        assert sel.any()
        assert (back - src).abs()[sel].mean() < 5e-2
