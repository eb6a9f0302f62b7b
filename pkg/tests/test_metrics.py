import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from monoindoor import kernels
from monoindoor.metrics import (DepthEvalConfig, MetricsReport, TABLE_ORDERS, ate, chain_relative_poses,
                                csv_header, csv_row, depth_metrics, format_table, rpe)

NOCAP = DepthEvalConfig(cap=None, median_scaling=False)


def depth_oracle(p, g):
    """Metric formulas over explicit Python loops."""
    n = len(p)
    abs_rel = sum(abs(a - b) / b for a, b in zip(p, g)) / n
    sq_rel = sum((a - b) ** 2 / b for a, b in zip(p, g)) / n
    rms = math.sqrt(sum((a - b) ** 2 for a, b in zip(p, g)) / n)
    rms_log = math.sqrt(sum((math.log(a) - math.log(b)) ** 2 for a, b in zip(p, g)) / n)
    deltas = [sum(max(a / b, b / a) < 1.25 ** i for a, b in zip(p, g)) / n for i in (1, 2, 3)]
    return [abs_rel, sq_rel, rms, rms_log] + deltas


class TestDepthMetrics:
    def test_perfect(self):
        g = np.random.default_rng(0).uniform(0.5, 5, (8, 8))
        r = depth_metrics(g.copy(), g)
        assert r.abs_rel == 0 and r.delta1 == r.delta2 == r.delta3 == 1

    def test_median_scaling_cancels_factor(self):
        g = np.random.default_rng(0).uniform(0.5, 5, (8, 8))
        assert depth_metrics(2 * g, g, DepthEvalConfig(cap=None)).abs_rel < 1e-12

    def test_worked_example(self):
        r = depth_metrics(np.array([1.0, 2.0]), np.array([2.0, 2.0]), NOCAP)
        assert abs(r.abs_rel - 0.25) < 1e-12 and r.delta1 == 0.5

    def test_rejects_empty_mask(self):
        with pytest.raises(ValueError):
            depth_metrics(np.ones(4), np.zeros(4))

    def test_cap_clamps_both(self):
        r = depth_metrics(np.array([12.0, 2.0]), np.array([15.0, 2.0]), DepthEvalConfig(cap=10.0, median_scaling=False))
        assert r.abs_rel == 0.0

    def test_invalid_gt_ignored(self):
        r = depth_metrics(np.array([1.0, 9.0]), np.array([1.0, 0.0]), NOCAP)
        assert r.abs_rel == 0.0

    @pytest.mark.parametrize("backend", ["numba", "numpy"])
    def test_kernels_match_oracle(self, backend):
        rng = np.random.default_rng(1)
        p, g = rng.uniform(0.2, 8, 500), rng.uniform(0.2, 8, 500)
        np.testing.assert_allclose(kernels.depth_error_stats(p, g, backend=backend), depth_oracle(p, g), rtol=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100))
    def test_scale_invariance_and_delta_order(self, seed, c):
        rng = np.random.default_rng(seed)
        p, g = rng.uniform(0.2, 8, 50), rng.uniform(0.2, 8, 50)
        cfg = DepthEvalConfig(cap=None)
        a, b = depth_metrics(p, g, cfg), depth_metrics(c * p, g, cfg)
        assert abs(a.abs_rel - b.abs_rel) < 1e-9
        assert a.delta1 <= a.delta2 <= a.delta3 <= 1


def rand_pose(rng, rot=1.0, trans=2.0):
    r = rng.uniform(-rot, rot, 3)
    theta = np.linalg.norm(r)
    k = r / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    m = np.eye(4)
    m[:3, :3] = np.eye(3) + math.sin(theta) * kx + (1 - math.cos(theta)) * kx @ kx
    m[:3, 3] = rng.uniform(-trans, trans, 3)
    return m


def horn_ate(pred, gt, with_scale=True):
    """ATE with Horn's quaternion absolute orientation as an independent oracle."""
    p = np.array([m[:3, 3] for m in pred])
    g = np.array([m[:3, 3] for m in gt])
    ps, gs = p - p.mean(0), g - g.mean(0)
    S = ps.T @ gs
    (sxx, sxy, sxz), (syx, syy, syz), (szx, szy, szz) = S
    N = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz]])
    w, v = np.linalg.eigh(N)
    q0, qx, qy, qz = v[:, -1]
    R = np.array([
        [q0 * q0 + qx * qx - qy * qy - qz * qz, 2 * (qx * qy - q0 * qz), 2 * (qx * qz + q0 * qy)],
        [2 * (qy * qx + q0 * qz), q0 * q0 - qx * qx + qy * qy - qz * qz, 2 * (qy * qz - q0 * qx)],
        [2 * (qz * qx - q0 * qy), 2 * (qz * qy + q0 * qx), q0 * q0 - qx * qx - qy * qy + qz * qz]])
    rp = ps @ R.T
    s = float(np.sum(gs * rp) / np.sum(ps * ps)) if with_scale else 1.0
    res = gs - s * rp
    return float(np.sqrt(np.mean(np.sum(res ** 2, axis=1))))


def rpe_oracle(pred, gt, stride=1):
    """Relative errors from explicit rotation/translation algebra in a double loop."""
    te, re = [], []
    for k in range(len(pred) - stride):
        rels = []
        for traj in (gt, pred):
            Ra, ta = traj[k][:3, :3], traj[k][:3, 3]
            Rb, tb = traj[k + stride][:3, :3], traj[k + stride][:3, 3]
            rels.append((Ra.T @ Rb, Ra.T @ (tb - ta)))
        (Rg, tg), (Rp, tp) = rels
        Re = Rg.T @ Rp
        t_err = Rg.T @ (tp - tg)
        te.append(float(np.sqrt(sum(x * x for x in t_err))))
        # angle from atan2(sin, cos); sin from the skew-symmetric part
        sin = 0.5 * math.sqrt((Re[2, 1] - Re[1, 2]) ** 2 + (Re[0, 2] - Re[2, 0]) ** 2 + (Re[1, 0] - Re[0, 1]) ** 2)
        cos = 0.5 * (Re[0, 0] + Re[1, 1] + Re[2, 2] - 1)
        re.append(math.degrees(math.atan2(sin, cos)))
    return math.sqrt(np.mean(np.square(te))), math.sqrt(np.mean(np.square(re)))


class TestATE:
    def test_identical(self):
        rng = np.random.default_rng(0)
        traj = [rand_pose(rng) for _ in range(6)]
        assert ate(traj, traj) < 1e-12

    def test_translated(self):
        rng = np.random.default_rng(0)
        gt = [rand_pose(rng) for _ in range(6)]
        shift = np.eye(4)
        shift[:3, 3] = (1.0, -2.0, 0.5)
        assert ate([shift @ m for m in gt], gt) < 1e-9

    def test_one_displaced_keyframe(self):
        gt = [np.eye(4) for _ in range(10)]
        for k, m in enumerate(gt):
            m[:3, 3] = (0.1 * k, 0.0, 0.0)
        pred = [m.copy() for m in gt]
        pred[4][1, 3] += 0.3
        assert abs(ate(pred, gt, alignment="none") - 0.3 / math.sqrt(10)) < 1e-12
        assert abs(0.3 / math.sqrt(10) - 0.0949) < 1e-4

    @pytest.mark.parametrize("alignment", ["sim3", "rigid"])
    def test_matches_horn_oracle(self, alignment):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            gt = [rand_pose(rng) for _ in range(12)]
            pred = [rand_pose(rng) for _ in range(12)]
            assert abs(ate(pred, gt, alignment) - horn_ate(pred, gt, alignment == "sim3")) < 1e-8

    def test_rigid_invariance(self):
        rng = np.random.default_rng(3)
        gt = [rand_pose(rng) for _ in range(8)]
        pred = [rand_pose(rng) for _ in range(8)]
        G = rand_pose(rng)
        assert abs(ate([G @ m for m in pred], gt) - ate(pred, gt)) < 1e-9

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ate([np.eye(4)] * 3, [np.eye(4)] * 4)


class TestRPE:
    def test_identical(self):
        rng = np.random.default_rng(0)
        traj = [rand_pose(rng) for _ in range(5)]
        m, d = rpe(traj, traj)
        assert m < 1e-9 and d < 1e-5

    def test_constant_yaw_offset(self):
        def yaw(deg):
            a = math.radians(deg)
            m = np.eye(4)
            m[:3, :3] = [[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]]
            return m
        gt = [np.eye(4) for _ in range(6)]
        pred = [yaw(k) for k in range(6)]
        m, d = rpe(pred, gt)
        assert abs(d - 1.0) < 1e-9 and m < 1e-12

    @pytest.mark.parametrize("stride", [1, 2, 3])
    def test_matches_oracle(self, stride):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            gt = [rand_pose(rng) for _ in range(10)]
            pred = [rand_pose(rng) for _ in range(10)]
            ours = rpe(pred, gt, stride)
            ref = rpe_oracle(pred, gt, stride)
            assert abs(ours[0] - ref[0]) < 1e-8 and abs(ours[1] - ref[1]) < 1e-8

    def test_too_short(self):
        with pytest.raises(ValueError):
            rpe([np.eye(4)] * 2, [np.eye(4)] * 2, stride=2)

    def test_chain_relative(self):
        rng = np.random.default_rng(5)
        c2w = [rand_pose(rng) for _ in range(5)]
        rel = [np.linalg.inv(c2w[k + 1]) @ c2w[k] for k in range(4)]
        np.testing.assert_allclose(chain_relative_poses(rel, c2w[0]), np.stack(c2w), atol=1e-9)


class TestReporting:
    def test_table_orders(self):
        assert TABLE_ORDERS["accuracy"] == ("abs_rel", "rms", "delta1", "delta2", "delta3")
        assert TABLE_ORDERS["errors"] == ("abs_rel", "sq_rel", "rms", "rms_log")

    def test_table_and_csv(self):
        r = MetricsReport(abs_rel=0.1, rms=0.2, delta1=0.8, delta2=0.9, delta3=0.95)
        text = format_table(r, TABLE_ORDERS["accuracy"])
        header = text.splitlines()[0]
        assert header.index("AbsRel") < header.index("RMS") < header.index("d1")
        assert csv_header(TABLE_ORDERS["accuracy"]) == "abs_rel,rms,delta1,delta2,delta3"
        assert csv_row(r, TABLE_ORDERS["accuracy"]) == "0.1,0.2,0.8,0.9,0.95"
