"""
Unit tests for the sparse residual module
"""
import unittest

import numpy as np

from src.errors import ContractViolation, DimensionError, ParameterError
from src.lowrank_adamw import DenseMoments, LowRankMoments, OptimizerConfig, step_dense, step_lowrank
from src.matrix_core import SeededRng, qr_thin
from src.oracles import DenseResidualTrace, trace_step
from src.projection import ProjectionMethod, ProjectionState, Side, compute_full_projection
from src.sparse_residual import (
    ResidualConfig,
    ResidualState,
    SparseDelta,
    SparseIndex,
    SparseResidual,
    apply_update,
    build_index,
    index_size,
    residual_step,
)


def left_state(basis):
    return ProjectionState(basis, Side.LEFT, 0, ProjectionMethod.FULL_SVD)


def dense_index(shape):
    rows, cols = np.divmod(np.arange(shape[0] * shape[1]), shape[1])
    return SparseIndex(rows, cols, shape, 1.0)


class TestBuildIndex(unittest.TestCase):
    """Test cases for build_index"""

    def test_dominant_entry(self):
        """Test that a single dominant entry is selected"""
        mp = np.full((4, 5), 0.01)
        mp[2, 3] = 7.0
        index = build_index(np.eye(4), mp, 0.05)
        self.assertEqual(index.positions, [(2, 3)])

    def test_ties_row_major(self):
        """Test the row-major tie rule"""
        index = build_index(np.eye(4), np.ones((4, 4)), 0.25)
        self.assertEqual(index.positions, [(0, 0), (0, 1), (0, 2), (0, 3)])

    def test_matches_full_sort(self):
        """Test against a full-sort oracle"""
        rng = SeededRng(0)
        p = qr_thin(rng.standard_normal(32, 4))
        mp = rng.standard_normal(4, 48)
        index = build_index(p, mp, 0.012)
        values = np.abs(p @ mp)
        count = int(np.ceil(0.012 * 32 * 48))
        flat = sorted(range(values.size), key=lambda i: (-values.flat[i], i))[:count]
        expected = sorted((i // 48, i % 48) for i in flat)
        self.assertEqual(len(index), count)
        self.assertEqual(index.positions, expected)

    def test_cardinality_and_order(self):
        """Test |index| = ceil(rho m n), distinct and sorted"""
        rng = SeededRng(1)
        for ratio, shape in ((0.012, (64, 64)), (0.1, (7, 13)), (1.0, (3, 5))):
            p = qr_thin(rng.standard_normal(shape[0], 2))
            index = build_index(p, rng.standard_normal(2, shape[1]), ratio)
            self.assertEqual(len(index), index_size(ratio, shape))
            self.assertEqual(len(set(index.positions)), len(index))
            self.assertEqual(index.positions, sorted(index.positions))

    def test_exact_ratio_is_not_rounded_up(self):
        """Test ceil of an exactly representable product"""
        self.assertEqual(index_size(0.25, (4, 4)), 4)
        self.assertEqual(index_size(0.012, (128, 128)), 197)

    def test_right_side_in_original_coordinates(self):
        """Test that a right-side basis reports positions of the m x n matrix"""
        g = np.zeros((6, 3))
        g[4, 1] = 10.0
        g += 0.01 * SeededRng(2).standard_normal(6, 3)
        state = compute_full_projection(g, 1, use_rsvd=False)
        self.assertIs(state.side, Side.RIGHT)
        index = build_index(state.basis, state.project(g), 0.1, state.side)
        self.assertEqual(index.shape, (6, 3))
        self.assertEqual(len(index), 2)
        self.assertIn((4, 1), index.positions)

    def test_empty_index(self):
        """Test rho = 0 and a too-small rho"""
        self.assertEqual(len(build_index(np.eye(3), np.ones((3, 3)), 0.0)), 0)
        with self.assertRaises(ParameterError):
            build_index(np.eye(3), np.ones((3, 3)), 0.05)


class TestResidualStep(unittest.TestCase):
    """Test cases for residual_step"""

    def setUp(self):
        """Set up test fixtures"""
        self.cfg = OptimizerConfig(lr=0.01)
        self.rng = SeededRng(3)

    def run_fast_path(self, basis, gradients, shape):
        """Low-rank steps plus a dense-index residual, from step 1."""
        proj = left_state(basis)
        moments = LowRankMoments.zeros(proj.compact_shape(shape))
        state = ResidualState.inactive(1).activate(dense_index(shape))
        deltas = []
        for t, g in enumerate(gradients, start=1):
            _, moments, compact = step_lowrank(g, proj, moments, self.cfg)
            delta, state = residual_step(g, proj, compact.vp, state, t, self.cfg)
            deltas.append(delta)
        return state, deltas

    def test_square_basis_gives_zero_delta(self):
        """Test that an orthonormal square P leaves no residual"""
        shape = (5, 7)
        basis = qr_thin(self.rng.standard_normal(5, 5))
        state, deltas = self.run_fast_path(basis, [self.rng.standard_normal(*shape) for _ in range(5)], shape)
        for delta in deltas:
            self.assertLessEqual(np.max(np.abs(delta.values)), 1e-6)
        self.assertLessEqual(np.max(np.abs(state.dm)), 1e-14)

    def test_first_moment_residual_is_exact(self):
        """Test dM against M - P Mp from the dense trace over 50 steps"""
        shape = (12, 10)
        basis = qr_thin(self.rng.standard_normal(12, 4))
        gradients = [self.rng.standard_normal(*shape) for _ in range(50)]
        state, _ = self.run_fast_path(basis, gradients, shape)

        trace = DenseResidualTrace.start(basis, shape)
        for g in gradients:
            trace = trace_step(g, basis, trace, self.cfg)
        np.testing.assert_allclose(state.dm.reshape(shape), trace.dm_exact, atol=1e-10)

    def test_second_moment_residual_misses_dropped_term(self):
        """Test exact dV minus the recursion equals the accumulated dropped term"""
        shape = (10, 8)
        basis = qr_thin(self.rng.standard_normal(10, 3))
        gradients = [self.rng.standard_normal(*shape) for _ in range(50)]
        state, _ = self.run_fast_path(basis, gradients, shape)

        trace = DenseResidualTrace.start(basis, shape)
        for g in gradients:
            trace = trace_step(g, basis, trace, self.cfg)
        np.testing.assert_allclose(trace.dv_exact - state.dv.reshape(shape), trace.dropped, atol=1e-10)
        self.assertGreater(np.max(np.abs(trace.dropped)), 1e-6)

    def test_clamps_are_counted(self):
        """Test that negative second-moment estimates give no correction and are counted"""
        shape = (2, 1)
        basis = np.array([[1.0], [0.0]])
        proj = left_state(basis)
        index = dense_index(shape)
        state = ResidualState(index, np.array([3.0, -3.0]), np.array([-5.0, -5.0]), 1, active=True)
        g = np.array([[1.0], [1.0]])
        vp = np.zeros((1, 1))
        delta, state = residual_step(g, proj, vp, state, 1, self.cfg)
        self.assertEqual(state.clamp_count, 2)
        np.testing.assert_array_equal(delta.values, 0.0)
        self.assertNotEqual(float(np.max(np.abs(state.dm))), 0.0)

    def test_correction_is_clipped(self):
        """Test a tiny positive second-moment estimate cannot blow the correction up"""
        shape = (2, 1)
        proj = left_state(np.array([[1.0], [0.0]]))
        state = ResidualState(dense_index(shape), np.array([5.0, -5.0]), np.array([1e-30, 1e-30]), 1, active=True)
        g = np.zeros(shape)
        delta, _ = residual_step(g, proj, np.zeros((1, 1)), state, 1, self.cfg, clip=0.25)
        np.testing.assert_array_equal(delta.values, [0.25, -0.25])
        self.assertLessEqual(float(np.max(np.abs(self.cfg.lr * delta.values))), self.cfg.lr * 0.25)

    def test_second_moment_without_memory(self):
        """Test beta2 = 0 leaves dV = 2 * G_hat * dG of the current gradient"""
        cfg = OptimizerConfig(lr=0.01, beta2=0.0)
        shape = (6, 5)
        basis = qr_thin(self.rng.standard_normal(6, 2))
        state = ResidualState(dense_index(shape), np.zeros(30), self.rng.normal_array((30,)), 1, active=True)
        g = self.rng.standard_normal(*shape)
        _, state = residual_step(g, left_state(basis), np.ones((2, 5)), state, 4, cfg)
        g_hat = basis @ (basis.T @ g)
        np.testing.assert_allclose(state.dv.reshape(shape), 2.0 * g_hat * (g - g_hat), atol=1e-14)

    def test_correction_against_direct_evaluation(self):
        """Test the correction direction against a dense evaluation of the same formulas"""
        cfg = self.cfg
        shape = (6, 4)
        t = 3
        basis = np.eye(6)[:, :3]
        vp = 10.0 + self.rng.standard_normal(3, 4) ** 2
        dm0, dv0 = self.rng.normal_array((24,)), self.rng.normal_array((24,))
        state = ResidualState(dense_index(shape), dm0, dv0, 1, active=True)
        g = self.rng.standard_normal(*shape)
        delta, _ = residual_step(g, left_state(basis), vp, state, t, cfg, clip=1e6)

        g_hat = basis @ (basis.T @ g)
        dg = g - g_hat
        dm = cfg.beta1 * dm0.reshape(shape) + (1 - cfg.beta1) * dg
        dv = cfg.beta2 * dv0.reshape(shape) + 2 * (1 - cfg.beta2) * g_hat * dg
        radicand = (basis @ vp + dv) / (1 - cfg.beta2 ** t)
        expected = np.where(
            radicand > 0.0,
            (dm / (1 - cfg.beta1 ** t)) / (np.sqrt(np.maximum(radicand, 0.0)) + cfg.eps),
            0.0,
        )
        np.testing.assert_allclose(delta.to_dense(), expected, rtol=1e-10, atol=1e-12)
        # Rows covered by the basis carry P V' and always get a correction
        self.assertTrue(np.all(radicand[:3] > 0.0))

    def test_inactive_state_rejected(self):
        """Test the activation contract"""
        with self.assertRaises(ContractViolation):
            residual_step(np.zeros((2, 2)), left_state(np.eye(2)), np.zeros((2, 2)), ResidualState.inactive(3), 4, self.cfg)

    def test_support_stays_on_index(self):
        """Test that the residual lives on the index only"""
        shape = (6, 6)
        basis = qr_thin(self.rng.standard_normal(6, 2))
        index = build_index(basis, self.rng.standard_normal(2, 6), 0.2)
        state = ResidualState.inactive(1).activate(index)
        delta, state = residual_step(self.rng.standard_normal(*shape), left_state(basis), np.ones((2, 6)), state, 2, self.cfg)
        self.assertEqual(state.dm.shape, (len(index),))
        dense = delta.to_dense()
        outside = np.ones(shape, dtype=bool)
        outside[index.rows, index.cols] = False
        self.assertTrue(np.all(dense[outside] == 0.0))
        self.assertEqual(state.element_count, 2 * len(index))
        self.assertEqual(state.element_count, index.value_slots)
        self.assertEqual(state.index_elements, index.index_slots)
        self.assertEqual(state.index_elements, 2 * len(index))


class TestApplyUpdate(unittest.TestCase):
    """Test cases for apply_update"""

    def setUp(self):
        """Set up test fixtures"""
        self.cfg = OptimizerConfig(lr=0.1)
        self.w = SeededRng(4).standard_normal(3, 4)

    def test_without_delta(self):
        """Test a plain descent step"""
        update = np.full((3, 4), 0.5)
        np.testing.assert_array_equal(apply_update(self.w, update, None, self.cfg), self.w - update)

    def test_single_entry_delta(self):
        """Test that a one-entry delta changes exactly one weight"""
        index = SparseIndex(np.array([1]), np.array([2]), (3, 4), 1 / 12)
        updated = apply_update(self.w, np.zeros((3, 4)), SparseDelta(index, np.array([2.0])), self.cfg, 0.5)
        changed = np.argwhere(updated != self.w)
        self.assertEqual(changed.tolist(), [[1, 2]])
        self.assertAlmostEqual(updated[1, 2], self.w[1, 2] - 0.1 * 0.5 * 2.0, places=15)

    def test_weight_decay(self):
        """Test decoupled weight decay"""
        cfg = OptimizerConfig(lr=0.1, weight_decay=0.01)
        np.testing.assert_allclose(apply_update(self.w, np.zeros((3, 4)), None, cfg), self.w * (1 - 0.001), atol=1e-14)

    def test_input_not_mutated(self):
        """Test purity"""
        before = self.w.copy()
        apply_update(self.w, np.ones((3, 4)), None, self.cfg)
        np.testing.assert_array_equal(self.w, before)

    def test_shape_mismatch(self):
        """Test update shape validation"""
        with self.assertRaises(DimensionError):
            apply_update(self.w, np.zeros((4, 3)), None, self.cfg)

    def test_identity_with_dense_residual_matches_dense(self):
        """Test r = m, P = I, rho = 1 reproduces dense AdamW"""
        cfg = OptimizerConfig(lr=0.01)
        shape = (4, 6)
        rng = SeededRng(5)
        proj = compute_full_projection(rng.standard_normal(*shape), 4, use_rsvd=False)
        dense_w = lowrank_w = rng.standard_normal(*shape)
        dense = DenseMoments.zeros(shape)
        moments = LowRankMoments.zeros(proj.compact_shape(shape))
        residual = SparseResidual(ResidualConfig(ratio=1.0, warmup_k=1))
        for t in range(1, 21):
            g = rng.standard_normal(*shape)
            update, dense = step_dense(g, dense, cfg)
            dense_w = apply_update(dense_w, update, None, cfg)
            update, moments, compact = step_lowrank(g, proj, moments, cfg)
            delta = residual.observe(t, g, proj, compact, cfg)
            lowrank_w = apply_update(lowrank_w, update, delta, cfg)
            self.assertLessEqual(np.max(np.abs(dense_w - lowrank_w)), 1e-10)


class TestSparseResidual(unittest.TestCase):
    """Test cases for the warm-up orchestration"""

    def test_warmup_then_frozen_index(self):
        """Test no delta before k, index built at k and never changed"""
        cfg = OptimizerConfig(lr=0.01)
        rng = SeededRng(6)
        shape = (8, 10)
        proj = left_state(qr_thin(rng.standard_normal(8, 2)))
        moments = LowRankMoments.zeros((2, 10))
        residual = SparseResidual(ResidualConfig(ratio=0.05, warmup_k=3))
        frozen = None
        for t in range(1, 9):
            g = rng.standard_normal(*shape)
            _, moments, compact = step_lowrank(g, proj, moments, cfg)
            delta = residual.observe(t, g, proj, compact, cfg)
            if t <= 3:
                self.assertIsNone(delta)
            else:
                self.assertIsNotNone(delta)
            if t < 3:
                self.assertIsNone(residual.index)
                self.assertFalse(residual.state.active)
            if t == 3:
                frozen = residual.index.positions
                self.assertEqual(len(frozen), index_size(0.05, shape))
                np.testing.assert_array_equal(residual.state.dm, 0.0)
            if t > 3:
                self.assertEqual(residual.index.positions, frozen)

    def test_config_validation(self):
        """Test residual settings"""
        with self.assertRaises(ParameterError):
            ResidualConfig(ratio=1.5)
        with self.assertRaises(ParameterError):
            ResidualConfig(warmup_k=0)
        with self.assertRaises(ParameterError):
            ResidualConfig(clip=0.0)


if __name__ == '__main__':
    unittest.main()
