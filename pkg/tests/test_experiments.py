"""Experiment harness: seeded determinism, dominance policing, CSV output."""

import numpy as np
import pytest

from lipmha.bounds import bound_2, bound_inf
from lipmha.attention import MhaParams
from lipmha.experiments import (
    DominanceViolation,
    SweepRow,
    bound_tightness_sweep,
    dp_divergence_demo,
    glorot_params,
    invertibility_grid,
    lower_bound_search,
)
from lipmha.linalg import phi_inv


class TestSweepRow:
    def test_dominance_violation_raises_instead_of_clamping(self):
        with pytest.raises(DominanceViolation):
            SweepRow(n=4, lower_bounds=(2.0, 3.5), upper_bound=3.0, restarts=2, seed=0)

    def test_ordinary_row_constructs(self):
        row = SweepRow(n=4, lower_bounds=(2.9, 2.0), upper_bound=3.0, restarts=2, seed=0)
        assert row.lower_bounds == (2.9, 2.0)


class TestLowerBoundSearch:
    def test_two_element_sequence_respects_its_bound(self):
        row = lower_bound_search(2, restarts=4, top_k=2, seed=0, max_steps=60)
        cap = 4.0 * phi_inv(1.0) + 1.0
        assert row.upper_bound == pytest.approx(cap, rel=1e-12)
        for lb in row.lower_bounds:
            assert lb <= cap

    def test_same_seed_is_bit_identical(self):
        a = lower_bound_search(5, restarts=3, top_k=3, seed=42, max_steps=40)
        b = lower_bound_search(5, restarts=3, top_k=3, seed=42, max_steps=40)
        assert a.lower_bounds == b.lower_bounds
        assert a.upper_bound == b.upper_bound

    def test_results_sorted_descending(self):
        row = lower_bound_search(4, restarts=5, top_k=4, seed=1, max_steps=30)
        assert list(row.lower_bounds) == sorted(row.lower_bounds, reverse=True)

    def test_p2_variant_runs_at_desk_scale(self):
        row = lower_bound_search(3, p=2, restarts=2, top_k=2, seed=0, max_steps=25)
        assert row.upper_bound == pytest.approx(bound_2(MhaParams.identity(1), 3).value, rel=1e-12)
        for lb in row.lower_bounds:
            assert 0.0 < lb <= row.upper_bound

    def test_restart_budget_validated(self):
        with pytest.raises(ValueError):
            lower_bound_search(4, restarts=2, top_k=3)


class TestBoundTightnessSweep:
    def test_single_length_gives_single_row(self, tmp_path):
        out = tmp_path / "sweep.csv"
        rows = bound_tightness_sweep([6], restarts=2, top_k=2, seed=3, max_steps=25, out_path=out)
        assert len(rows) == 1
        lines = out.read_text().splitlines()
        assert lines[0] == "# schema=lipmha.sweep.v1"
        assert lines[1].startswith("n,p,upper_bound,lower_1,lower_2")
        assert len(lines) == 3

    def test_csv_bytes_are_deterministic(self, tmp_path):
        paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
        for p in paths:
            bound_tightness_sweep([4, 6], restarts=2, top_k=2, seed=9, max_steps=25, out_path=p)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_requires_ascending_lengths(self):
        with pytest.raises(ValueError):
            bound_tightness_sweep([6, 4], restarts=1, top_k=1)
        with pytest.raises(ValueError):
            bound_tightness_sweep([], restarts=1, top_k=1)


class TestInvertibilityGrid:
    def test_l2_inverts_and_dp_does_not_at_small_scale(self, tmp_path):
        out = tmp_path / "grid.csv"
        l2 = invertibility_grid("l2", [0.5, 0.9], [20], n=12, d=8, h=2, batch=6, seed=0,
                                out_path=out)
        dp = invertibility_grid("dp", [0.9], [20], n=12, d=8, h=2, batch=6, seed=0)
        for _, _, _, err in l2:
            assert err < 1e-10
        assert dp[0][3] > 1e-1
        lines = out.read_text().splitlines()
        assert lines[0] == "# schema=lipmha.invert.v1"
        assert lines[1] == "kind,c,iters,max_error"

    def test_single_iteration_leaves_a_nonzero_residual(self):
        res = invertibility_grid("l2", [0.5], [1], n=6, d=4, h=2, batch=3, seed=1)
        assert res[0][3] > 0.0

    def test_validation(self):
        with pytest.raises(ValueError):
            invertibility_grid("l2", [0.5], [0], n=4, d=4, h=1, batch=2)
        with pytest.raises(ValueError):
            invertibility_grid("l2", [1.5], [3], n=4, d=4, h=1, batch=2)
        with pytest.raises(ValueError):
            invertibility_grid("qk", [0.5], [3], n=4, d=4, h=1, batch=2)

    def test_deterministic_bytes(self, tmp_path):
        paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
        for p in paths:
            invertibility_grid("dp", [0.7], [2, 4], n=6, d=4, h=2, batch=3, seed=5, out_path=p)
        assert paths[0].read_bytes() == paths[1].read_bytes()


class TestDpDivergenceDemo:
    def test_rejects_zero_steps(self):
        with pytest.raises(ValueError):
            dp_divergence_demo(steps=0)

    def test_trace_grows_and_its_envelope_is_monotone(self):
        trace = dp_divergence_demo(n=3, d=1, steps=500, lr=0.1, seed=0)
        values = [v for _, v in trace]
        assert values[-1] > 100.0 * values[0]
        running = np.maximum.accumulate(values)
        assert np.all(np.diff(running) >= 0.0)

    def test_deterministic_bytes(self, tmp_path):
        paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
        for p in paths:
            dp_divergence_demo(n=3, d=1, steps=25, seed=7, out_path=p)
        assert paths[0].read_bytes() == paths[1].read_bytes()
        lines = paths[0].read_text().splitlines()
        assert lines[0] == "# schema=lipmha.diverge.v1"
        assert lines[1] == "step,j_norm_inf"
        assert len(lines) == 2 + 26


class TestGlorotParams:
    def test_shapes_and_tying(self):
        p = glorot_params(8, 2, kind="l2", tied=True, seed=0)
        assert p.wq.shape == (2, 8, 4) and p.tied
        np.testing.assert_array_equal(p.wq, p.wk)
        q = glorot_params(8, 2, kind="dp", tied=False, seed=0)
        assert not np.array_equal(q.wq, q.wk)

    def test_bound_is_finite_and_positive(self):
        p = glorot_params(16, 4, kind="l2", tied=True, seed=1)
        assert 0.0 < bound_inf(p, 32).value < np.inf
