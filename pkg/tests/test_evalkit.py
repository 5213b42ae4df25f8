import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fidel.config import ExperimentConfig
from fidel.data_io import Dataset
from fidel.evalkit import (
    CellReport,
    RevealReport,
    RoundResult,
    candidates_from_update,
    count_revealed,
    match_candidates,
    measure_round,
    pearson,
    pearson_matrix,
    run_sweep,
)
from fidel.nn import build_victim

from oracles import pearson_direct

finite = st.floats(-1e3, 1e3, allow_nan=False, width=64)
vectors = st.integers(2, 40).flatmap(lambda n: st.tuples(arrays(np.float64, n, elements=finite),
                                                          arrays(np.float64, n, elements=finite)))


def spread(v):
    return np.ptp(v) > 1e-6 * max(1.0, np.max(np.abs(v)))


class TestPearson:
    @pytest.mark.parametrize("a, b, want", [
        ([1, 2, 3], [1, 2, 3], 1.0),
        ([1, 2, 3], [3, 2, 1], -1.0),
        ([1, 2, 3, 4], [2, 4, 5, 9], 11 / math.sqrt(130)),  # 0.96476 by hand
    ])
    def test_examples(self, a, b, want):
        assert pearson(a, b) == pytest.approx(want, abs=1e-4)
        assert pearson_direct(a, b) == pytest.approx(want, abs=1e-4)

    def test_constant_input_is_undefined(self):
        assert math.isnan(pearson([1, 1, 1], [1, 2, 3]))

    @pytest.mark.parametrize("a, b", [([1], [1]), ([1, 2], [1, 2, 3])])
    def test_bad_lengths(self, a, b):
        with pytest.raises(ValueError):
            pearson(a, b)

    def test_tensors_are_flattened(self):
        a = np.arange(12.0).reshape(2, 3, 2)
        assert pearson(a, a.ravel() ** 2) == pytest.approx(pearson_direct(a, a.ravel() ** 2), abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(vectors)
    def test_symmetry_and_range(self, ab):
        a, b = ab
        assume(spread(a) and spread(b))
        r = pearson(a, b)
        assert r == pytest.approx(pearson(b, a), abs=1e-14)
        assert -1.0 <= r <= 1.0

    @settings(max_examples=200, deadline=None)
    @given(vectors)
    def test_matches_direct_formula(self, ab):
        a, b = ab
        assume(spread(a) and spread(b))
        assert pearson(a, b) == pytest.approx(pearson_direct(a, b), abs=1e-10)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(2, 50), elements=finite), st.floats(0.01, 100), st.sampled_from([-1, 1]),
           st.floats(-100, 100))
    def test_affine_invariance(self, a, c, sign, d):
        assume(spread(a))
        assert pearson(a, sign * c * a + d) == pytest.approx(sign, abs=1e-12)

    def test_matrix_agrees_with_scalar(self):
        rng = np.random.default_rng(0)
        c, s = rng.normal(size=(4, 9)), rng.normal(size=(3, 9))
        r = pearson_matrix(c, s)
        assert r.shape == (4, 3)
        assert all(r[i, j] == pytest.approx(pearson(c[i], s[j]), abs=1e-12) for i in range(4) for j in range(3))

    def test_matrix_constant_rows_are_zero(self):
        r = pearson_matrix(np.ones((1, 5)), np.arange(10.0).reshape(2, 5))
        assert r.tolist() == [[0.0, 0.0]]


class TestCounting:
    @pytest.fixture
    def private(self):
        return np.random.default_rng(1).random((5, 8, 8, 1))

    def test_exact_copies(self, private):
        assert count_revealed(private, private) == 5

    def test_negative_scaled_copies_count(self, private):
        assert count_revealed(-3 * private + 1, private) == 5

    def test_same_sample_twice_counts_once(self, private):
        assert count_revealed([private[2], 2 * private[2]], private) == 1

    def test_noise_reveals_nothing(self, private):
        noise = np.random.default_rng(2).normal(size=(50, 8, 8, 1))
        assert count_revealed(noise, private) == 0

    def test_candidate_reveals_only_its_best_match(self):
        a = np.random.default_rng(3).random(100)
        b = a + 1e-3 * np.random.default_rng(4).random(100)  # r(a, b) > 0.98 too
        m = match_candidates([a], [a, b])
        assert m.count == 1 and m.revealed.tolist() == [True, False]
        assert m.best_abs_r[1] >= 0.98

    def test_no_candidates(self, private):
        m = match_candidates([], private)
        assert m.count == 0 and m.best_abs_r.tolist() == [0.0] * 5

    def test_empty_private_batch(self):
        with pytest.raises(ValueError):
            count_revealed([np.ones(4)], [])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.5, 1.0), st.floats(0.5, 1.0), st.integers(1, 6))
    def test_monotone_in_threshold_and_candidates(self, seed, t1, t2, extra):
        rng = np.random.default_rng(seed)
        private = rng.random((6, 16))
        # candidates are noisy mixtures so correlations spread over the interesting range
        mix = rng.dirichlet(np.full(6, 0.2), size=8)
        cands = mix @ private + rng.normal(0, 0.05, (8, 16))
        lo, hi = sorted((t1, t2))
        assert count_revealed(cands, private, lo) >= count_revealed(cands, private, hi)
        more = np.vstack([cands, rng.random((extra, 16))])
        # an extra candidate may steal nothing: each one only votes for its own best sample
        assert count_revealed(more, private, lo) >= count_revealed(cands, private, lo)
        assert 0 <= count_revealed(cands, private, lo) <= 6


def pool_of(n, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.integers(0, 256, (n, 28, 28, 1), dtype=np.uint8), rng.integers(0, 10, n).astype(np.uint8),
                   "random", "test")


class TestRounds:
    def test_single_sample_is_always_revealed(self):
        cfg = ExperimentConfig(rounds=5, n_values=(1,))
        victim = build_victim(seed=0)
        for k in range(5):
            result, _ = measure_round(victim, pool_of(50), cfg, "relu", False, 1, k)
            assert result.revealed == 1 and result.mean_abs_r_best > 0.9999

    def test_rounds_draw_different_batches(self):
        cfg = ExperimentConfig()
        victim = build_victim(seed=0)
        a, _ = measure_round(victim, pool_of(100), cfg, "relu", False, 5, 0)
        b, _ = measure_round(victim, pool_of(100), cfg, "relu", False, 5, 1)
        assert len(set(a.indices)) == 5
        assert a.indices.tolist() != b.indices.tolist()

    def test_fcnn_candidates_are_images(self):
        victim = build_victim(seed=0)
        _, update = measure_round(victim, pool_of(10), ExperimentConfig(), "relu", False, 2, 0)
        cands = candidates_from_update(update, victim)
        assert cands.shape[1:] == (28, 28, 1) and len(cands) > 0

    def test_counts_are_bounded(self):
        victim = build_victim(seed=1)
        for n in (2, 7):
            result, _ = measure_round(victim, pool_of(60), ExperimentConfig(), "relu", False, n, 0)
            assert 0 <= result.revealed <= n


@pytest.fixture(scope="module")
def data():
    return pool_of(300, 1), pool_of(200, 2), pool_of(50, 3)


class TestSweep:
    def config(self, **kw):
        base = dict(rounds=4, n_values=(1, 5), activations=("relu", "tanh"), dropouts=(True, False),
                    pretrain_epochs=0)
        base.update(kw)
        return ExperimentConfig(**base)

    def test_cells_and_bounds(self, data):
        report = run_sweep(self.config(), data)
        assert len(report.cells) == 8
        for cell in report.cells:
            assert len(cell.rounds) == 4
            assert 0 <= cell.mean <= cell.n
        assert report.cell("relu", True, 1).mean == 1.0

    def test_identical_csv_on_rerun_and_with_threads(self, data):
        a = run_sweep(self.config(), data)
        b = run_sweep(self.config(threads=3), data)
        assert a.results_csv() == b.results_csv()
        assert a.summary_csv() == b.summary_csv()
        assert a.plot_tsv() == b.plot_tsv()

    def test_cells_do_not_depend_on_other_cells(self, data):
        full = run_sweep(self.config(), data)
        alone = run_sweep(self.config(activations=("tanh",), dropouts=(False,), n_values=(5,)), data)
        want = [r.revealed for r in full.cell("tanh", False, 5).rounds]
        assert [r.revealed for r in alone.cell("tanh", False, 5).rounds] == want

    def test_continuing_mode_runs(self, data):
        report = run_sweep(self.config(continue_training=True, n_values=(5,), activations=("relu",),
                                       dropouts=(False,)), data)
        assert len(report.cells[0].rounds) == 4

    def test_write(self, data, tmp_path):
        report = run_sweep(self.config(rounds=2, n_values=(1,), activations=("relu",)), data)
        report.write(tmp_path)
        header = (tmp_path / "results.csv").read_text().splitlines()[0]
        assert header == "dataset,arch,activation,dropout,n,round,revealed,mean_abs_r_best"
        assert (tmp_path / "plot.tsv").read_text().splitlines()[0] == "n\trelu+dropout\trelu"


class TestReport:
    def test_stderr(self):
        cell = CellReport("relu", True, 3, [RoundResult(np.arange(3), k, 0.5, 3) for k in (1, 2, 3)])
        assert cell.mean == 2.0
        assert cell.stderr == pytest.approx(1 / math.sqrt(3))

    def test_missing_cell(self):
        with pytest.raises(KeyError):
            RevealReport(ExperimentConfig()).cell("relu", True, 30)
