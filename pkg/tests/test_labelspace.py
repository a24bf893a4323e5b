import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fdsos.geometry import BoxXYXY, to_cxcywh
from fdsos.labelspace import (
    FD_PROMPT,
    TEETH_PROMPT,
    VOCABULARY,
    QueryRole,
    ToothLabel,
    attributes,
    is_diagnosed,
    sample_denoising_batch,
    sample_denoising_queries,
    transition_distribution,
    transition_matrix,
    uniform_transition_distribution,
)

P_GRID = [round(0.1 * i, 1) for i in range(11)]
FD, NOFD, ANT, POST = (
    ToothLabel.ANTERIOR_FD,
    ToothLabel.ANTERIOR_NO_FD,
    ToothLabel.ANTERIOR_TEETH,
    ToothLabel.POSTERIOR_TEETH,
)


class TestVocabulary:
    def test_attributes(self):
        assert attributes(FD) == (1, 1)
        assert attributes(NOFD) == (1, 0)
        assert attributes(POST) == (0, None)
        assert attributes(ANT) == (1, None)

    def test_unknown_diagnosis_is_distinct(self):
        d_unknown = attributes(ANT)[1]
        assert d_unknown != 0 and d_unknown != 1
        assert not is_diagnosed(ANT) and not is_diagnosed(POST)
        assert is_diagnosed(FD) and is_diagnosed(NOFD)

    def test_prompt_strings(self):
        assert [lab.prompt for lab in VOCABULARY] == [
            "Posterior Teeth",
            "Anterior Teeth",
            "Anterior Teeth No FD",
            "Anterior Teeth FD",
        ]
        assert ToothLabel.from_prompt("Anterior Teeth FD") is FD
        with pytest.raises(ValueError):
            ToothLabel.from_prompt("Molar")

    def test_task_prompts_partition_vocabulary(self):
        assert set(TEETH_PROMPT) | set(FD_PROMPT) == set(VOCABULARY)
        assert not set(TEETH_PROMPT) & set(FD_PROMPT)


class TestTransition:
    def test_diagnosed_example(self):
        d = transition_distribution(FD, 0.4)
        assert d[FD] == pytest.approx(0.6, abs=1e-15)
        assert d[NOFD] == pytest.approx(0.2, abs=1e-15)
        assert d[POST] == pytest.approx(0.2, abs=1e-15)
        assert d[ANT] == 0.0

    def test_posterior_example(self):
        d = transition_distribution(POST, 0.4)
        assert d[POST] == pytest.approx(0.6, abs=1e-15)
        assert d[ANT] == pytest.approx(0.4, abs=1e-15)
        assert d[FD] == 0.0 and d[NOFD] == 0.0

    def test_undiagnosed_anterior(self):
        d = transition_distribution(ANT, 0.3)
        assert d[POST] == pytest.approx(0.3, abs=1e-15)
        assert d[FD] == 0.0 and d[NOFD] == 0.0

    @pytest.mark.parametrize("y", VOCABULARY)
    def test_zero_p_is_point_mass(self, y):
        d = transition_distribution(y, 0.0)
        assert d[y] == 1.0
        assert d.as_vector().sum() == 1.0

    @pytest.mark.parametrize("p", P_GRID)
    @pytest.mark.parametrize("y", VOCABULARY)
    def test_sums_to_one(self, y, p):
        assert abs(transition_distribution(y, p).as_vector().sum() - 1.0) <= 1e-12
        assert abs(uniform_transition_distribution(y, p).as_vector().sum() - 1.0) <= 1e-12

    @pytest.mark.parametrize("p", P_GRID)
    def test_never_invents_a_diagnosis(self, p):
        for y in (POST, ANT):
            d = transition_distribution(y, p)
            assert d[FD] == 0.0 and d[NOFD] == 0.0

    def test_uniform_baseline(self):
        d = uniform_transition_distribution(ANT, 0.6)
        for lab in (POST, NOFD, FD):
            assert d[lab] == pytest.approx(0.2, abs=1e-15)

    @pytest.mark.parametrize("p", [-0.01, 1.01, float("nan")])
    def test_bad_p(self, p):
        with pytest.raises(ValueError):
            transition_distribution(FD, p)

    def test_matrix_rows(self):
        m = transition_matrix(0.5)
        for i, y in enumerate(VOCABULARY):
            np.testing.assert_array_equal(m[i], transition_distribution(y, 0.5).as_vector())


class TestSampler:
    gt = [(FD, BoxXYXY(0.3, 0.4, 0.4, 0.6)), (POST, BoxXYXY(0.05, 0.45, 0.15, 0.55))]

    def test_zero_p_all_positive(self):
        qs = sample_denoising_queries(self.gt, p=0.0, num_groups=2, rng=np.random.default_rng(0))
        assert len(qs) == 4
        assert all(q.role is QueryRole.POSITIVE for q in qs)
        assert [q.label for q in qs] == [FD, POST, FD, POST]
        assert [q.group_index for q in qs] == [0, 0, 1, 1]
        assert [q.source_gt_index for q in qs] == [0, 1, 0, 1]

    def test_monte_carlo_frequencies(self):
        n = 100_000
        batch = sample_denoising_batch(
            [FD.index], to_cxcywh(self.gt[0][1]).as_array()[None], 0.4, n, 1.0, 0.4, np.random.default_rng(7)
        )
        freq = np.bincount(batch.labels, minlength=len(VOCABULARY)) / n
        expected = transition_distribution(FD, 0.4).as_vector()
        assert np.abs(freq - expected).max() < 0.01

    @given(st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
    def test_posterior_never_gets_diagnosis(self, p, seed):
        qs = sample_denoising_queries([self.gt[1]], p=p, num_groups=20, rng=np.random.default_rng(seed))
        assert all(q.label in (POST, ANT) for q in qs)

    def test_roles_follow_labels(self):
        qs = sample_denoising_queries(self.gt, p=0.7, num_groups=50, rng=np.random.default_rng(1))
        for q in qs:
            same = q.label is self.gt[q.source_gt_index][0]
            assert (q.role is QueryRole.POSITIVE) == same

    def test_reproducible(self):
        a = sample_denoising_queries(self.gt, 0.5, 3, rng=np.random.default_rng(11))
        b = sample_denoising_queries(self.gt, 0.5, 3, rng=np.random.default_rng(11))
        assert a == b

    def test_uniform_baseline_can_invent_diagnosis(self):
        batch = sample_denoising_batch(
            [ANT.index], np.array([[0.5, 0.5, 0.2, 0.2]]), 0.5, 2000, 1.0, 0.4,
            np.random.default_rng(2), conditional=False,
        )
        assert np.isin(batch.labels, [FD.index, NOFD.index]).any()

    def test_errors(self):
        with pytest.raises(ValueError):
            sample_denoising_queries([], rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            sample_denoising_queries(self.gt, num_groups=0, rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            sample_denoising_queries(self.gt)
