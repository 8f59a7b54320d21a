"""Tests for functional extraction and rank-normalized split R-hat."""

import numpy as np
import pytest

from stapdp.basis import build_basis, difference_penalty
from stapdp.diagnostics import (
    ChainMatrix,
    default_functionals,
    functional_traces,
    rhat_table,
    split_rhat,
)
from stapdp.sampler import PriorConfig, SamplerConfig, run_chain
from stapdp.simgen import ScenarioConfig, gen_scenario


def tiny_run(chains=2, draws=12, seed=30):
    scen = ScenarioConfig(n_subjects=8, mean_count=5, nu=0.0,
                          law_strong="uniform", law_weak="uniform")
    dataset, _ = gen_scenario(scen, seed=1)
    basis = build_basis(3, 7, dataset.radius)
    decomp = difference_penalty(7, 2)
    config = SamplerConfig(burnin=10, draws=draws, chains=chains)
    return run_chain(dataset, basis, decomp, PriorConfig(n_clusters=3),
                     config, seed=seed)


class TestSplitRhat:
    def test_constant_functional_flagged(self):
        mat = ChainMatrix("c", np.full((3, 20), 2.5))
        res = split_rhat(mat)
        assert res.value == 1.0
        assert res.flag == "constant"

    def test_copied_chains_flagged(self):
        rng = np.random.default_rng(0)
        row = rng.normal(size=50)
        res = split_rhat(ChainMatrix("c", np.stack([row, row])))
        assert res.flag == "identical-chains"

    def test_degenerate_ranks_report_infinite(self):
        """Chains constant at different values have zero within-chain spread."""
        mat = ChainMatrix("c", np.stack([np.zeros(10), np.ones(10)]))
        res = split_rhat(mat)
        assert np.isinf(res.value)
        assert res.flag == "zero-within-variance"

    def test_separated_chains_blow_up(self):
        rng = np.random.default_rng(1)
        a = rng.normal(0.0, 1.0, size=200)
        b = rng.normal(10.0, 1.0, size=200)
        res = split_rhat(ChainMatrix("c", np.stack([a, b])))
        assert res.value > 1.5
        assert res.flag is None

    def test_well_mixed_chains_near_one(self):
        rng = np.random.default_rng(2)
        mat = ChainMatrix("c", rng.normal(size=(4, 2000)))
        res = split_rhat(mat)
        assert res.value < 1.01

    def test_within_chain_trend_detected_by_splitting(self):
        """A single drifting chain fails via its own split halves."""
        drift = np.linspace(0.0, 5.0, 400) + np.random.default_rng(3).normal(
            0.0, 0.1, size=400)
        res = split_rhat(ChainMatrix("c", drift[None, :]))
        assert res.value > 1.5

    def test_invariant_under_monotone_transforms(self):
        """Rank normalization makes R-hat depend on ranks only."""
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 100))
        base = split_rhat(ChainMatrix("c", x)).value
        assert split_rhat(ChainMatrix("c", np.exp(x))).value == base
        assert split_rhat(ChainMatrix("c", x**3)).value == base
        assert split_rhat(ChainMatrix("c", 10.0 + 2.0 * x)).value == base

    def test_rejects_too_few_draws(self):
        with pytest.raises(ValueError):
            split_rhat(ChainMatrix("c", np.zeros((2, 3))))

    def test_matrix_must_be_two_dimensional(self):
        with pytest.raises(ValueError):
            ChainMatrix("c", np.zeros(10))


class TestFunctionalTraces:
    def test_scalar_specs_have_chain_rows(self):
        post = tiny_run()
        for spec in ("sigma2", "alpha", "n_occupied"):
            mat = functional_traces(post, spec)
            assert mat.values.shape == (2, 12)
        assert np.array_equal(functional_traces(post, "sigma2").values[0],
                              post.chains[0].sigma2)

    def test_gamma_spec_picks_column(self):
        post = tiny_run()
        mat = functional_traces(post, "gamma[1]")
        assert np.array_equal(mat.values[1], post.chains[1].gamma[:, 1])

    def test_curve_spec_follows_subject_cluster(self):
        """curve[i]@d reads f(d) from whichever cluster subject i sits in."""
        post = tiny_run()
        basis, decomp = post.basis_pair()
        row = (basis.evaluate([0.25]) @ decomp.inverse)[0]
        mat = functional_traces(post, "curve[3]@0.25")
        chain = post.chains[0]
        for m in (0, 5, 11):
            k = chain.labels[m, 3]
            assert np.isclose(mat.values[0, m], chain.beta[m, k] @ row)

    def test_unknown_spec_rejected(self):
        post = tiny_run()
        with pytest.raises(ValueError, match="unknown functional"):
            functional_traces(post, "entropy")

    def test_n_occupied_counts_unique_labels(self):
        post = tiny_run()
        mat = functional_traces(post, "n_occupied")
        expected = np.unique(post.chains[0].labels[0]).size
        assert mat.values[0, 0] == expected


class TestDefaultFunctionals:
    def test_covers_scalars_fixed_effects_and_anchors(self):
        post = tiny_run()
        specs = default_functionals(post)
        assert "sigma2" in specs and "alpha" in specs and "n_occupied" in specs
        assert "gamma[0]" in specs and "gamma[1]" in specs
        curve_specs = [s for s in specs if s.startswith("curve[")]
        # four anchor subjects at two depths each
        assert len(curve_specs) == 8

    def test_rhat_table_lists_every_spec(self):
        post = tiny_run()
        table = rhat_table(post, specs=["sigma2", "alpha"])
        assert list(table["functional"]) == ["sigma2", "alpha"]
        assert np.all(np.isfinite(table["rhat"]))
