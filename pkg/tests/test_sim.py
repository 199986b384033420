from itertools import product

import numpy as np
import pytest

from ldpmarket import sim
from ldpmarket.ldp import bit_one_probability
from ldpmarket.sim import ExperimentConfig


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(mean=20.0)
    with pytest.raises(ValueError):
        ExperimentConfig(sd=0.0)
    with pytest.raises(ValueError):
        ExperimentConfig(provider_counts=(0,))
    with pytest.raises(ValueError):
        ExperimentConfig(f=0.0)


def test_sample_truths_degenerate_sd():
    config = ExperimentConfig(sd=1e-9)
    assert set(sim.sample_truths(config, np.random.default_rng(0), 1000)) == {10}


def test_sample_truths_mean_and_range():
    config = ExperimentConfig()
    size = 100_000
    truths = sim.sample_truths(config, np.random.default_rng(1), size)
    assert truths.min() >= 0 and truths.max() <= 19
    assert abs(truths.mean() - 10) <= 4 * 2 / np.sqrt(size)


def test_truth_pmf_matches_sampler():
    config = ExperimentConfig(mean=2.0, sd=3.0, n_choices=8)
    pmf = sim.truth_pmf(config)
    assert pmf.sum() == pytest.approx(1.0)
    size = 200_000
    freq = np.bincount(sim.sample_truths(config, np.random.default_rng(2), size), minlength=8) / size
    assert np.all(np.abs(freq - pmf) <= 4 * np.sqrt(pmf * (1 - pmf) / size))


def test_accuracy_no_noise_is_exact():
    report = sim.run_accuracy_experiment(ExperimentConfig(f=1.0, seed=3))
    for row in report.rows:
        assert row.tv == 0.0
        assert row.estimated == [float(c) for c in row.true_counts]
        assert all(z == 0.0 for z in row.z)


def test_accuracy_z_scores_bounded():
    report = sim.run_accuracy_experiment(ExperimentConfig(provider_counts=(10_000,), seed=11))
    assert max(abs(z) for z in report.rows[0].z) <= 4


def test_accuracy_conserves_totals():
    report = sim.run_accuracy_experiment(ExperimentConfig(seed=4))
    for row in report.rows:
        assert sum(row.true_counts) == row.providers
        assert len(row.z) == len(row.estimated) == 20
        assert 0.0 <= row.tv <= 1.0


def test_accuracy_runs_are_nested():
    small = sim.run_accuracy_experiment(ExperimentConfig(provider_counts=(50,), seed=9))
    config = ExperimentConfig(provider_counts=(50, 80), seed=9)
    truth_rng, response_rng = config.streams()
    truths = sim.sample_truths(config, truth_rng, 80)
    assert np.bincount(truths[:50], minlength=20).tolist() == small.rows[0].true_counts


def test_accuracy_deterministic():
    config = ExperimentConfig(seed=5)
    a = sim.run_accuracy_experiment(config)
    b = sim.run_accuracy_experiment(config)
    assert a.to_json() == b.to_json() and a.to_csv() == b.to_csv()


def test_accuracy_csv_shape():
    lines = sim.run_accuracy_experiment(ExperimentConfig(seed=1)).to_csv().splitlines()
    assert lines[0] == "N,bin,true_count,est_count,z"
    assert len(lines) == 1 + 4 * 20


def test_no_noise_attacker_is_exact():
    rep = sim.run_attacker_experiment(ExperimentConfig(seed=1), "no_noise", 1000)
    assert rep.exact_guess_rate == 1.0
    assert rep.mean_absolute_error == 0.0


def test_rappor_attacker_is_blunted():
    rep = sim.run_attacker_experiment(ExperimentConfig(seed=1), "rappor", 1000)
    assert rep.exact_guess_rate <= 0.25


def test_truthful_coin_rappor_equals_no_noise():
    config = ExperimentConfig(f=1.0, seed=2)
    a = sim.run_attacker_experiment(config, "rappor", 500)
    b = sim.run_attacker_experiment(config, "no_noise", 500)
    assert a.guesses == b.guesses and a.exact_guess_rate == 1.0


def test_attacker_rejects_unknown_mode():
    with pytest.raises(ValueError):
        sim.run_attacker_experiment(ExperimentConfig(), "shuffle")


def _brute_force_guess_rate(config):
    """Enumerate every response pattern with its exact probability."""
    n, f = config.n_choices, config.f
    prior = sim.truth_pmf(config)
    rate = 0.0
    for t in range(n):
        p = bit_one_probability((np.arange(n) == t).astype(float), f)
        for pattern in product((0, 1), repeat=n):
            bits = np.array(pattern)
            prob = np.prod(np.where(bits == 1, p, 1 - p))
            value = sim.decoded_values(bits[None, :].astype(float), f)[0]
            if int(np.clip(np.rint(value), 0, n - 1)) == t:
                rate += prior[t] * prob
    return rate


@pytest.mark.parametrize(
    "n, f, mean, sd", [(4, 0.5, 1.0, 1.0), (6, 0.5, 2.5, 1.2), (5, 0.8, 2.0, 0.7), (7, 0.3, 3.0, 2.0)]
)
def test_analytic_guess_rate_matches_enumeration(n, f, mean, sd):
    config = ExperimentConfig(n_choices=n, f=f, mean=mean, sd=sd)
    assert sim.analytic_guess_rate(config) == pytest.approx(_brute_force_guess_rate(config), abs=1e-12)


def test_advantage_sweep_rows():
    rows = sim.advantage_sweep([1, 2, 10, 1000], [0.5, 0.2])
    by_f = {f: [r for r in rows if r.f == f] for f in (0.5, 0.2)}
    half = [r.advantage for r in by_f[0.5]]
    assert half == sorted(half) and max(half) < 3
    assert by_f[0.2][-1].advantage == pytest.approx(1.5, abs=1e-3)
    assert all(r.advantage == pytest.approx(1.0) for r in rows if r.n == 1)
    csv_lines = sim.advantage_csv(rows).splitlines()
    assert csv_lines[0] == "n,f,p_guess,p_posterior,advantage" and len(csv_lines) == 9
