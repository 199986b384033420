"""Desk-scale experiments: estimator accuracy, advantage curves, sequential attacker.

Every experiment is a pure function of its :class:`ExperimentConfig`. The root
seed is split into one stream for true choices and one for randomization. Both
are consumed provider by provider, so running with more providers extends a
smaller run instead of reshuffling it.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from statistics import NormalDist

import numpy as np

from .ldp import (
    AdvantageRecord,
    attacker_advantage,
    bit_one_probability,
    check_coin_bias,
    estimate_counts,
    estimator_sigma,
    randomize_batch,
)

MODES = ("no_noise", "rappor")


@dataclass(frozen=True)
class ExperimentConfig:
    n_choices: int = 20
    provider_counts: tuple[int, ...] = (500, 1000, 5000, 10000)
    mean: float = 10.0
    sd: float = 2.0
    f: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "provider_counts", tuple(int(c) for c in self.provider_counts))
        if self.n_choices < 2:
            raise ValueError("need at least 2 choices")
        if not 0 <= self.mean < self.n_choices:
            raise ValueError(f"mean {self.mean} outside [0, {self.n_choices})")
        if self.sd <= 0:
            raise ValueError("sd must be positive")
        if not self.provider_counts or min(self.provider_counts) < 1:
            raise ValueError("provider counts must be positive")
        check_coin_bias(self.f)

    def streams(self) -> tuple[np.random.Generator, np.random.Generator]:
        truth_seq, response_seq = np.random.SeedSequence(self.seed).spawn(2)
        return np.random.default_rng(truth_seq), np.random.default_rng(response_seq)


def sample_truths(config: ExperimentConfig, rng: np.random.Generator, size: int) -> np.ndarray:
    """Round-and-clamp draws from normal(mean, sd) onto choice indices."""
    draws = rng.normal(config.mean, config.sd, size=size)
    return np.clip(np.rint(draws), 0, config.n_choices - 1).astype(np.int64)


def truth_pmf(config: ExperimentConfig) -> np.ndarray:
    """Exact distribution of :func:`sample_truths` outputs."""
    dist = NormalDist(config.mean, config.sd)
    n = config.n_choices
    edges = [dist.cdf(k + 0.5) for k in range(n - 1)]
    cdf = np.array([0.0, *edges, 1.0])
    return np.diff(cdf)


# --- accuracy --------------------------------------------------------------

@dataclass(frozen=True)
class AccuracyRow:
    providers: int
    true_counts: list
    raw: list
    estimated: list
    tv: float
    z: list


@dataclass(frozen=True)
class AccuracyReport:
    config: ExperimentConfig
    rows: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"config": asdict(self.config), "rows": [asdict(r) for r in self.rows]}, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["N", "bin", "true_count", "est_count", "z"])
        for r in self.rows:
            for i, (t, e, z) in enumerate(zip(r.true_counts, r.estimated, r.z)):
                w.writerow([r.providers, i, t, repr(e), repr(z)])
        return buf.getvalue()


def total_variation(true_counts, estimated_counts) -> float:
    p = np.asarray(true_counts, dtype=float)
    q = np.asarray(estimated_counts, dtype=float)
    p = p / p.sum()
    q = q / q.sum() if q.sum() > 0 else np.zeros_like(q)
    return float(0.5 * np.abs(p - q).sum())


def z_scores(true_counts, raw, total: int, f: float) -> np.ndarray:
    sigma = estimator_sigma(true_counts, total, f)
    diff = np.asarray(raw, dtype=float) - np.asarray(true_counts, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, diff / np.where(sigma > 0, sigma, 1.0), 0.0)
    return z


def run_accuracy_experiment(config: ExperimentConfig) -> AccuracyReport:
    n, f = config.n_choices, config.f
    rows = []
    for total in config.provider_counts:
        truth_rng, response_rng = config.streams()
        truths = sample_truths(config, truth_rng, total)
        responses = randomize_batch(truths, n, f, response_rng)
        true_counts = np.bincount(truths, minlength=n)
        est = estimate_counts(responses.sum(axis=0), total, f)
        z = z_scores(true_counts, est.raw, total, f)
        rows.append(AccuracyRow(
            providers=total,
            true_counts=[int(c) for c in true_counts],
            raw=[float(x) for x in est.raw],
            estimated=[float(x) for x in est.clamped],
            tv=total_variation(true_counts, est.clamped),
            z=[float(x) for x in z],
        ))
    return AccuracyReport(config=config, rows=rows)


# --- sequential attacker ---------------------------------------------------

@dataclass(frozen=True)
class AttackerReport:
    mode: str
    providers: int
    exact_guess_rate: float
    mean_absolute_error: float
    analytic_guess_rate: float
    true_values: list
    observed_means: list
    guesses: list

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "true_value", "observed_mean", "guess"])
        for k, (t, m, g) in enumerate(zip(self.true_values, self.observed_means, self.guesses), start=1):
            w.writerow([k, t, repr(m), g])
        return buf.getvalue()


def decoded_values(responses: np.ndarray, f: float) -> np.ndarray:
    """Estimated choice value of each single randomized response.

    Applies the count estimator to one response (total = 1) and takes the
    index-weighted sum, which is unbiased for the true choice index.
    """
    n = responses.shape[1]
    raw = (responses - (1.0 - f) / 2.0) / f
    return raw @ np.arange(n, dtype=float)


def _round_guess(values, n: int) -> np.ndarray:
    return np.clip(np.rint(values), 0, n - 1).astype(np.int64)


def run_attacker_experiment(config: ExperimentConfig, mode: str, providers: int = 1000) -> AttackerReport:
    """Replay submissions one at a time against an attacker watching the running mean.

    After step k the attacker sees only the running mean m_k and guesses
    ``k * m_k - (k - 1) * m_{k-1}``, rounded onto a valid choice index.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if providers < 1:
        raise ValueError("need at least one provider")
    n, f = config.n_choices, config.f
    truth_rng, response_rng = config.streams()
    truths = sample_truths(config, truth_rng, providers)
    if mode == "no_noise":
        values = truths.astype(float)
        analytic = 1.0
    else:
        values = decoded_values(randomize_batch(truths, n, f, response_rng), f)
        analytic = analytic_guess_rate(config)
    steps = np.arange(1, providers + 1, dtype=float)
    means = np.cumsum(values) / steps
    previous = np.concatenate(([0.0], means[:-1]))
    guesses = _round_guess(steps * means - (steps - 1) * previous, n)
    return AttackerReport(
        mode=mode,
        providers=providers,
        exact_guess_rate=float(np.mean(guesses == truths)),
        mean_absolute_error=float(np.mean(np.abs(guesses - truths))),
        analytic_guess_rate=analytic,
        true_values=[int(t) for t in truths],
        observed_means=[float(m) for m in means],
        guesses=[int(g) for g in guesses],
    )


def analytic_guess_rate(config: ExperimentConfig) -> float:
    """Exact per-step success probability of the running-mean attacker under noise.

    For a true choice t, bit i is set with probability f*[i == t] + (1 - f)/2,
    independently. The decoded value is affine in S = sum of indices of set
    bits, so the distribution of S (by convolution) gives the chance the
    rounded guess lands on t. Averaged over the true-choice distribution.
    """
    n, f = config.n_choices, config.f
    idx = np.arange(n)
    smax = n * (n - 1) // 2
    s_values = np.arange(smax + 1, dtype=float)
    guesses = _round_guess((s_values - (1.0 - f) / 2.0 * smax) / f, n)
    prior = truth_pmf(config)
    total = 0.0
    for t in range(n):
        if prior[t] == 0:
            continue
        pmf = np.zeros(smax + 1)
        pmf[0] = 1.0
        for i in idx:
            p = bit_one_probability(1.0 if i == t else 0.0, f)
            shifted = np.zeros_like(pmf)
            shifted[i:] = pmf[:smax + 1 - i]
            pmf = (1.0 - p) * pmf + p * shifted
        total += prior[t] * pmf[guesses == t].sum()
    return float(total)


# --- advantage curves ------------------------------------------------------

def advantage_sweep(n_values, f_values) -> list[AdvantageRecord]:
    return [attacker_advantage(int(n), float(f)) for f in f_values for n in n_values]


def advantage_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "f", "p_guess", "p_posterior", "advantage"])
    for r in records:
        w.writerow([r.n, repr(r.f), repr(r.p_guess), repr(r.p_posterior), repr(r.advantage)])
    return buf.getvalue()


def advantage_json(records) -> str:
    return json.dumps([asdict(r) for r in records], indent=2) + "\n"
