"""Two-coin randomized response over one-hot questionnaire answers.

A provider answers an n-choice query with a one-hot bit vector. Each bit is
then reported truthfully with probability ``f`` and replaced by a fair coin
flip otherwise, so bit i reads 1 with probability ``f * truth_i + (1 - f) / 2``.
The aggregator inverts that affine map to get unbiased per-choice counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

# rows of uniforms drawn per chunk in randomize_batch; bounds peak memory
_BATCH_CHUNK = 65_536


@dataclass(frozen=True)
class Query:
    """An ordered list of distinct choice labels. Index i identifies choice i."""

    choices: tuple[str, ...]

    def __post_init__(self):
        choices = tuple(self.choices)
        object.__setattr__(self, "choices", choices)
        if len(choices) < 2:
            raise ValueError(f"a query needs at least 2 choices, got {len(choices)}")
        if len(set(choices)) != len(choices):
            raise ValueError("choice labels must be pairwise distinct")

    @classmethod
    def numbered(cls, n: int) -> "Query":
        return cls(tuple(f"c{i + 1}" for i in range(n)))

    @property
    def n(self) -> int:
        return len(self.choices)

    def to_bytes(self) -> bytes:
        """Canonical encoding used for the on-chain query digest."""
        return json.dumps(list(self.choices), ensure_ascii=False, separators=(",", ":")).encode()


@dataclass(frozen=True)
class ResponseBits:
    bits: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(bool(b) for b in self.bits))

    @classmethod
    def from_array(cls, arr) -> "ResponseBits":
        return cls(tuple(bool(b) for b in np.asarray(arr).ravel()))

    def __len__(self) -> int:
        return len(self.bits)

    def as_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=bool)

    @property
    def weight(self) -> int:
        return sum(self.bits)

    @property
    def is_one_hot(self) -> bool:
        return self.weight == 1

    def to_bytes(self) -> bytes:
        """2-byte big-endian bit length followed by the bits packed MSB first."""
        if len(self.bits) > 0xFFFF:
            raise ValueError("response too long to encode")
        packed = np.packbits(self.as_array(), bitorder="big").tobytes() if self.bits else b""
        return len(self.bits).to_bytes(2, "big") + packed

    @classmethod
    def from_bytes(cls, data: bytes) -> "ResponseBits":
        if len(data) < 2:
            raise ValueError("encoded response is shorter than its length prefix")
        length = int.from_bytes(data[:2], "big")
        body = data[2:]
        if len(body) != (length + 7) // 8:
            raise ValueError(f"encoded response has {len(body)} body bytes for {length} bits")
        bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8), bitorder="big")[:length]
        return cls.from_array(bits)


@dataclass(frozen=True)
class FrequencyEstimate:
    """Estimated per-choice counts.

    ``raw`` is the unbiased inversion and may go negative; ``clamped`` floors it
    at zero and is what statistics consumers should read.
    """

    raw: np.ndarray
    clamped: np.ndarray
    total: int

    def distribution(self) -> np.ndarray:
        """Clamped counts normalized by their own sum (all zeros if nothing survives)."""
        s = self.clamped.sum()
        if s <= 0:
            return np.zeros_like(self.clamped)
        return self.clamped / s

    def to_dict(self) -> dict:
        return {
            "raw": [float(x) for x in self.raw],
            "clamped": [float(x) for x in self.clamped],
            "total": int(self.total),
        }


@dataclass(frozen=True)
class AdvantageRecord:
    n: int
    f: float
    p_guess: float
    p_posterior: float
    advantage: float


def check_coin_bias(f: float) -> float:
    f = float(f)
    if not 0.0 < f <= 1.0:
        raise ValueError(f"coin bias must lie in (0, 1], got {f}")
    return f


def encode_truth(query: Query, choice_index: int) -> ResponseBits:
    if not 0 <= choice_index < query.n:
        raise IndexError(f"choice index {choice_index} outside [0, {query.n})")
    bits = [False] * query.n
    bits[choice_index] = True
    return ResponseBits(tuple(bits))


def bit_one_probability(truth_bit, f: float):
    """P(reported bit = 1) for a true bit value under coin bias ``f``."""
    return f * truth_bit + (1.0 - f) / 2.0


def marginal_one_probability(n: int, f: float) -> float:
    """Per-bit one-rate when the true choice is uniform over n choices."""
    return f / n + (1.0 - f) / 2.0


def randomize(truth: ResponseBits, f: float, rng: np.random.Generator) -> ResponseBits:
    """Report each bit truthfully with probability f, else a fair coin flip.

    Draws n uniforms for the truth coin, then n for the fair coin. Calling this
    repeatedly on one generator consumes the stream exactly like
    :func:`randomize_batch` does.
    """
    f = check_coin_bias(f)
    if not truth.is_one_hot:
        raise ValueError(f"truthful response must be one-hot, weight is {truth.weight}")
    n = len(truth)
    keep = rng.random(n) < f
    coin = rng.random(n) < 0.5
    return ResponseBits.from_array(np.where(keep, truth.as_array(), coin))


def randomize_batch(
    choice_indices, n: int, f: float, rng: np.random.Generator
) -> np.ndarray:
    """Vectorized :func:`randomize` for many providers at once.

    Args:
        choice_indices: true choice index per provider.
        n: number of choices.
        f: coin bias.
        rng: random source, consumed row by row.

    Returns:
        Boolean matrix of shape (len(choice_indices), n). Row k is what
        ``randomize`` would return for provider k on the same generator, so a
        longer run extends a shorter one without changing its rows.
    """
    f = check_coin_bias(f)
    idx = np.asarray(choice_indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"choice indices must lie in [0, {n})")
    out = np.empty((idx.size, n), dtype=bool)
    cols = np.arange(n)
    for start in range(0, idx.size, _BATCH_CHUNK):
        chunk = idx[start:start + _BATCH_CHUNK]
        u = rng.random((chunk.size, 2, n))
        truth = cols[None, :] == chunk[:, None]
        out[start:start + chunk.size] = np.where(u[:, 0, :] < f, truth, u[:, 1, :] < 0.5)
    return out


def count_ones(responses) -> np.ndarray:
    """Per-bit count of ones over a response matrix or an iterable of ResponseBits."""
    if isinstance(responses, np.ndarray):
        return responses.sum(axis=0, dtype=np.int64)
    rows = [r.as_array() for r in responses]
    if not rows:
        raise ValueError("no responses to count")
    return np.sum(rows, axis=0, dtype=np.int64)


def estimate_counts(observed_ones, total: int, f: float) -> FrequencyEstimate:
    """Invert the randomization: raw[i] = (ones[i] - (1 - f) / 2 * total) / f."""
    f = check_coin_bias(f)
    if total < 1:
        raise ValueError(f"total must be at least 1, got {total}")
    ones = np.asarray(observed_ones, dtype=np.int64)
    for i, c in enumerate(ones):
        if c < 0 or c > total:
            raise ValueError(f"bin {i}: observed count {c} outside [0, {total}]")
    raw = (ones - (1.0 - f) * 0.5 * total) / f
    return FrequencyEstimate(raw=raw, clamped=np.maximum(raw, 0.0), total=int(total))


def estimator_sigma(true_counts, total: int, f: float) -> np.ndarray:
    """Standard deviation of each raw estimate given the true counts."""
    p = bit_one_probability(np.asarray(true_counts, dtype=float) / total, f)
    return np.sqrt(total * p * (1.0 - p)) / f


def attacker_advantage(n: int, f: float) -> AdvantageRecord:
    """Posterior-over-prior gain from seeing that bit i of a response is set.

    With a uniform prior over n choices the posterior that the true answer is
    choice i given r_i = 1 is ``(f + (1 - f) / 2) / n`` over ``f / n + (1 - f) / 2``.
    """
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    f = check_coin_bias(f)
    p_guess = 1.0 / n
    p_posterior = (f + (1.0 - f) / 2.0) * p_guess / (f * p_guess + (1.0 - f) / 2.0)
    return AdvantageRecord(
        n=n, f=f, p_guess=p_guess, p_posterior=p_posterior, advantage=p_posterior / p_guess
    )


def advantage_limit(f: float) -> float:
    """Advantage as n grows without bound (infinite for f = 1)."""
    f = check_coin_bias(f)
    if f == 1.0:
        return float("inf")
    return (f + (1.0 - f) / 2.0) / ((1.0 - f) / 2.0)
