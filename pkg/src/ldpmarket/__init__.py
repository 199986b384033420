"""Privacy-preserving crowdsourced data marketplace.

Providers answer a multiple-choice query with randomized-response bit vectors,
a system operator brokers and filters the encrypted submissions, and the
consumer pays through a simulated escrow contract that only releases the
decryption nonce once the deposit is in.
"""

from .ldp import (
    FrequencyEstimate,
    Query,
    ResponseBits,
    attacker_advantage,
    encode_truth,
    estimate_counts,
    randomize,
)
from .protocol import MarketTerms, Metadata, run_session

__all__ = [
    "FrequencyEstimate",
    "MarketTerms",
    "Metadata",
    "Query",
    "ResponseBits",
    "attacker_advantage",
    "encode_truth",
    "estimate_counts",
    "randomize",
    "run_session",
]
