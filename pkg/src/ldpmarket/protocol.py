"""Three-party marketplace session: consumer, system operator, providers.

Flow of one session::

    publish_query        consumer picks s1, operator picks s2, contract deployed
    enroll_provider      provider gets address, psk, s1 and s2
    provider_respond     randomized bits encrypted under H(s1 || s2), digest on chain
    operator_filter      first N_R valid submissions accepted, H(F) on chain
    consumer_settle      deposit, operator reveals s2, payouts split
    consumer_decrypt_and_aggregate
                         consumer reads s2 from the log and estimates counts

The consumer only ever holds s1 until the reveal event; the operator never
sees plaintext responses, only metadata used for filtering.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import crypto, ledger
from .crypto import Ciphertext, Digest, Nonce, PreSharedKey
from .ldp import (
    FrequencyEstimate,
    Query,
    ResponseBits,
    check_coin_bias,
    count_ones,
    encode_truth,
    estimate_counts,
    randomize,
)
from .ledger import Address, ContractState, Phase, ThresholdError

log = logging.getLogger(__name__)


class ProtocolError(Exception):
    pass


class IntegrityError(ProtocolError):
    """An accepted ciphertext does not decrypt; names the provider address."""

    def __init__(self, address: Address, reason: str = "ciphertext failed authentication"):
        super().__init__(f"0x{bytes(address).hex()}: {reason}")
        self.address = address


class MissingRecordError(ProtocolError):
    pass


class FairExchangeError(ProtocolError):
    """Decryption was attempted before s2 was revealed on chain."""


@dataclass(frozen=True)
class MarketTerms:
    query: Query
    price: int
    required_responses: int
    coin_bias: float = 0.5

    def __post_init__(self):
        if self.required_responses < 1:
            raise ValueError(f"required responses must be at least 1, got {self.required_responses}")
        if self.price < self.required_responses:
            raise ValueError(
                f"price {self.price} cannot pay {self.required_responses} providers at least 1 unit"
            )
        check_coin_bias(self.coin_bias)

    def to_dict(self) -> dict:
        return {
            "choices": list(self.query.choices),
            "price": self.price,
            "required_responses": self.required_responses,
            "coin_bias": self.coin_bias,
        }


@dataclass(frozen=True)
class Metadata:
    """Plaintext attributes the operator may filter on."""

    region: str
    capture_time: int

    def to_bytes(self) -> bytes:
        region = self.region.encode("utf-8")
        return struct.pack(">H", len(region)) + region + struct.pack(">q", self.capture_time)


@dataclass(frozen=True)
class Submission:
    address: Address
    ciphertext: Ciphertext
    envelope_mac: Digest
    metadata: Metadata

    def envelope_bytes(self) -> bytes:
        return envelope_bytes(self.address, self.ciphertext, self.metadata)

    def commitment(self) -> Digest:
        return crypto.hash(self.ciphertext.to_bytes())

    def to_dict(self) -> dict:
        return {
            "address": self.address.hex(),
            "ciphertext": self.ciphertext.to_bytes().hex(),
            "envelope_mac": self.envelope_mac.hex(),
            "metadata": {"region": self.metadata.region, "capture_time": self.metadata.capture_time},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Submission":
        return cls(
            address=Address.from_hex(d["address"]),
            ciphertext=Ciphertext.from_bytes(bytes.fromhex(d["ciphertext"])),
            envelope_mac=Digest.from_hex(d["envelope_mac"]),
            metadata=Metadata(str(d["metadata"]["region"]), int(d["metadata"]["capture_time"])),
        )


def envelope_bytes(address: Address, ciphertext: Ciphertext, metadata: Metadata) -> bytes:
    ct = ciphertext.to_bytes()
    return bytes(address) + struct.pack(">I", len(ct)) + ct + metadata.to_bytes()


@dataclass(frozen=True)
class FilterVector:
    bits: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(bool(b) for b in self.bits))

    @property
    def popcount(self) -> int:
        return sum(self.bits)

    def to_bytes(self) -> bytes:
        """4-byte big-endian length, then the bits packed MSB first."""
        packed = np.packbits(np.array(self.bits, dtype=bool), bitorder="big").tobytes() if self.bits else b""
        return struct.pack(">I", len(self.bits)) + packed

    def digest(self) -> Digest:
        return crypto.hash(self.to_bytes())


@dataclass
class Provider:
    """Enrollment credentials held by one data provider."""

    address: Address
    psk: PreSharedKey
    s1: Nonce
    s2: Nonce


@dataclass
class Consumer:
    address: Address
    s1: Nonce


@dataclass
class Operator:
    address: Address
    s2: Nonce
    psks: dict = field(default_factory=dict)


@dataclass
class Session:
    """Mutable session owned by a single driver; not safe for concurrent mutation."""

    terms: MarketTerms
    consumer: Consumer
    operator: Operator
    contract: ContractState
    submissions: list = field(default_factory=list)
    filter_vector: FilterVector | None = None
    rejected: list = field(default_factory=list)
    payouts: dict = field(default_factory=dict)
    operator_remainder: int = 0
    decrypted: dict = field(default_factory=dict)
    estimate: FrequencyEstimate | None = None
    status: str = "open"
    dispute: str | None = None

    def accepted(self) -> list:
        if self.filter_vector is None:
            return []
        return [s for s, bit in zip(self.submissions, self.filter_vector.bits) if bit]


def publish_query(terms: MarketTerms, rng=None) -> Session:
    """Generate both nonces and deploy the contract committing to the query and H(s2)."""
    consumer = Consumer(address=Address.random(rng), s1=crypto.new_nonce(rng))
    operator = Operator(address=Address.random(rng), s2=crypto.new_nonce(rng))
    contract = ledger.deploy(
        crypto.hash(terms.query.to_bytes()),
        crypto.hash(operator.s2),
        terms.price,
        terms.required_responses,
    )
    return Session(terms=terms, consumer=consumer, operator=operator, contract=contract)


def enroll_provider(session: Session, rng=None) -> Provider:
    reserved = (session.consumer.address, session.operator.address)
    address = Address.random(rng)
    while address in session.operator.psks or address in reserved:
        address = Address.random(rng)
    psk = PreSharedKey(crypto.random_bytes(32, rng))
    session.operator.psks[address] = psk
    return Provider(address=address, psk=psk, s1=session.consumer.s1, s2=session.operator.s2)


def provider_respond(
    session: Session, provider: Provider, true_choice: int, metadata: Metadata, rng=None
) -> Submission:
    """Randomize, encrypt and submit one answer; the operator records H(C_R) on chain.

    ``rng`` drives both the randomization and the IV. Without it the IV comes
    from the OS and randomization from a fresh unseeded generator.
    """
    gen = rng if rng is not None else np.random.default_rng()
    bits = randomize(encode_truth(session.terms.query, true_choice), session.terms.coin_bias, gen)
    sk = crypto.derive_key(provider.s1, provider.s2)
    ct = crypto.encrypt(sk, bits.to_bytes(), rng)
    tag = crypto.mac(provider.psk, envelope_bytes(provider.address, ct, metadata))
    sub = Submission(address=provider.address, ciphertext=ct, envelope_mac=tag, metadata=metadata)
    return submit(session, sub)


def submit(session: Session, sub: Submission) -> Submission:
    """Operator side of a submission: record the ciphertext digest under the sender's address."""
    session.contract = ledger.record_response_hash(session.contract, sub.address, sub.commitment())
    session.submissions.append(sub)
    return sub


def operator_filter(session: Session, predicate: Callable[[Metadata], bool] | None = None) -> FilterVector:
    """Accept the first N_R submissions that carry a valid MAC and satisfy ``predicate``.

    Raises:
        ThresholdError: fewer than N_R submissions qualify; the session stays
            in the collecting phase.
    """
    need = session.terms.required_responses
    bits = []
    rejected = []
    accepted = 0
    for sub in session.submissions:
        psk = session.operator.psks.get(sub.address)
        if psk is None or not crypto.mac_verify(psk, sub.envelope_bytes(), sub.envelope_mac):
            log.warning("rejecting submission from 0x%s: envelope MAC invalid", sub.address.hex())
            rejected.append(sub.address)
            bits.append(False)
            continue
        take = accepted < need and (predicate is None or bool(predicate(sub.metadata)))
        accepted += take
        bits.append(take)
    fv = FilterVector(tuple(bits))
    if fv.popcount < need:
        raise ThresholdError(f"only {fv.popcount} valid submissions, {need} required")
    session.contract = ledger.record_filter_hash(session.contract, fv.digest(), fv.popcount)
    session.filter_vector = fv
    session.rejected = rejected
    return fv


def consumer_settle(session: Session, revealed_s2: bytes | None = None) -> Session:
    """Deposit the price, have the operator reveal s2, then split the payout.

    ``revealed_s2`` overrides what the operator reveals; it exists for fault
    injection. A mismatching reveal leaves the deposit in the contract, marks
    the session disputed and re-raises.
    """
    session.contract = ledger.make_deposit(session.contract, session.terms.price)
    s2 = session.operator.s2 if revealed_s2 is None else revealed_s2
    try:
        session.contract = ledger.reveal_and_settle(session.contract, s2, session.operator.address)
    except ledger.RevealMismatchError as err:
        session.contract = err.state
        session.status = "disputed"
        session.dispute = "reveal-mismatch"
        raise
    share = session.terms.price // session.terms.required_responses
    session.payouts = {sub.address: share for sub in session.accepted()}
    session.operator_remainder = session.contract.transferred_out - share * len(session.payouts)
    session.status = "settled"
    return session


def revealed_nonce(events) -> Nonce:
    for ev in events:
        if ev.op == "reveal_and_transfer":
            return Nonce.from_hex(ev.params["s2"])
    raise FairExchangeError("s2 has not been revealed on chain")


def consumer_decrypt_and_aggregate(session: Session) -> FrequencyEstimate:
    """Decrypt accepted responses with H(s1 || s2) and estimate choice counts."""
    s2 = revealed_nonce(session.contract.events)
    sk = crypto.derive_key(session.consumer.s1, s2)
    rows = {}
    for sub in session.accepted():
        try:
            rows[sub.address] = ResponseBits.from_bytes(crypto.decrypt(sk, sub.ciphertext))
        except (crypto.CryptoError, ValueError) as err:
            session.status = "disputed"
            session.dispute = f"integrity:{sub.address.hex()}"
            raise IntegrityError(sub.address, str(err)) from None
    counts = count_ones(list(rows.values()))
    est = estimate_counts(counts, session.terms.required_responses, session.terms.coin_bias)
    session.decrypted = rows
    session.estimate = est
    return est


def _find_event(events, op: str, **match):
    for ev in events:
        if ev.op == op and all(ev.params.get(k) == v for k, v in match.items()):
            return ev
    return None


def verify_response_integrity(submission: Submission, events) -> bool:
    ev = _find_event(events, "record_response", address=submission.address.hex())
    if ev is None:
        raise MissingRecordError(f"no on-chain record for 0x{submission.address.hex()}")
    return submission.commitment().hex() == ev.params["digest"]


def verify_filter(fv: FilterVector, events) -> bool:
    ev = _find_event(events, "record_filter")
    if ev is None:
        raise ledger.PhaseError("filter digest has not been recorded")
    return fv.digest().hex() == ev.params["filter_digest"]


# --- transcripts -----------------------------------------------------------

def transcript(session: Session) -> dict:
    """Consumer-visible record of a session. Holds no psks and no true choices."""
    c = session.contract
    revealed = c.revealed_s2
    return {
        "terms": session.terms.to_dict(),
        "status": session.status,
        "dispute": session.dispute,
        "contract": {
            "phase": c.phase.value,
            "query_digest": c.query_digest.hex(),
            "s2_commitment": c.s2_commitment.hex(),
            "filter_digest": None if c.filter_digest is None else c.filter_digest.hex(),
            "deposit_balance": c.deposit_balance,
            "transferred_out": c.transferred_out,
            "gas_used": c.gas_used,
            "events": [ev.to_dict() for ev in c.events],
        },
        "s1": session.consumer.s1.hex(),
        "s2": None if revealed is None else revealed.hex(),
        "submissions": [s.to_dict() for s in session.submissions],
        "filter": None if session.filter_vector is None else [int(b) for b in session.filter_vector.bits],
        "payouts": {a.hex(): v for a, v in session.payouts.items()},
        "operator_remainder": session.operator_remainder,
        "decrypted": {a.hex(): [int(b) for b in r.bits] for a, r in session.decrypted.items()},
        "estimate": None if session.estimate is None else session.estimate.to_dict(),
    }


def transcript_json(session: Session) -> str:
    return json.dumps(transcript(session), indent=2) + "\n"


@dataclass(frozen=True)
class LoadedTranscript:
    raw: dict
    events: tuple
    submissions: tuple
    filter_vector: FilterVector | None


def load_transcript(text: str) -> LoadedTranscript:
    """Parse a transcript JSON document back into typed pieces.

    Raises:
        ValueError: the document is not valid JSON or misses required fields.
    """
    try:
        raw = json.loads(text)
        events = tuple(ledger.Event.from_dict(e) for e in raw["contract"]["events"])
        subs = tuple(Submission.from_dict(s) for s in raw["submissions"])
        fv = None if raw.get("filter") is None else FilterVector(tuple(bool(b) for b in raw["filter"]))
    except (KeyError, TypeError, json.JSONDecodeError, crypto.CryptoError) as err:
        raise ValueError(f"malformed transcript: {err}") from err
    return LoadedTranscript(raw=raw, events=events, submissions=subs, filter_vector=fv)


# --- driver ----------------------------------------------------------------

def run_session(
    terms: MarketTerms,
    truths,
    metadata,
    seed: int,
    predicate: Callable[[Metadata], bool] | None = None,
    inject_wrong_reveal: bool = False,
    inject_tamper: bool = False,
) -> Session:
    """Drive a whole session deterministically from ``seed``.

    One child stream seeds the session nonces and addresses; every provider
    gets its own child stream for its keys, randomization and IV.

    Raises whatever stage fails (ThresholdError, RevealMismatchError,
    IntegrityError); the partially advanced session is attached to the
    exception as ``session``.
    """
    root = np.random.SeedSequence(seed)
    session_seq, provider_seq = root.spawn(2)
    session = publish_query(terms, np.random.default_rng(session_seq))
    try:
        streams = provider_seq.spawn(len(truths))
        for choice, meta, ss in zip(truths, metadata, streams):
            rng = np.random.default_rng(ss)
            provider = enroll_provider(session, rng)
            provider_respond(session, provider, int(choice), meta, rng)
        operator_filter(session, predicate)
        if inject_tamper:
            _tamper_first_accepted(session)
        wrong = None
        if inject_wrong_reveal:
            wrong = bytes(b ^ 0xFF for b in session.operator.s2)
        consumer_settle(session, revealed_s2=wrong)
        consumer_decrypt_and_aggregate(session)
    except (ThresholdError, ledger.RevealMismatchError, IntegrityError) as err:
        err.session = session
        raise
    return session


def _tamper_first_accepted(session: Session) -> None:
    for i, (sub, bit) in enumerate(zip(session.submissions, session.filter_vector.bits)):
        if bit:
            body = bytearray(sub.ciphertext.body or b"\x00")
            body[0] ^= 0x01
            ct = Ciphertext(sub.ciphertext.iv, sub.ciphertext.tag, bytes(body))
            session.submissions[i] = Submission(sub.address, ct, sub.envelope_mac, sub.metadata)
            return
