"""Simulated escrow contract for the data marketplace.

The contract is a value: every operation takes a :class:`ContractState` and
returns a new one, so a rejected call leaves the caller's state untouched.
Each successful transition appends an :class:`Event`; folding the event log
with :func:`replay` rebuilds the exact state.

Gas is metered per successful operation from a fixed :class:`GasSchedule`.
Failed operations cost nothing.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from functools import cached_property
from pathlib import Path

from . import crypto
from .crypto import Digest, Nonce


class Address(bytes):
    size = 20

    def __new__(cls, value):
        value = bytes(value)
        if len(value) != cls.size:
            raise ValueError(f"address must be {cls.size} bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def from_hex(cls, text: str) -> "Address":
        return cls(bytes.fromhex(text.removeprefix("0x")))

    @classmethod
    def random(cls, rng=None) -> "Address":
        return cls(crypto.random_bytes(cls.size, rng))

    def __repr__(self):
        return f"Address(0x{self.hex()})"


class Phase(str, Enum):
    DEPLOYED = "Deployed"
    COLLECTING = "Collecting"
    FILTERED = "Filtered"
    DEPOSITED = "Deposited"
    SETTLED = "Settled"


class ContractError(Exception):
    pass


class PhaseError(ContractError):
    pass


class DuplicateAddressError(ContractError):
    pass


class ThresholdError(ContractError):
    pass


class DepositError(ContractError):
    pass


class RevealMismatchError(ContractError):
    """The revealed nonce does not hash to the committed value.

    ``state`` carries the contract with the failed attempt logged; the deposit
    is still held.
    """

    def __init__(self, message: str, state: "ContractState"):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class GasSchedule:
    deploy: int = 660_809
    record_response: int = 74_537
    record_filter: int = 63_309
    deposit: int = 23_642
    reveal_and_transfer: int = 36_269

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"gas cost for {f.name} must be positive")

    def cost(self, op: str) -> int:
        return getattr(self, op, 0) if op in _GAS_OPS else 0

    @property
    def fixed_overhead(self) -> int:
        """Gas of one successful session excluding per-response records."""
        return self.deploy + self.record_filter + self.deposit + self.reveal_and_transfer


_GAS_OPS = tuple(f.name for f in fields(GasSchedule))


@dataclass(frozen=True)
class FiatRate:
    """Display-time conversion of gas into currency.

    The default reproduces the February 2023 fiat column of the published
    cost table (e.g. 660,809 gas -> $25.40).
    """

    per_gas: Decimal = Decimal("0.00003844")
    currency: str = "USD"

    def convert(self, gas: int) -> Decimal:
        return (Decimal(gas) * self.per_gas).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


def load_gas_config(path) -> tuple[GasSchedule, FiatRate]:
    """Read a JSON file with any of the schedule keys plus ``fiat_per_gas``/``currency``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    unknown = set(data) - set(_GAS_OPS) - {"fiat_per_gas", "currency"}
    if unknown:
        raise ValueError(f"unknown gas config keys: {sorted(unknown)}")
    schedule = GasSchedule(**{k: int(data[k]) for k in _GAS_OPS if k in data})
    rate = FiatRate(
        per_gas=Decimal(str(data.get("fiat_per_gas", FiatRate.per_gas))),
        currency=data.get("currency", FiatRate.currency),
    )
    return schedule, rate


@dataclass(frozen=True)
class Event:
    seq: int
    op: str
    params: dict
    gas: int
    phase_after: Phase

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phase_after"] = self.phase_after.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Event":
        return cls(
            seq=int(d["seq"]),
            op=str(d["op"]),
            params=dict(d["params"]),
            gas=int(d["gas"]),
            phase_after=Phase(d["phase_after"]),
        )


@dataclass(frozen=True)
class ContractState:
    phase: Phase
    query_digest: Digest
    s2_commitment: Digest
    price: int
    required_responses: int
    response_records: tuple[tuple[Address, Digest], ...] = ()
    filter_digest: Digest | None = None
    accepted_count: int | None = None
    deposit_balance: int = 0
    transferred_out: int = 0
    payee: Address | None = None
    revealed_s2: Nonce | None = None
    gas_used: int = 0
    schedule: GasSchedule = GasSchedule()
    events: tuple[Event, ...] = field(default=(), repr=False)

    @cached_property
    def address_index(self) -> dict:
        return dict(self.response_records)

    def recorded_digest(self, addr: Address) -> Digest | None:
        return self.address_index.get(addr)


# --- transitions -----------------------------------------------------------
# _transition applies an already-validated operation; live calls and replay
# share it so the event log is always sufficient to rebuild state.

def _transition(state: ContractState | None, op: str, params: dict) -> ContractState:
    if op == "deploy":
        return ContractState(
            phase=Phase.DEPLOYED,
            query_digest=Digest.from_hex(params["query_digest"]),
            s2_commitment=Digest.from_hex(params["s2_commitment"]),
            price=int(params["price"]),
            required_responses=int(params["required_responses"]),
            schedule=GasSchedule(**params["gas_schedule"]),
        )
    if op == "record_response":
        rec = (Address.from_hex(params["address"]), Digest.from_hex(params["digest"]))
        new = replace(state, phase=Phase.COLLECTING, response_records=state.response_records + (rec,))
        # seed the lookup cache from the parent so recording stays linear overall
        new.__dict__["address_index"] = {**state.address_index, rec[0]: rec[1]}
        return new
    if op == "record_filter":
        return replace(
            state,
            phase=Phase.FILTERED,
            filter_digest=Digest.from_hex(params["filter_digest"]),
            accepted_count=int(params["accepted_count"]),
        )
    if op == "deposit":
        return replace(state, phase=Phase.DEPOSITED, deposit_balance=int(params["amount"]))
    if op == "reveal_and_transfer":
        return replace(
            state,
            phase=Phase.SETTLED,
            revealed_s2=Nonce.from_hex(params["s2"]),
            payee=Address.from_hex(params["payee"]),
            transferred_out=state.deposit_balance,
            deposit_balance=0,
        )
    if op == "reveal_failed":
        return state
    raise ValueError(f"unknown contract operation {op!r}")


def _stamp(new: ContractState, gas_used: int, events: tuple) -> ContractState:
    out = replace(new, gas_used=gas_used, events=events)
    if "address_index" in new.__dict__:
        out.__dict__["address_index"] = new.__dict__["address_index"]
    return out


def _emit(state: ContractState | None, op: str, params: dict, schedule: GasSchedule) -> ContractState:
    new = _transition(state, op, params)
    gas = schedule.cost(op)
    seq = len(state.events) if state is not None else 0
    event = Event(seq=seq, op=op, params=params, gas=gas, phase_after=new.phase)
    prior_gas = state.gas_used if state is not None else 0
    prior_events = state.events if state is not None else ()
    return _stamp(new, prior_gas + gas, prior_events + (event,))


def replay(events) -> ContractState:
    """Fold an event log back into the contract state it describes."""
    state = None
    for ev in events:
        new = _transition(state, ev.op, ev.params)
        prior_gas = state.gas_used if state is not None else 0
        prior_events = state.events if state is not None else ()
        state = _stamp(new, prior_gas + ev.gas, prior_events + (ev,))
    if state is None:
        raise ValueError("cannot replay an empty event log")
    return state


def _require_phase(state: ContractState, *allowed: Phase) -> None:
    if state.phase not in allowed:
        names = ", ".join(p.value for p in allowed)
        raise PhaseError(f"operation requires phase {names}; contract is {state.phase.value}")


# --- operations ------------------------------------------------------------

def deploy(
    query_digest: Digest,
    s2_commitment: Digest,
    price: int,
    required_responses: int,
    schedule: GasSchedule = GasSchedule(),
) -> ContractState:
    if price <= 0:
        raise ValueError(f"price must be positive, got {price}")
    if required_responses < 1:
        raise ValueError(f"required responses must be at least 1, got {required_responses}")
    params = {
        "query_digest": Digest(query_digest).hex(),
        "s2_commitment": Digest(s2_commitment).hex(),
        "price": int(price),
        "required_responses": int(required_responses),
        "gas_schedule": asdict(schedule),
    }
    return _emit(None, "deploy", params, schedule)


def record_response_hash(state: ContractState, addr: Address, h_cr: Digest) -> ContractState:
    _require_phase(state, Phase.DEPLOYED, Phase.COLLECTING)
    addr = Address(addr)
    if state.recorded_digest(addr) is not None:
        raise DuplicateAddressError(f"address 0x{addr.hex()} already recorded a response")
    params = {"address": addr.hex(), "digest": Digest(h_cr).hex()}
    return _emit(state, "record_response", params, state.schedule)


def record_filter_hash(state: ContractState, h_f: Digest, accepted_count: int) -> ContractState:
    _require_phase(state, Phase.COLLECTING)
    if accepted_count < state.required_responses:
        raise ThresholdError(
            f"{accepted_count} accepted responses, {state.required_responses} required"
        )
    if accepted_count > len(state.response_records):
        raise ValueError(
            f"accepted count {accepted_count} exceeds {len(state.response_records)} records"
        )
    params = {"filter_digest": Digest(h_f).hex(), "accepted_count": int(accepted_count)}
    return _emit(state, "record_filter", params, state.schedule)


def make_deposit(state: ContractState, amount: int) -> ContractState:
    _require_phase(state, Phase.FILTERED)
    if amount != state.price:
        raise DepositError(f"deposit must equal the price {state.price}, got {amount}")
    return _emit(state, "deposit", {"amount": int(amount)}, state.schedule)


def reveal_and_settle(state: ContractState, s2: bytes, operator_addr: Address) -> ContractState:
    """Check H(s2) against the commitment and pay the deposit to the operator.

    Raises:
        RevealMismatchError: the preimage is wrong. The error's ``state`` has
            the failed attempt logged and still holds the deposit.
    """
    _require_phase(state, Phase.DEPOSITED)
    operator_addr = Address(operator_addr)
    if len(s2) != crypto.SUITE.nonce_size or crypto.hash(bytes(s2)) != state.s2_commitment:
        failed = _emit(state, "reveal_failed", {"s2": bytes(s2).hex()}, state.schedule)
        raise RevealMismatchError("revealed nonce does not match the on-chain commitment", failed)
    params = {"s2": bytes(s2).hex(), "payee": operator_addr.hex(), "amount": state.deposit_balance}
    return _emit(state, "reveal_and_transfer", params, state.schedule)


@dataclass(frozen=True)
class GasReport:
    per_operation: dict
    total_gas: int
    fiat_total: Decimal | None = None
    currency: str | None = None

    def to_dict(self) -> dict:
        return {
            "per_operation": self.per_operation,
            "total_gas": self.total_gas,
            "fiat_total": None if self.fiat_total is None else str(self.fiat_total),
            "currency": self.currency,
        }


def gas_report(state: ContractState, rate: FiatRate | None = FiatRate()) -> GasReport:
    """Per-operation call counts and gas, totals, and optional fiat conversion."""
    per_op: dict[str, dict] = {}
    for ev in state.events:
        if ev.gas == 0:
            continue
        row = per_op.setdefault(ev.op, {"count": 0, "gas": 0})
        row["count"] += 1
        row["gas"] += ev.gas
    total = sum(row["gas"] for row in per_op.values())
    if total != state.gas_used:
        raise AssertionError("event log gas does not match the contract meter")
    if rate is not None:
        for row in per_op.values():
            row["fiat"] = str(rate.convert(row["gas"]))
        return GasReport(per_op, total, rate.convert(total), rate.currency)
    return GasReport(per_op, total)


def events_to_jsonl(state: ContractState) -> str:
    return "".join(json.dumps(ev.to_dict(), sort_keys=True) + "\n" for ev in state.events)


def events_from_jsonl(text: str) -> tuple[Event, ...]:
    return tuple(Event.from_dict(json.loads(line)) for line in text.splitlines() if line.strip())
