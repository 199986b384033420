"""Command-line driver: sessions, experiments, dispute checks and gas reports.

Exit codes: 0 success, 2 threshold not met, 3 dispute, 64 usage,
65 unparsable input, 66 missing input.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from decimal import Decimal, InvalidOperation
from pathlib import Path

import numpy as np

from . import ledger, protocol, sim
from .ldp import Query, check_coin_bias
from .protocol import Metadata

EXIT_OK = 0
EXIT_THRESHOLD = 2
EXIT_DISPUTE = 3
EXIT_USAGE = 64
EXIT_PARSE = 65
EXIT_MISSING = 66


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    """Comma list of ints; ``a..b`` expands to an inclusive range."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _seed(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("seed must be non-negative")
    return value


def _float_list(text: str) -> list[float]:
    return [float(p) for p in text.split(",") if p.strip()]


def _coin(text: str) -> float:
    try:
        return check_coin_bias(float(text))
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err))


def parse_predicate(spec: str | None):
    """Build a metadata predicate from ``all``, ``region=X[|Y]``, ``after=T`` or ``before=T``.

    Clauses are joined with ``;`` and must all hold.
    """
    if spec is None or spec.strip() in ("", "all"):
        return None
    clauses = []
    for clause in spec.split(";"):
        key, sep, value = clause.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"bad predicate clause {clause!r}")
        if key == "region":
            allowed = set(value.split("|"))
            clauses.append(lambda m, a=allowed: m.region in a)
        elif key == "after":
            clauses.append(lambda m, t=int(value): m.capture_time >= t)
        elif key == "before":
            clauses.append(lambda m, t=int(value): m.capture_time < t)
        else:
            raise UsageError(f"unknown predicate key {key!r}")
    return lambda m: all(c(m) for c in clauses)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ldpmarket", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key = value file supplying defaults for the subcommand flags")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def out_flags(sp, formats=("json", "csv")):
        sp.add_argument("--format", choices=formats, default=formats[0])
        sp.add_argument("--output", help="write here instead of stdout")

    s = sub.add_parser("run-session", help="run one marketplace session end to end")
    s.add_argument("--n", type=int, default=20, help="number of choices")
    s.add_argument("--price", type=int, default=1000)
    s.add_argument("--required-responses", "--nr", dest="required_responses", type=int, default=5)
    s.add_argument("--providers", type=int, default=10)
    s.add_argument("--f", type=_coin, default=0.5)
    s.add_argument("--seed", type=_seed)
    s.add_argument("--predicate", default="all")
    s.add_argument("--regions", default="A", help="comma list of regions assigned round-robin")
    s.add_argument("--start-time", type=int, default=1_700_000_000)
    s.add_argument("--inject-wrong-reveal", action="store_true")
    s.add_argument("--inject-tamper", action="store_true")
    out_flags(s, ("json",))

    a = sub.add_parser("accuracy", help="estimator accuracy versus provider count")
    a.add_argument("--n", type=int, default=20)
    a.add_argument("--counts", type=_int_list, default=[500, 1000, 5000, 10000])
    a.add_argument("--mean", type=float, default=10.0)
    a.add_argument("--sd", type=float, default=2.0)
    a.add_argument("--f", type=_coin, default=0.5)
    a.add_argument("--seed", type=_seed)
    out_flags(a, ("csv", "json"))

    t = sub.add_parser("attacker", help="sequential running-mean attacker")
    t.add_argument("--mode", choices=sim.MODES, default="rappor")
    t.add_argument("--providers", type=int, default=1000)
    t.add_argument("--n", type=int, default=20)
    t.add_argument("--mean", type=float, default=10.0)
    t.add_argument("--sd", type=float, default=2.0)
    t.add_argument("--f", type=_coin, default=0.5)
    t.add_argument("--seed", type=_seed)
    out_flags(t)

    d = sub.add_parser("advantage", help="attacker advantage table")
    d.add_argument("--n-values", type=_int_list, default=list(range(1, 101)))
    d.add_argument("--f-values", type=_float_list, default=[0.5, 0.2])
    out_flags(d, ("csv", "json"))

    v = sub.add_parser("verify", help="check a transcript against its on-chain digests")
    v.add_argument("--transcript", required=True)
    v.add_argument("--which", required=True, help="'filter' or 'response:<address hex>'")
    out_flags(v, ("json",))

    g = sub.add_parser("gas", help="gas and fiat report from a transcript")
    g.add_argument("--transcript", required=True)
    g.add_argument("--fiat-rate", help="currency per gas unit")
    g.add_argument("--gas-config", help="JSON file overriding schedule and fiat rate")
    out_flags(g)

    return p


def _config_tokens(path: str) -> list[str]:
    """Turn ``key = value`` lines into long flags placed before explicit ones."""
    text = Path(path).read_text(encoding="utf-8")
    cp = configparser.ConfigParser()
    try:
        cp.read_string("[cli]\n" + text)
    except configparser.Error as err:
        raise UsageError(f"cannot parse config file: {err}") from err
    tokens = []
    for key, value in cp["cli"].items():
        flag = "--" + key.replace("_", "-")
        if value.lower() in ("true", "yes", "on"):
            tokens.append(flag)
        elif value.lower() in ("false", "no", "off"):
            continue
        else:
            tokens += [flag, value]
    return tokens


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        idx = argv.index(args.command)
        argv = argv[:idx + 1] + _config_tokens(args.config) + argv[idx + 1:]
        args = parser.parse_args(argv)
    if args.command in ("run-session", "accuracy", "attacker") and args.seed is None:
        raise UsageError(f"{args.command}: --seed is required")
    return args


def _emit(text: str, output: str | None) -> None:
    if output:
        Path(output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _read_transcript(path: str) -> protocol.LoadedTranscript:
    return protocol.load_transcript(Path(path).read_text(encoding="utf-8"))


def cmd_run_session(args) -> int:
    try:
        terms = protocol.MarketTerms(Query.numbered(args.n), args.price, args.required_responses, args.f)
    except ValueError as err:
        raise UsageError(str(err)) from err
    if args.providers < 1:
        raise UsageError("--providers must be at least 1")
    predicate = parse_predicate(args.predicate)
    regions = [r for r in args.regions.split(",") if r]
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 1]))
    truths = rng.integers(0, args.n, size=args.providers)
    metadata = [
        Metadata(regions[i % len(regions)], args.start_time + 60 * i) for i in range(args.providers)
    ]
    try:
        session = protocol.run_session(
            terms, truths, metadata, args.seed, predicate,
            inject_wrong_reveal=args.inject_wrong_reveal, inject_tamper=args.inject_tamper,
        )
    except ledger.ThresholdError as err:
        print(f"threshold not met: {err}", file=sys.stderr)
        _emit(protocol.transcript_json(err.session), args.output)
        return EXIT_THRESHOLD
    except (ledger.RevealMismatchError, protocol.IntegrityError) as err:
        print(f"dispute: {err.session.dispute}: {err}", file=sys.stderr)
        _emit(protocol.transcript_json(err.session), args.output)
        return EXIT_DISPUTE
    _emit(protocol.transcript_json(session), args.output)
    return EXIT_OK


def cmd_accuracy(args) -> int:
    try:
        config = sim.ExperimentConfig(args.n, tuple(args.counts), args.mean, args.sd, args.f, args.seed)
    except ValueError as err:
        raise UsageError(str(err)) from err
    report = sim.run_accuracy_experiment(config)
    _emit(report.to_csv() if args.format == "csv" else report.to_json(), args.output)
    return EXIT_OK


def cmd_attacker(args) -> int:
    try:
        config = sim.ExperimentConfig(args.n, (args.providers,), args.mean, args.sd, args.f, args.seed)
    except ValueError as err:
        raise UsageError(str(err)) from err
    report = sim.run_attacker_experiment(config, args.mode, args.providers)
    _emit(report.to_csv() if args.format == "csv" else report.to_json(), args.output)
    return EXIT_OK


def cmd_advantage(args) -> int:
    try:
        records = sim.advantage_sweep(args.n_values, args.f_values)
    except ValueError as err:
        raise UsageError(str(err)) from err
    _emit(sim.advantage_csv(records) if args.format == "csv" else sim.advantage_json(records), args.output)
    return EXIT_OK


def cmd_verify(args) -> int:
    tr = _read_transcript(args.transcript)
    if args.which == "filter":
        if tr.filter_vector is None:
            raise ValueError("transcript has no published filter vector")
        ok = protocol.verify_filter(tr.filter_vector, tr.events)
    elif args.which.startswith("response:"):
        addr = args.which.split(":", 1)[1].lower().removeprefix("0x")
        matches = [s for s in tr.submissions if s.address.hex() == addr]
        if not matches:
            raise ValueError(f"no submission from {addr} in transcript")
        ok = protocol.verify_response_integrity(matches[0], tr.events)
    else:
        raise UsageError(f"--which must be 'filter' or 'response:<addr>', got {args.which!r}")
    _emit(json.dumps({"which": args.which, "valid": ok}) + "\n", args.output)
    return EXIT_OK if ok else EXIT_DISPUTE


def cmd_gas(args) -> int:
    tr = _read_transcript(args.transcript)
    rate = ledger.FiatRate()
    if args.gas_config:
        _, rate = ledger.load_gas_config(args.gas_config)
    if args.fiat_rate is not None:
        try:
            rate = ledger.FiatRate(per_gas=Decimal(args.fiat_rate), currency=rate.currency)
        except InvalidOperation as err:
            raise UsageError(f"bad --fiat-rate {args.fiat_rate!r}") from err
    report = ledger.gas_report(ledger.replay(tr.events), rate)
    if args.format == "csv":
        lines = ["operation,count,gas,fiat"]
        for op, row in report.per_operation.items():
            lines.append(f"{op},{row['count']},{row['gas']},{row['fiat']}")
        lines.append(f"total,,{report.total_gas},{report.fiat_total}")
        text = "\n".join(lines) + "\n"
    else:
        text = json.dumps(report.to_dict(), indent=2) + "\n"
    _emit(text, args.output)
    return EXIT_OK


COMMANDS = {
    "run-session": cmd_run_session,
    "accuracy": cmd_accuracy,
    "attacker": cmd_attacker,
    "advantage": cmd_advantage,
    "verify": cmd_verify,
    "gas": cmd_gas,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as err:
        print(f"missing input: {err}", file=sys.stderr)
        return EXIT_MISSING
    except (ValueError, ledger.ContractError, protocol.ProtocolError) as err:
        print(f"cannot process input: {err}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
