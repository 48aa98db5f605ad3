"""Command-line entry point: ``uscscan <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from ._validation import check_bytecode, normalize_address
from .bytecode import analyze_bytecode, disassemble, format_selector
from .classifier import analyze_contract, classify
from .ingest import ContractRecord, CreationTrace, FixtureError, RpcError, fetch_code, resolve_logic_address
from .report import (
    EXIT_INTERNAL,
    EXIT_OK,
    EXIT_USAGE,
    ScanConfig,
    UsageError,
    evaluate_precision,
    open_state,
    run_corpus,
    write_outputs,
)
from .signatures import SignatureError, UpgradeFunctionDb

log = logging.getLogger("uscscan")

DEFAULT_OUT_DIR = "uscscan-out"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # Registered on the root and on every subparser so the flags work in
    # either position; subparsers use SUPPRESS so they don't clobber.
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--rpc", default=d(None), help="JSON-RPC endpoint (or USCSCAN_RPC_URL)")
    parser.add_argument("--db", default=d(None), help="upgrade-function signature file")
    parser.add_argument("--out-dir", default=d(None), help="output directory for scan results")
    parser.add_argument("--jobs", type=int, default=d(1), help="worker threads")
    parser.add_argument("--config", default=d(None), help="flat JSON config file")


def _corpus_inputs(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--contracts", help="contracts JSONL")
    parser.add_argument("--transactions", help="transactions JSONL")
    parser.add_argument("--traces", help="creation traces JSONL")
    parser.add_argument("--migrations", help="migrations CSV")
    parser.add_argument("--tokenlist", action="append", default=[], help="token list JSON (repeatable)")
    parser.add_argument("--state", help="offline state snapshot JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="uscscan", description=__doc__)
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("scan", help="full pipeline over a fixture corpus")
    _corpus_inputs(p)
    p = sub.add_parser("chains", help="print upgrade chains as JSONL")
    _corpus_inputs(p)
    p = sub.add_parser("audit", help="print security findings as JSONL")
    _corpus_inputs(p)

    p = sub.add_parser("disasm", help="disassemble one bytecode")
    p.add_argument("bytecode", help="hex string, or @path to a file holding one")
    p.add_argument("--features", action="store_true", help="also print extracted features")

    p = sub.add_parser("classify", help="classify one contract")
    p.add_argument("bytecode", nargs="?", help="hex string or @path; fetched via RPC when omitted")
    p.add_argument("--address", help="contract address (used to resolve the logic contract)")
    p.add_argument("--logic-bytecode", help="logic contract bytecode (hex or @path)")
    p.add_argument("--trace", help="comma-separated creation-trace opcodes, e.g. CREATE2")
    p.add_argument("--state", help="offline state snapshot JSON")

    p = sub.add_parser("eval", help="precision of predictions against labels")
    p.add_argument("--predictions", required=True, help="classifications.jsonl or {address: pattern} JSON")
    p.add_argument("--labels", required=True, help="JSONL or {address: pattern} JSON")

    for name, action in sub.choices.items():
        _global_flags(action, suppress=True)
    return parser


def _read_hex(arg: str | None) -> bytes:
    if arg is None:
        return b""
    if arg.startswith("@"):
        arg = Path(arg[1:]).read_text().strip()
    return check_bytecode(arg)


def _read_mapping(path: str) -> dict[str, str]:
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{") and "\n{" not in stripped:
        doc = json.loads(text)
        return {normalize_address(k): str(v) for k, v in doc.items()}
    out = {}
    for line in text.splitlines():
        if line.strip():
            row = json.loads(line)
            out[normalize_address(row["address"])] = str(row.get("pattern") or row.get("label"))
    return out


def _config(args) -> ScanConfig:
    config = ScanConfig()
    if args.config:
        config.update_from_file(args.config)
    for key in ("contracts", "transactions", "traces", "migrations", "state"):
        value = getattr(args, key, None)
        if value:
            setattr(config, key, value)
    if getattr(args, "tokenlist", None):
        config.tokenlists = list(args.tokenlist)
    if args.db:
        config.db = args.db
    if args.jobs != 1:
        config.jobs = args.jobs
    if args.out_dir:
        config.out_dir = args.out_dir
    config.rpc = args.rpc or config.rpc or os.environ.get("USCSCAN_RPC_URL")
    if config.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    return config


def _emit(rows) -> None:
    for row in rows:
        sys.stdout.write(json.dumps(row, sort_keys=True) + "\n")


def _cmd_scan(args) -> int:
    config = _config(args)
    result = run_corpus(config)
    write_outputs(result, config.out_dir or DEFAULT_OUT_DIR)
    counts = result.report["counts"]
    for pattern, c in counts.items():
        print(f"{pattern:16s} raw={c['raw']:<6d} dedup={c['dedup']}")
    print(f"findings: {len(result.findings)}  errors: {len(result.report['errors'])}")
    return result.exit_code


def _cmd_chains(args) -> int:
    result = run_corpus(_config(args))
    _emit(c.to_dict() for c in result.chains)
    return EXIT_OK


def _cmd_audit(args) -> int:
    result = run_corpus(_config(args))
    _emit(f.to_dict() for f in result.findings)
    return result.exit_code


def _cmd_disasm(args) -> int:
    code = _read_hex(args.bytecode)
    stream = disassemble(code)
    for ins in stream:
        print(ins)
    if stream.metadata_trailer:
        print(f"; metadata trailer: {len(stream.metadata_trailer)} bytes")
    if args.features:
        print(json.dumps(analyze_bytecode(code).to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_classify(args) -> int:
    config = _config(args)
    db = UpgradeFunctionDb.load(config.db)
    state = open_state(config)
    address = normalize_address(args.address) if args.address else None
    if args.bytecode:
        code = _read_hex(args.bytecode)
    elif address and state is not None:
        code = fetch_code(state, address)
    else:
        raise UsageError("give a bytecode, or --address with --rpc/--state")
    address = address or normalize_address(1)
    record = ContractRecord(address, code, address, "0x" + "00" * 32, 0)

    logic_address = logic_code = probe = None
    if args.logic_bytecode:
        logic_code = _read_hex(args.logic_bytecode)
        logic_address = normalize_address((1 << 159) + 1)
    elif args.address and state is not None:
        resolution = resolve_logic_address(state, address)
        if resolution is not None:
            logic_address, probe = resolution.address, resolution.probe
            logic_code = fetch_code(state, logic_address)
    trace = None
    if args.trace is not None:
        ops = tuple(o.strip().upper() for o in args.trace.split(",") if o.strip())
        trace = CreationTrace(record.creation_tx, address, ops)

    analysis = analyze_contract(
        record, db,
        logic_address=logic_address, logic_code=logic_code,
        creation_trace=trace, logic_probe=probe,
    )
    result = classify(analysis)
    doc = result.to_dict()
    doc["address"] = address
    doc["logic_address"] = logic_address
    doc["local_selectors"] = sorted(format_selector(s) for s in analysis.features.local_selectors)
    print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_eval(args) -> int:
    metrics = evaluate_precision(_read_mapping(args.predictions), _read_mapping(args.labels))
    for pattern, row in sorted(metrics.rows.items()):
        print(f"{pattern:16s} tp={row.tp:<5d} fp={row.fp:<5d} {row.percent}")
    t = metrics.total
    print(f"{'Total':16s} tp={t.tp:<5d} fp={t.fp:<5d} {t.percent}")
    if metrics.coverage_gap:
        print(f"coverage gap: {len(metrics.coverage_gap)} labelled address(es) without a prediction")
    return EXIT_OK


COMMANDS = {
    "scan": _cmd_scan,
    "chains": _cmd_chains,
    "audit": _cmd_audit,
    "disasm": _cmd_disasm,
    "classify": _cmd_classify,
    "eval": _cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, FixtureError, SignatureError, FileNotFoundError, ValueError) as exc:
        print(f"uscscan: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RpcError as exc:
        print(f"uscscan: rpc failure: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
