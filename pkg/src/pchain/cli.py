"""Command-line entry point.

Exit codes: 0 success, 1 domain error, 2 usage or configuration error,
3 tampering detected.
"""

import argparse
import calendar
import json
import logging
import os
import signal
import sys
import tempfile
import threading
from datetime import date
from pathlib import Path

from .app import DEMO_PULL_LIMIT, DEMO_SEED, CustomerApp, run_demo
from .errors import ChainError, ConfigError, TamperedChain
from .reporting import BUCKETS, FORMATS, QueryFilter, export
from .topology import CONFIG_HELP, CONFIG_NAME, default_topology, load_topology, serve_all

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE, EXIT_TAMPER = 0, 1, 2, 3


def _when(text, end_of_day=False):
    """UTC seconds from an integer or a YYYY-MM-DD date (whole day inclusive)."""
    try:
        return int(text)
    except ValueError:
        pass
    try:
        d = date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected UTC seconds or YYYY-MM-DD, got {text!r}") from None
    ts = calendar.timegm(d.timetuple())
    return ts + 86399 if end_of_day else ts


def _end_of_day(text):
    return _when(text, end_of_day=True)


def build_parser():
    p = argparse.ArgumentParser(
        prog="pchain",
        description="Personal transaction chain: one tamper-evident ledger per customer.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=CONFIG_HELP
        + "\nexit codes: 0 ok, 1 domain error, 2 usage/config error, 3 tampering detected\n",
    )
    p.add_argument("--home", default=os.environ.get("PCHAIN_HOME", ".pchain"),
                   help="workspace directory (default: $PCHAIN_HOME or ./.pchain)")
    p.add_argument("--config", help=f"configuration file (default: HOME/{CONFIG_NAME})")
    p.add_argument("--serve", action="store_true",
                   help="run the in-process services of the configuration over HTTP until interrupted")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("init", help="create the workspace, keys and the customer's chain")
    s.add_argument("--customer", default="customer", help="display name (only when creating the config)")
    s.add_argument("--seed", type=int, help="derive all keys from this seed (only when creating the config)")
    s.add_argument("--backend", default="file:chain", help="storage descriptor (only when creating the config)")

    s = sub.add_parser("enroll", help="certify an institution and grant it submit-transactions")
    s.add_argument("institution", help="institution id from the configuration")

    s = sub.add_parser("revoke", help="revoke an institution's submit-transactions permission")
    s.add_argument("institution", help="institution id from the configuration")

    s = sub.add_parser("pull", help="fetch and submit new transactions from enrolled institutions")
    s.add_argument("--since", type=_when, help="fetch transactions after this time instead of the saved cursor")
    s.add_argument("--limit", type=int, default=DEMO_PULL_LIMIT, help="maximum per institution (default: %(default)s)")

    sub.add_parser("flush", help="seal every queued entry into blocks now")
    sub.add_parser("verify", help="verify the whole chain; exit 3 on tampering")

    s = sub.add_parser("query", help="list transactions matching filters")
    s.add_argument("--from", dest="date_from", type=_when, help="occurred_at >= (UTC seconds or YYYY-MM-DD)")
    s.add_argument("--to", dest="date_to", type=_end_of_day, help="occurred_at <= (a date includes the whole day)")
    s.add_argument("--institution", help="institution id or hex fingerprint")
    s.add_argument("--min", dest="min_amount", type=int, help="amount >= (minor units)")
    s.add_argument("--max", dest="max_amount", type=int, help="amount <= (minor units)")
    s.add_argument("--text", help="substring of the description")
    s.add_argument("--format", choices=FORMATS, default="csv")
    s.add_argument("--out", help="write to this file instead of standard output")

    s = sub.add_parser("report", help="per-institution, per-period and running totals")
    s.add_argument("--bucket", choices=BUCKETS, default="month")
    s.add_argument("--format", choices=FORMATS, default="csv")
    s.add_argument("--out", help="write to this file instead of standard output")

    s = sub.add_parser("migrate", help="copy the chain to a new backend and switch to it")
    s.add_argument("backend", help="file:PATH (relative to home) or mem:")

    s = sub.add_parser("demo", help="scripted end-to-end scenario with fixed seeds")
    s.add_argument("--networked", action="store_true", help="run the services over local HTTP")
    s.add_argument("--tamper", action="store_true", help="flip a stored byte before verifying")
    s.add_argument("--seed", type=int, default=DEMO_SEED)
    s.add_argument("--limit", type=int, default=DEMO_PULL_LIMIT, help="transactions per institution")
    s.add_argument("--demo-home", dest="demo_home", help="fresh directory for the demo (default: a temporary one)")
    return p


def _emit(data, out):
    if out:
        Path(out).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()


def _print_integrity(report):
    print(f"ok={str(report.ok).lower()}")
    print(f"length={report.length}")
    if report.ok:
        print(f"head={report.head_digest.hex() if report.head_digest else ''}")
    else:
        print(f"first_bad_height={report.first_bad_height}")
        print(f"reason={report.reason}")


def _serve_forever(args):
    topo = load_topology(args.home, args.config)
    services, urls = serve_all(topo)
    for name, url in urls.items():
        print(f"{name} = {url}", flush=True)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        stop.wait()
    except KeyboardInterrupt:
        pass
    finally:
        services.close()
    return EXIT_OK


def _init(args):
    home = Path(args.home)
    config = Path(args.config) if args.config else home / CONFIG_NAME
    if not config.exists():
        home.mkdir(parents=True, exist_ok=True)
        topo = default_topology(home, customer=args.customer, seed=args.seed, backend=args.backend)
        config.write_text(topo.render(), encoding="utf-8")
    app = CustomerApp(load_topology(home, config))
    try:
        chain = app.init()
        print(f"chain={chain.hex()}")
    finally:
        app.close()
    return EXIT_OK


def _demo(args):
    home = args.demo_home or tempfile.mkdtemp(prefix="pchain-demo-")
    result = run_demo(home, networked=args.networked, tamper=args.tamper, pull_limit=args.limit, seed=args.seed)
    pulled = result["pulled"]
    print(f"home={home}")
    print(f"chain={result['chain']}")
    print(f"accepted={pulled['accepted']} duplicates={pulled['duplicates']} rejected={pulled['rejected']}")
    if result["tampered_at"] is not None:
        print(f"tampered_block={result['tampered_at']}")
    _print_integrity(result["integrity"])
    if not result["integrity"].ok:
        return EXIT_TAMPER
    print(f"report={result['report']}")
    print(f"summary={result['summary']}")
    return EXIT_OK


def _run(args):
    if args.command == "init":
        return _init(args)
    if args.command == "demo":
        return _demo(args)
    app = CustomerApp(load_topology(args.home, args.config))
    try:
        cmd = args.command
        if cmd == "enroll":
            cert = app.enroll(args.institution)
            print(f"institution={args.institution} fingerprint={cert.fingerprint.hex()}")
        elif cmd == "revoke":
            _, unknown = app.revoke(args.institution)
            print(f"revoked={args.institution}" + (" flagged=UnknownFingerprint" if unknown else ""))
        elif cmd == "pull":
            summary = app.pull(since=args.since, limit=args.limit)
            print(json.dumps(summary, sort_keys=True))
        elif cmd == "flush":
            blocks = app.flush()
            print(f"sealed={','.join(str(b.height) for b in blocks)}")
        elif cmd == "verify":
            report = app.verify()
            _print_integrity(report)
            return EXIT_OK if report.ok else EXIT_TAMPER
        elif cmd == "query":
            institution = app.institution_fingerprint(args.institution) if args.institution else None
            try:
                filt = QueryFilter(args.date_from, args.date_to, institution, args.min_amount, args.max_amount, args.text)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            _emit(export(app.query(filt), args.format), args.out)
        elif cmd == "report":
            _emit(export(app.summarize(args.bucket), args.format), args.out)
        elif cmd == "migrate":
            report = app.migrate(args.backend)
            print(f"blocks_moved={report.blocks_moved}")
            print(f"head={report.head_digest.hex() if report.head_digest else ''}")
        return EXIT_OK
    finally:
        app.close()


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command is None and not args.serve:
        parser.error("a command is required (or --serve)")
    try:
        if args.serve:
            if args.command is not None:
                parser.error("--serve takes no command")
            return _serve_forever(args)
        return _run(args)
    except TamperedChain as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        report = exc.detail.get("report") or {}
        if report.get("first_bad_height") is not None:
            print(f"first_bad_height={report['first_bad_height']}", file=sys.stderr)
        return EXIT_TAMPER
    except ConfigError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ChainError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
