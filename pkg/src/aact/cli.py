"""Command line front end.

Exit codes: 0 success, 1 environment or I/O failure, 2 bad input content.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

import httpx

from . import alia, catalog as cat, fsm, model, pipeline, testgen, twin

EXIT_OK, EXIT_ENV, EXIT_INPUT = 0, 1, 2

# content problems: the user has to fix a file
INPUT_ERRORS = (alia.AliaError, cat.CatalogError, fsm.FsmError, testgen.GenerationError,
                twin.InvariantViolation, twin.VersionParseError, json.JSONDecodeError, ValueError,
                KeyError)
# the environment is at fault: files, network, the service
ENV_ERRORS = (OSError, ConnectionError, httpx.HTTPError, TimeoutError, twin.FormatError,
              pipeline.SubmissionRejected)


def data_file(name: str) -> Path:
    return Path(str(resources.files("aact") / "data" / name))


def _print_json(doc) -> None:
    sys.stdout.write(pipeline.dumps(doc))


def _diagnostics(exc: Exception) -> str:
    if isinstance(exc, alia.SemanticError):
        return "\n".join(f"{d.severity}: {d.code}: {d.message}"
                         + (f" (line {d.location.line})" if d.location else "")
                         for d in exc.diagnostics)
    return str(exc)


# ---------------------------------------------------------------------------
# commands


def cmd_compile(args) -> int:
    text = Path(args.scenario).read_text(encoding="utf-8")
    catalog = cat.load_catalog(args.catalog)
    tc = pipeline.compile_scenario(text, catalog, args.sut, name=Path(args.scenario).stem)
    if args.out:
        pipeline.write_atomic(Path(args.out), tc.dumps())
    else:
        sys.stdout.write(tc.dumps())
    return EXIT_OK


def cmd_analyze(args) -> int:
    blob = Path(args.firmware).read_bytes()
    sigs = twin.load_signatures(args.sigdb)
    vulns = twin.load_vulns(args.vulndb)
    result = pipeline.analyze(blob, sigs, vulns, args.twin)
    out = Path(args.out)
    pipeline.write_atomic(out / "twin.json", pipeline.dumps(result.twin.to_json()))
    pipeline.write_atomic(out / "findings.json", pipeline.dumps(result.findings_json()))
    _print_json({"bom": len(result.twin.bom), "scanned": len(result.scan_bom),
                 "findings": len(result.findings), "out": str(out)})
    return EXIT_OK


def _load_findings(path: str | None) -> list[twin.Finding]:
    if not path:
        return []
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return [twin.finding_from_json(f) for f in doc.get("findings", [])]


def cmd_derive(args) -> int:
    m = pipeline.twin_machine(twin.load_twin(args.twin))
    text = fsm.format_fsm(m)
    if args.out:
        pipeline.write_atomic(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_mutate(args) -> int:
    m = fsm.parse_fsm(Path(args.fsm).read_text(encoding="utf-8"))
    rows = pipeline.export_mutants(m, Path(args.out))
    counts = {op: sum(r["operator"] == op for r in rows) for op in model.OPERATORS}
    summary = {"machine": m.name, "counts": counts, "total": len(rows), "mutants": rows}
    pipeline.write_atomic(Path(args.out) / "mutants.json", pipeline.dumps(summary))
    _print_json({"machine": m.name, "counts": counts, "total": len(rows),
                 "equivalent": sum(r["equivalent"] for r in rows)})
    return EXIT_OK


def cmd_check(args) -> int:
    m = fsm.parse_fsm(Path(args.fsm).read_text(encoding="utf-8"))
    props = fsm.parse_properties(Path(args.properties).read_text(encoding="utf-8"))
    results = []
    for p in props:
        cex = model.check_property(m, p)
        if cex is None:
            results.append({"property": p.name, "result": "Pass"})
        else:
            results.append({"property": p.name, "result": "Violated", "trace": list(cex.trace),
                            "finalState": cex.final_state, "finalOutput": cex.final_output})
    _print_json({"machine": m.name, "results": results})
    return EXIT_OK


def cmd_gen(args) -> int:
    cdt = twin.load_twin(args.twin)
    findings = _load_findings(args.findings)
    mapping = testgen.load_mapping(args.mapping)
    catalog = cat.load_catalog(args.catalog)
    props = []
    if args.properties:
        props = fsm.parse_properties(Path(args.properties).read_text(encoding="utf-8"))
    report = pipeline.generate(args.strategy, cdt, findings, mapping, catalog, args.sut,
                               Path(args.out), seed=args.seed, properties=props)
    _print_json(report.to_json())
    return EXIT_OK


def cmd_run(args) -> int:
    catalog = cat.load_catalog(args.catalog)
    report = pipeline.run_campaign(Path(args.campaign), args.axe_url, catalog,
                                   sim_bt=args.sim_bt, sim_can=args.sim_can,
                                   parallel=args.parallel)
    for e in report["testCases"]:
        print(f"{e['id']}: {e['verdict']['aggregate']}")
    print(f"report: {Path(args.campaign) / 'report.json'}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .axe.app import serve

    config = dict(kv.split("=", 1) for kv in args.config or [])
    serve(args.host, args.port, config=config, certfile=args.certfile, keyfile=args.keyfile)
    return EXIT_OK


def cmd_sim(args) -> int:
    from .sim import SimConfig, run_simulator

    run_simulator(SimConfig(fsm_spec_path=args.fsm, bt_port=args.bt_port, can_port=args.can_port,
                            host=args.host, vulnerable=not args.patched,
                            can_beacon_period_ms=args.beacon_ms))
    return EXIT_OK


def cmd_demo(args) -> int:
    out = Path(args.out)
    for name in ("catalog.json", "catalog_full.json", "mapping.json", "twin.json", "sigdb.json",
                 "vulndb.json", "bt_can_attack.alia", "demo.fsm", "demo.props"):
        pipeline.write_atomic(out / name, data_file(name).read_bytes())
    pipeline.write_atomic(out / "firmware.bin", pipeline.demo_firmware())
    print(f"demo inputs written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aact", description="Automated automotive cybersecurity testing")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="concretize an ALIA scenario into a test case")
    c.add_argument("scenario")
    c.add_argument("--catalog", required=True)
    c.add_argument("--sut", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_compile)

    c = sub.add_parser("analyze", help="scan firmware and assemble the cyber digital twin")
    c.add_argument("firmware")
    c.add_argument("--sigdb", required=True)
    c.add_argument("--vulndb", required=True)
    c.add_argument("--twin", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_analyze)

    c = sub.add_parser("derive", help="derive the behaviour model from a twin")
    c.add_argument("twin")
    c.add_argument("--out")
    c.set_defaults(func=cmd_derive)

    c = sub.add_parser("mutate", help="export all first-order mutants of a machine")
    c.add_argument("fsm")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_mutate)

    c = sub.add_parser("check", help="model-check safety properties")
    c.add_argument("fsm")
    c.add_argument("--properties", required=True)
    c.set_defaults(func=cmd_check)

    c = sub.add_parser("gen", help="generate test cases into a campaign directory")
    c.add_argument("twin")
    c.add_argument("--findings")
    c.add_argument("--strategy", choices=pipeline.STRATEGIES, required=True)
    c.add_argument("--mapping", required=True)
    c.add_argument("--catalog", required=True)
    c.add_argument("--sut", required=True)
    c.add_argument("--properties")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_gen)

    c = sub.add_parser("run", help="execute a campaign and write report.json")
    c.add_argument("campaign")
    c.add_argument("--catalog", required=True)
    c.add_argument("--axe-url", default="http://127.0.0.1:8080")
    c.add_argument("--sim-bt")
    c.add_argument("--sim-can")
    c.add_argument("--parallel", type=int, default=1)
    c.set_defaults(func=cmd_run)

    c = sub.add_parser("serve", help="run the execution service")
    c.add_argument("--host", default="127.0.0.1")
    c.add_argument("--port", type=int, default=8080)
    c.add_argument("--config", action="append", metavar="NAME=VALUE")
    c.add_argument("--certfile")
    c.add_argument("--keyfile")
    c.set_defaults(func=cmd_serve)

    c = sub.add_parser("sim", help="run the simulated ECU")
    c.add_argument("fsm")
    c.add_argument("--host", default="127.0.0.1")
    c.add_argument("--bt-port", type=int, default=7301)
    c.add_argument("--can-port", type=int, default=7302)
    c.add_argument("--beacon-ms", type=int, default=500)
    c.add_argument("--patched", action="store_true", help="not vulnerable to the BT exploit")
    c.set_defaults(func=cmd_sim)

    c = sub.add_parser("demo", help="write the demo inputs to a directory")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_demo)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ENV_ERRORS as exc:
        print(f"error: {_diagnostics(exc)}", file=sys.stderr)
        return EXIT_ENV
    except INPUT_ERRORS as exc:
        print(f"error: {_diagnostics(exc)}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
