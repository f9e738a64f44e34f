"""Pipeline glue: firmware analysis, test generation and campaign runs.

The CLI is a thin shell over these functions. A campaign directory holds
``scenarios/``, ``testcases/``, ``seeds/`` and, after a run, ``report.json``.
"""

from __future__ import annotations

import json
import os
import platform
import random
import re
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import httpx

from . import __version__, alia, model, oracle, testgen, twin
from .catalog import Catalog, SutRecord
from .fsm import Property, StateMachine, format_fsm

STRATEGIES = ("dsl", "mutation", "modelcheck")
SEEDS_PER_COUNTEREXAMPLE = 8
POLL_S = 0.05


def write_atomic(path: Path, text: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    data = text.encode("utf-8") if isinstance(text, str) else text
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def dumps(doc: Any) -> str:
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# compile / analyze


def compile_scenario(text: str, catalog: Catalog, sut_id: str, *, name: str = "scenario",
                     origin: str = "static-dsl") -> testgen.ExecutableTestCase:
    s = alia.parse_scenario(text, name)
    alia.check_scenario(s)
    return testgen.concretize(s, catalog.sut(sut_id), catalog, origin=origin)


@dataclass
class Analysis:
    twin: twin.CyberDigitalTwin
    findings: list[twin.Finding]
    scan_bom: list[twin.BomEntry]
    skipped: list[str] = field(default_factory=list)

    def findings_json(self) -> dict[str, Any]:
        return {"twinId": self.twin.twin_id, "findings": [f.to_json() for f in self.findings],
                "skipped": list(self.skipped)}


def analyze(blob: bytes, signatures: Sequence[twin.Signature], vulns: Sequence[twin.VulnRecord],
            twin_file: str | Path | dict) -> Analysis:
    scan = twin.scan_firmware(blob, signatures)
    cdt = twin.assemble_twin(scan, twin_file)
    skipped: list[str] = []
    findings = twin.match_vulnerabilities(cdt.bom, vulns, skipped=skipped)
    return Analysis(cdt, findings, scan, skipped)


def demo_firmware(size: int = 64 * 1024, seed: int = 7) -> bytes:
    """Pseudo-random image with the demo ``bt_stack 5.43`` signature planted."""
    blob = bytearray(random.Random(seed).randbytes(size))
    marker = b"BTSTACK/5.43\x00\x7f"
    blob[0x1400:0x1400 + len(marker)] = marker
    return bytes(blob)


# ---------------------------------------------------------------------------
# generation


@dataclass
class GenerationReport:
    strategy: str
    testcases: list[str] = field(default_factory=list)
    scenarios: list[str] = field(default_factory=list)
    seeds: list[str] = field(default_factory=list)
    unmapped: list[dict[str, str]] = field(default_factory=list)
    equivalent: list[str] = field(default_factory=list)
    properties: list[dict[str, Any]] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {"strategy": self.strategy, "testcases": self.testcases,
                "scenarios": self.scenarios, "seeds": self.seeds, "unmapped": self.unmapped,
                "equivalent": self.equivalent, "properties": self.properties,
                "notes": self.notes}


def twin_machine(cdt: twin.CyberDigitalTwin) -> StateMachine:
    return model.derive_machine(cdt.flow_graph, cdt.interfaces, name=cdt.twin_id or "twin")


def mutation_oracle(trace: Sequence[str], spec: StateMachine, mutant: StateMachine,
                    step: str) -> str | None:
    """Rule that holds when the final step shows the mutant's output instead
    of the specified one. The step's stdout carries the output symbol, so the
    check is attributed to that step alone."""
    want, _ = spec.run(trace)
    got, _ = mutant.run(trace)

    def exact(symbol: str) -> str:
        return oracle.format_rule(oracle.OutputMatches(step, f"^{re.escape(symbol)}$"))

    if got[-1] is not None:
        return exact(got[-1])
    if want[-1] is not None:
        return f"NOT {exact(want[-1])}"
    return None


def generate(strategy: str, cdt: twin.CyberDigitalTwin, findings: Sequence[twin.Finding],
             mapping: testgen.Mapping, catalog: Catalog, sut_id: str, out: Path, *,
             seed: int = 0, properties: Iterable[Property] = ()) -> GenerationReport:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {', '.join(STRATEGIES)}")
    record = catalog.sut(sut_id)
    report = GenerationReport(strategy)
    if strategy == "dsl":
        _gen_dsl(report, findings, mapping, catalog, record, out)
    elif strategy == "mutation":
        _gen_mutation(report, twin_machine(cdt), mapping, catalog, record, out)
    else:
        _gen_modelcheck(report, cdt, findings, mapping, catalog, record, out, seed, list(properties))
    return report


def _write_case(report: GenerationReport, out: Path, tc: testgen.ExecutableTestCase) -> None:
    path = out / "testcases" / f"{tc.id}.json"
    write_atomic(path, tc.dumps())
    report.testcases.append(str(path.relative_to(out)))


def _gen_dsl(report, findings, mapping, catalog, record, out) -> None:
    result = testgen.scenario_from_findings(findings, mapping)
    report.unmapped = result.unmapped
    for s in result.scenarios:
        path = out / "scenarios" / f"{s.name}.alia"
        write_atomic(path, alia.print_scenario(s))
        report.scenarios.append(str(path.relative_to(out)))
        _write_case(report, out, testgen.concretize(s, record, catalog, origin="findings-dsl"))


def _gen_mutation(report, m, mapping, catalog, record, out) -> None:
    mutants = model.enumerate_mutants(m)
    killable = []
    for mu in mutants:
        trace = model.distinguishing_test(m, mu)
        if trace is None:
            report.equivalent.append(mu.name)
        else:
            killable.append((mu, trace))
    traces = {mu.name: trace for mu, trace in killable}
    ranked = model.rank_mutants([mu for mu, _ in killable], m)
    for i, mu in enumerate(ranked, 1):
        trace = traces[mu.name]
        tc = testgen.testcase_from_trace(trace, record, m, catalog, mapping,
                                         case_id=f"mut-{i:03d}-{mu.name}", origin="mutation")
        rule = mutation_oracle(trace, m, mu.machine, tc.steps[-1].step)
        tc.oracle = [] if rule is None else [{"step": tc.steps[-1].step, "rule": rule}]
        _write_case(report, out, tc)
    report.notes.append(f"{len(mutants)} mutants, {len(killable)} killable, "
                        f"{len(report.equivalent)} equivalent")


def _gen_modelcheck(report, cdt, findings, mapping, catalog, record, out, seed, extra) -> None:
    m = twin_machine(cdt)
    sl = model.security_slice(m, findings)
    props = list(sl.properties) + extra
    if sl.unmatched:
        report.notes.append("findings without a model state: " + ", ".join(sl.unmatched))
    for i, p in enumerate(props, 1):
        cex = model.check_property(sl.machine, p)
        if cex is None:
            report.properties.append({"property": p.name, "result": "Pass"})
            continue
        report.properties.append({"property": p.name, "result": "Violated",
                                  "trace": list(cex.trace), "finalState": cex.final_state})
        if not cex.trace:
            report.notes.append(f"{p.name}: violated in the initial state, no test case")
            continue
        case_id = f"mc-{i:03d}-{p.name}"
        tc = testgen.testcase_from_trace(cex.trace, record, m, catalog, mapping,
                                         case_id=case_id, origin="model-check")
        _write_case(report, out, tc)
        for j, blob in enumerate(testgen.fuzz_corpus_from_counterexample(
                cex, SEEDS_PER_COUNTEREXAMPLE, seed)):
            path = out / "seeds" / case_id / f"{j:03d}.bin"
            write_atomic(path, blob)
            report.seeds.append(str(path.relative_to(out)))
    if props and all(p["result"] == "Pass" for p in report.properties):
        report.notes.append("Pass: no property violated, no test cases generated")


# ---------------------------------------------------------------------------
# running against the execution service


class AxeClient:
    def __init__(self, base_url: str, timeout: float = 10.0):
        self.http = httpx.Client(base_url=base_url.rstrip("/"), timeout=timeout)

    def ping(self) -> None:
        self.http.get("/api/v1/sessions").raise_for_status()

    def put_config(self, entries: Mapping[str, str]) -> None:
        self.http.put("/api/v1/config", json=dict(entries)).raise_for_status()

    def submit(self, body: Mapping[str, Any]) -> str:
        r = self.http.post("/api/v1/testcases", json=dict(body))
        if r.status_code != 202:
            raise SubmissionRejected(r.status_code, r.text)
        return r.json()["executionId"]

    def get(self, execution_id: str) -> dict[str, Any]:
        r = self.http.get(f"/api/v1/executions/{execution_id}")
        r.raise_for_status()
        return r.json()

    def wait(self, execution_id: str, timeout: float) -> dict[str, Any]:
        deadline = time.monotonic() + timeout
        while True:
            doc = self.get(execution_id)
            if doc["status"] in ("done", "error"):
                return doc
            if time.monotonic() > deadline:
                raise TimeoutError(f"execution {execution_id} still {doc['status']}")
            time.sleep(POLL_S)

    def close(self) -> None:
        self.http.close()


class SubmissionRejected(RuntimeError):
    def __init__(self, status: int, body: str):
        self.status = status
        super().__init__(f"service rejected the test case ({status}): {body}")


def step_events(execution: Mapping[str, Any]) -> tuple[list[oracle.Event], dict[str, int]]:
    """Tool and binding events plus step anchors from an execution snapshot."""
    events, anchors = [], {}
    for r in execution["stepResults"]:
        anchors[r["step"]] = r["startedAt"]
        if r["status"] == "OMITTED":
            continue
        events.append(oracle.Event(r["endedAt"], "tool", r["stdout"], r["step"]))
        for var, value in r["boundVars"].items():
            events.append(oracle.Event(r["endedAt"], "binding", f"{var}={value}", r["step"]))
    return events, anchors


def _can_atoms(rule: oracle.Rule) -> list[oracle.CanSeen]:
    if isinstance(rule, oracle.CanSeen):
        return [rule]
    if isinstance(rule, oracle.Not):
        return _can_atoms(rule.rule)
    if isinstance(rule, oracle.And):
        return _can_atoms(rule.left) + _can_atoms(rule.right)
    return []


def settle_can(rules: oracle.RuleSet, monitor: oracle.CanMonitor, anchors: Mapping[str, int]) -> None:
    """Block until every CAN_SEEN window is decided: the frame showed up, or
    the window has closed."""
    pending = []
    for cond in rules.conditions:
        if cond.step not in anchors:
            continue
        for atom in _can_atoms(cond.rule):
            lo = anchors[cond.step]
            pending.append((atom.frame, lo, lo + int(round(atom.window_s * 1000))))
    while pending:
        seen = monitor.events()
        now = oracle.now_ms()
        pending = [(f, lo, hi) for f, lo, hi in pending
                   if now <= hi and not any(e.payload == f and lo <= e.timestamp_ms <= hi for e in seen)]
        if pending:
            time.sleep(POLL_S)


def run_case(client: AxeClient, tc: testgen.ExecutableTestCase, can_address: str | None,
             *, reset_bt: str | None = None, timeout: float = 120.0) -> dict[str, Any]:
    if reset_bt:
        reset_simulator(reset_bt)
    rules = oracle.parse_rules(tc.oracle)
    monitor = oracle.subscribe_can(can_address) if can_address else None
    t0 = time.monotonic()
    started = oracle.now_ms()
    try:
        eid = client.submit(tc.for_axe())
        execution = client.wait(eid, timeout)
        events, anchors = step_events(execution)
        if monitor is not None:
            settle_can(rules, monitor, anchors)
            events += monitor.events()
    finally:
        if monitor is not None:
            monitor.close()
    verdict = oracle.evaluate(rules, events, anchors, on_missing_anchor="unmet")
    return {
        "id": tc.id, "origin": tc.origin, "sutId": tc.sut_id, "executionId": eid,
        "status": execution["status"], "verdict": verdict.to_json(),
        "stepResults": [{"step": r["step"], "status": r["status"], "exitCode": r["exitCode"]}
                        for r in execution["stepResults"]],
        "timings": {"startedAt": started, "endedAt": oracle.now_ms(),
                    "wall_s": round(time.monotonic() - t0, 3)},
    }


def reset_simulator(bt_address: str) -> None:
    import socket

    with socket.create_connection(oracle.parse_address(bt_address), timeout=5) as sock:
        sock.sendall(b"RESET\n")
        if not sock.makefile("rb").readline().startswith(b"OK"):
            raise ConnectionError("simulator did not acknowledge RESET")


def service_config(record: SutRecord, sim_bt: str | None, sim_can: str | None) -> dict[str, str]:
    cfg = {name: b.value for name, b in record.symbols.items()}
    if sim_bt:
        cfg["SIM_BT"] = sim_bt
    if sim_can:
        cfg["SIM_CAN"] = sim_can
    return cfg


def load_campaign(campaign: Path) -> list[testgen.ExecutableTestCase]:
    cases = [testgen.load_testcase(p) for p in sorted((campaign / "testcases").glob("*.json"))]
    ids = [c.id for c in cases]
    dup = {i for i in ids if ids.count(i) > 1}
    if dup:
        raise ValueError("duplicate test-case ids: " + ", ".join(sorted(dup)))
    return cases


def run_campaign(campaign: Path, axe_url: str, catalog: Catalog, *, sim_bt: str | None = None,
                 sim_can: str | None = None, parallel: int = 1) -> dict[str, Any]:
    """Execute every test case of ``campaign`` and write ``report.json``.

    Cases for the same SUT always run one after another, since they share the
    target's state; ``parallel`` only spreads distinct SUTs over workers.
    """
    cases = load_campaign(campaign)
    client = AxeClient(axe_url)
    t0 = time.monotonic()
    try:
        client.ping()
        groups: dict[str, list[testgen.ExecutableTestCase]] = {}
        for tc in cases:
            groups.setdefault(tc.sut_id, []).append(tc)
        cfg: dict[str, str] = {}
        for sut_id in groups:
            cfg.update(service_config(catalog.sut(sut_id), sim_bt, sim_can))
        client.put_config(cfg)

        def run_group(group: list[testgen.ExecutableTestCase]) -> list[dict[str, Any]]:
            return [run_case(client, tc, sim_can, reset_bt=sim_bt) for tc in group]

        with ThreadPoolExecutor(max_workers=max(1, parallel)) as pool:
            batches = list(pool.map(run_group, groups.values()))
        results = {e["id"]: e for batch in batches for e in batch}
    finally:
        client.close()
    entries = [results[tc.id] for tc in cases]
    insecure = sum(e["verdict"]["aggregate"] == "INSECURE" for e in entries)
    report = {
        "campaignId": campaign.resolve().name,
        "testCases": entries,
        "summary": {"total": len(entries), "insecure": insecure, "secure": len(entries) - insecure},
        "timings": {"wall_s": round(time.monotonic() - t0, 3)},
        "toolVersions": {"aact": __version__, "python": platform.python_version(),
                         "httpx": httpx.__version__},
    }
    write_atomic(campaign / "report.json", dumps(report))
    return report


def export_mutants(m: StateMachine, out: Path) -> list[dict[str, Any]]:
    """Write every mutant as an FSM file and return the summary rows."""
    rows = []
    for mu in model.enumerate_mutants(m):
        trace = model.distinguishing_test(m, mu)
        path = out / f"{mu.name}.fsm"
        write_atomic(path, format_fsm(mu.machine))
        rows.append({"name": mu.name, "operator": mu.operator, "locus": list(mu.locus),
                     "change": [c if c is not None else "-" for c in mu.change],
                     "equivalent": trace is None, "trace": trace,
                     "distance": _finite(model.interface_distance(m, mu.locus)),
                     "file": path.name})
    return rows


def _finite(x: float) -> float | None:
    return None if x == model.UNREACHABLE else x


_SAFE_ID = re.compile(r"[^A-Za-z0-9_.\-]+")


def safe_name(text: str) -> str:
    return _SAFE_ID.sub("_", text)
