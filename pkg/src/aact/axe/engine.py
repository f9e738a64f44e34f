"""Attack execution engine: runs test-case steps through tool adapters.

Steps run strictly in order on one worker thread per execution. A step whose
``requires`` names something unbound is OMITTED; everything else either ends
OK or FAILED, and later steps still get their chance.
"""

from __future__ import annotations

import base64
import copy
import itertools
import logging
import re
import secrets
import shlex
import socket
import subprocess
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Protocol, Sequence

from ..oracle import now_ms, parse_address
from ..testgen import CommandStep, ExecutableTestCase
from ..tokens import REFERENCE_RE, is_placeholder

log = logging.getLogger(__name__)

GRACE_S = 2.0
# adapters get half the grace as transport slack so results stay inside the bound
SLACK_S = 1.0
SESSION_LINE_RE = re.compile(r"^SESSION (\S+)\s*$", re.MULTILINE)

OK, OMITTED, FAILED = "OK", "OMITTED", "FAILED"
PENDING, RUNNING, DONE, ERROR = "pending", "running", "done", "error"


class AxeError(Exception):
    pass


class AdapterError(AxeError):
    pass


class UnknownTool(AxeError):
    def __init__(self, tools: Sequence[str]):
        self.tools = list(tools)
        super().__init__("unknown tool adapter(s): " + ", ".join(self.tools))


class UnknownSession(AxeError):
    pass


class UnresolvedPlaceholder(AxeError, KeyError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unresolved placeholder ${{{name}}}")

    __str__ = Exception.__str__


class InvalidConfigName(AxeError, ValueError):
    pass


def resolve_placeholders(params: Sequence[str], bindings: Mapping[str, str],
                         cfg: Mapping[str, str]) -> list[str]:
    """Single-pass textual substitution; bindings shadow the global config."""
    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name in bindings:
            return bindings[name]
        if name in cfg:
            return cfg[name]
        raise UnresolvedPlaceholder(name)
    return [REFERENCE_RE.sub(sub, p) for p in params]


# ---------------------------------------------------------------------------
# sessions and adapters


class ShellTransport(Protocol):
    def execute(self, command: str, timeout: float) -> tuple[str, int]: ...

    def close(self) -> None: ...


@dataclass
class Session:
    session_id: str
    created_by: str
    execution_id: str
    transport: ShellTransport | None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def to_json(self) -> dict[str, Any]:
        return {"sessionId": self.session_id, "createdByStep": self.created_by,
                "executionId": self.execution_id}


@dataclass
class AdapterContext:
    params: list[str]
    config: Mapping[str, str]
    deadline: float
    session: Session | None = None

    def remaining(self) -> float:
        return max(0.05, self.deadline - time.monotonic())


@dataclass
class AdapterResult:
    stdout: str
    exit_code: int = 0
    transport: ShellTransport | None = None


Adapter = Callable[[AdapterContext], AdapterResult]


def resolve_interface(value: str, cfg: Mapping[str, str]) -> tuple[str, int]:
    """``sim:bt`` / ``sim:can`` go through SIM_BT / SIM_CAN; anything else is host:port."""
    if value.startswith("sim:"):
        key = "SIM_" + value[4:].upper()
        if key not in cfg:
            raise AdapterError(f"interface {value} needs {key} in the global config")
        value = cfg[key]
    try:
        return parse_address(value)
    except ValueError as exc:
        raise AdapterError(str(exc)) from exc


def _options(params: Sequence[str]) -> tuple[dict[str, str], list[str]]:
    opts, rest = {}, []
    it = iter(params)
    for p in it:
        if p.startswith("--") and len(p) > 2:
            try:
                opts[p[2:]] = next(it)
            except StopIteration:
                raise AdapterError(f"option {p} needs a value") from None
        else:
            rest.append(p)
    return opts, rest


class LineClient:
    """One request/reply exchange over the simulator's line protocol."""

    def __init__(self, address: tuple[str, int], timeout: float):
        try:
            self.sock = socket.create_connection(address, timeout=timeout)
        except OSError as exc:
            raise AdapterError(f"cannot connect to {address[0]}:{address[1]}: {exc}") from exc
        self.file = self.sock.makefile("rwb")

    def ask(self, line: str, timeout: float) -> str:
        self.sock.settimeout(timeout)
        try:
            self.file.write(line.encode() + b"\n")
            self.file.flush()
            reply = self.file.readline()
        except OSError as exc:
            raise AdapterError(f"transport error: {exc}") from exc
        if not reply:
            raise AdapterError("connection closed by target")
        return reply.decode("utf-8", errors="replace").rstrip("\r\n")

    def close(self) -> None:
        try:
            self.file.close()
            self.sock.close()
        except OSError:
            pass


class SimShell:
    """Shell transport that pipes commands through ``EXEC <token>``."""

    def __init__(self, address: tuple[str, int], token: str):
        self.address = address
        self.token = token

    def execute(self, command: str, timeout: float) -> tuple[str, int]:
        client = LineClient(self.address, timeout)
        try:
            b64 = base64.b64encode(command.encode()).decode("ascii")
            reply = client.ask(f"EXEC {self.token} {b64}", timeout)
        finally:
            client.close()
        if reply.startswith("OUT "):
            return base64.b64decode(reply[4:]).decode("utf-8", errors="replace"), 0
        return reply + "\n", 1

    def close(self) -> None:
        pass


def sim_btscan(ctx: AdapterContext) -> AdapterResult:
    opts, _ = _options(ctx.params)
    address = resolve_interface(opts.get("iface", "sim:bt"), ctx.config)
    client = LineClient(address, ctx.remaining())
    try:
        reply = client.ask("SCAN", ctx.remaining())
    finally:
        client.close()
    return AdapterResult(reply + "\n", 0 if reply.startswith("TARGET=") else 1)


def sim_exploit(ctx: AdapterContext) -> AdapterResult:
    opts, _ = _options(ctx.params)
    address = resolve_interface(opts.get("iface", "sim:bt"), ctx.config)
    kind = opts.get("type", "blueborne").lower()
    target = opts.get("target", "auto")
    client = LineClient(address, ctx.remaining())
    lines = []
    try:
        if target == "auto":
            reply = client.ask("SCAN", ctx.remaining())
            lines.append(reply)
            if not reply.startswith("TARGET="):
                return AdapterResult("\n".join(lines) + "\n", 1)
            target = reply.split("=", 1)[1]
        request = f"EXPLOIT {kind} {target}"
        if opts.get("payload"):
            request += " " + opts["payload"]
        reply = client.ask(request, ctx.remaining())
        lines.append(reply)
    finally:
        client.close()
    m = SESSION_LINE_RE.match(reply)
    if not m:
        return AdapterResult("\n".join(lines) + "\n", 1)
    return AdapterResult("\n".join(lines) + "\n", 0, SimShell(address, m.group(1)))


def sim_install_script(ctx: AdapterContext) -> AdapterResult:
    # the script is staged locally; only its name travels on to later steps
    opts, rest = _options(ctx.params)
    name = opts.get("script") or (rest[-1] if rest else "candos.sh")
    return AdapterResult(f"SCRIPT={name}\n", 0)


def sim_shell_exec(ctx: AdapterContext) -> AdapterResult:
    if ctx.session is None or ctx.session.transport is None:
        raise UnknownSession("sim-shell-exec needs a session environment")
    stdout, code = ctx.session.transport.execute(shlex.join(ctx.params), ctx.remaining())
    return AdapterResult(stdout, code)


def sim_can_send(ctx: AdapterContext) -> AdapterResult:
    opts, rest = _options(ctx.params)
    if len(rest) != 1:
        raise AdapterError("sim-can-send expects exactly one frame")
    address = resolve_interface(opts.get("iface", "sim:can"), ctx.config)
    client = LineClient(address, ctx.remaining())
    try:
        client.file.write(f"SEND {rest[0]}\n".encode())
        client.file.flush()
        # errors come back promptly; silence means the frame went out
        client.sock.settimeout(min(0.2, ctx.remaining()))
        try:
            reply = client.file.readline().decode("utf-8", errors="replace").strip()
        except (TimeoutError, socket.timeout):
            reply = ""
        while reply.startswith("FRAME "):
            try:
                reply = client.file.readline().decode("utf-8", errors="replace").strip()
            except (TimeoutError, socket.timeout):
                reply = ""
    except OSError as exc:
        raise AdapterError(f"transport error: {exc}") from exc
    finally:
        client.close()
    if reply.startswith("ERR"):
        return AdapterResult(reply + "\n", 1)
    return AdapterResult(f"SENT {rest[0]}\n", 0)


def sim_input(ctx: AdapterContext) -> AdapterResult:
    # test-harness port: one abstract FSM input, reply is the output symbol
    opts, rest = _options(ctx.params)
    if len(rest) != 1:
        raise AdapterError("sim-input expects exactly one input symbol")
    address = resolve_interface(opts.get("iface", "sim:bt"), ctx.config)
    client = LineClient(address, ctx.remaining())
    try:
        reply = client.ask(f"INPUT {rest[0]}", ctx.remaining())
    finally:
        client.close()
    if not reply.startswith("OUT "):
        return AdapterResult(reply + "\n", 1)
    out = base64.b64decode(reply[4:]).decode("utf-8", errors="replace")
    return AdapterResult(out + "\n" if out else "", 0)


DEFAULT_ALLOWLIST = ("echo", "printf", "true", "false", "sleep", "cat")


def local_process(allowlist: Sequence[str]) -> Adapter:
    allowed = frozenset(allowlist)

    def run(ctx: AdapterContext) -> AdapterResult:
        if not ctx.params:
            raise AdapterError("local-process needs a program")
        if ctx.params[0] not in allowed:
            raise AdapterError(f"program {ctx.params[0]!r} is not on the allowlist")
        if ctx.session is not None:
            stdout, code = ctx.session.transport.execute(shlex.join(ctx.params), ctx.remaining())
            return AdapterResult(stdout, code)
        try:
            proc = subprocess.run(ctx.params, capture_output=True, text=True,
                                  timeout=max(0.05, ctx.deadline - time.monotonic() - SLACK_S / 2))
        except subprocess.TimeoutExpired as exc:
            out = exc.stdout.decode() if isinstance(exc.stdout, bytes) else (exc.stdout or "")
            return AdapterResult(out, 124)
        except OSError as exc:
            raise AdapterError(str(exc)) from exc
        return AdapterResult(proc.stdout, proc.returncode)

    return run


def default_adapters(allowlist: Sequence[str] = DEFAULT_ALLOWLIST) -> dict[str, Adapter]:
    return {
        "sim-btscan": sim_btscan,
        "sim-exploit": sim_exploit,
        "sim-install-script": sim_install_script,
        "sim-shell-exec": sim_shell_exec,
        "sim-can-send": sim_can_send,
        "sim-input": sim_input,
        "local-process": local_process(allowlist),
    }


# ---------------------------------------------------------------------------
# executions


@dataclass
class StepResult:
    step: str
    status: str
    stdout: str = ""
    exit_code: int = 0
    bound_vars: dict[str, str] = field(default_factory=dict)
    started_at: int = 0
    ended_at: int = 0
    error: str | None = None

    def to_json(self) -> dict[str, Any]:
        out = {"step": self.step, "status": self.status, "stdout": self.stdout,
               "exitCode": self.exit_code, "boundVars": dict(self.bound_vars),
               "startedAt": self.started_at, "endedAt": self.ended_at}
        if self.error:
            out["error"] = self.error
        return out


@dataclass
class Execution:
    execution_id: str
    test_case: ExecutableTestCase
    config: dict[str, str]
    status: str = PENDING
    step_results: list[StepResult] = field(default_factory=list)
    bindings: dict[str, str] = field(default_factory=dict)
    sessions: dict[str, Session] = field(default_factory=dict)
    error: str | None = None
    done: threading.Event = field(default_factory=threading.Event, repr=False)

    def to_json(self) -> dict[str, Any]:
        out = {"executionId": self.execution_id, "status": self.status,
               "testCase": self.test_case.for_axe(),
               "stepResults": [r.to_json() for r in self.step_results],
               "bindings": dict(self.bindings)}
        if self.error:
            out["error"] = self.error
        return out


class Engine:
    def __init__(self, adapters: Mapping[str, Adapter] | None = None,
                 config: Mapping[str, str] | None = None):
        self.adapters = dict(default_adapters() if adapters is None else adapters)
        self._config: dict[str, str] = {}
        self._lock = threading.RLock()
        self._executions: dict[str, Execution] = {}
        self._frozen: dict[str, dict[str, Any]] = {}
        self._ids = itertools.count(1)
        if config:
            self.put_config(config)

    # config ---------------------------------------------------------------

    def put_config(self, entries: Mapping[str, str]) -> None:
        bad = [k for k in entries if not is_placeholder(k)]
        if bad:
            raise InvalidConfigName("invalid config name(s): " + ", ".join(sorted(bad)))
        with self._lock:
            self._config.update({k: str(v) for k, v in entries.items()})

    def config(self) -> dict[str, str]:
        with self._lock:
            return dict(self._config)

    # executions -----------------------------------------------------------

    def submit(self, tc: ExecutableTestCase) -> str:
        unknown = sorted({s.tool for s in tc.steps} - set(self.adapters))
        if unknown:
            raise UnknownTool(unknown)
        tc = copy.deepcopy(tc)
        tc.oracle, tc.origin = [], None
        with self._lock:
            eid = f"ex-{next(self._ids):05d}-{secrets.token_hex(4)}"
            ex = Execution(eid, tc, dict(self._config))
            self._executions[eid] = ex
        threading.Thread(target=self._run, args=(ex,), name=f"axe-{eid}", daemon=True).start()
        return eid

    def get(self, execution_id: str) -> dict[str, Any]:
        with self._lock:
            if execution_id in self._frozen:
                return copy.deepcopy(self._frozen[execution_id])
            ex = self._executions.get(execution_id)
            if ex is None:
                raise KeyError(execution_id)
            snap = ex.to_json()
            if ex.status in (DONE, ERROR):
                self._frozen[execution_id] = snap
            return copy.deepcopy(snap)

    def wait(self, execution_id: str, timeout: float | None = None) -> dict[str, Any]:
        with self._lock:
            ex = self._executions[execution_id]
        ex.done.wait(timeout)
        return self.get(execution_id)

    def sessions(self) -> list[dict[str, Any]]:
        with self._lock:
            return [s.to_json() for ex in self._executions.values() for s in ex.sessions.values()]

    def _run(self, ex: Execution) -> None:
        with self._lock:
            ex.status = RUNNING
        try:
            for step in ex.test_case.steps:
                result = self.execute_step(step, ex)
                with self._lock:
                    ex.step_results.append(result)
                    ex.bindings.update(result.bound_vars)
            with self._lock:
                ex.status = DONE
        except Exception as exc:  # engine bug; keep the service alive
            log.exception("execution %s crashed", ex.execution_id)
            with self._lock:
                ex.status, ex.error = ERROR, str(exc)
        finally:
            ex.done.set()

    def execute_step(self, step: CommandStep, ex: Execution) -> StepResult:
        cfg = ex.config
        with self._lock:
            bindings = dict(ex.bindings)
        started = now_ms()
        if any(name not in bindings and name not in cfg for name in step.requires):
            return StepResult(step.step, OMITTED, started_at=started, ended_at=now_ms())
        t0 = time.monotonic()
        deadline = t0 + step.duration_s + SLACK_S

        def failed(stdout: str, code: int, error: str) -> StepResult:
            return StepResult(step.step, FAILED, stdout, code, {}, started, now_ms(), error)

        try:
            params = resolve_placeholders(step.parameters, bindings, cfg)
        except UnresolvedPlaceholder as exc:
            return failed("", -1, str(exc))
        session = None
        if step.environment != "local":
            if not step.environment.startswith("session:"):
                return failed("", -1, f"unknown environment {step.environment!r}")
            try:
                (sid,) = resolve_placeholders([step.environment[8:]], bindings, cfg)
            except UnresolvedPlaceholder as exc:
                return failed("", -1, f"UnknownSession: {exc}")
            session = ex.sessions.get(sid)
            if session is None:
                return failed("", -1, f"UnknownSession: {sid}")

        ctx = AdapterContext(params, cfg, deadline, session)
        adapter = self.adapters[step.tool]
        try:
            if session is not None:
                with session.lock:
                    res = adapter(ctx)
            else:
                res = adapter(ctx)
        except UnknownSession as exc:
            return failed("", -1, f"UnknownSession: {exc}")
        except (AdapterError, OSError) as exc:
            return failed("", -1, f"AdapterError: {exc}")

        m = SESSION_LINE_RE.search(res.stdout)
        if m and res.exit_code == 0:
            with self._lock:
                ex.sessions[m.group(1)] = Session(m.group(1), step.step, ex.execution_id,
                                                  res.transport)
        if res.exit_code != 0:
            return failed(res.stdout, res.exit_code, "non-zero exit")
        bound = {}
        if step.extract is not None:
            hit = re.search(step.extract.pattern, res.stdout)
            if hit is None:
                return failed(res.stdout, res.exit_code, "extract pattern did not match")
            bound[step.extract.var] = hit.group(step.extract.group)
        return StepResult(step.step, OK, res.stdout, res.exit_code, bound, started, now_ms())
