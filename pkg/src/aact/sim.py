"""Simulated ECU driven by an FSM spec.

Two line-oriented TCP ports stand in for Bluetooth and a CAN bus. Protocol
messages become FSM inputs and FSM outputs become protocol effects:

BT port::

    SCAN                      -> TARGET=<id>
    PROBE                     -> VULNERABLE blueborne | SAFE
    EXPLOIT <kind> <id> [..]  -> SESSION <token> | DENIED       (input bt.exploit)
    EXEC <token> <base64>     -> OUT <base64> | ERR no-session   (input sh.exec)
    INPUT <symbol>            -> OUT <base64 output symbol>      (raw stimulus)
    RESET                     -> OK

CAN port: clients send ``SEND <ID>#<HEX>`` and receive ``FRAME <ID>#<HEX>``.
An output ``can.frame:<frame>`` broadcasts that frame to every CAN client.
All state changes run on one event loop, so the machine stays deterministic.
"""

from __future__ import annotations

import asyncio
import base64
import binascii
import itertools
import logging
import secrets
import socket
import threading
from dataclasses import dataclass
from pathlib import Path

from .frames import FrameError, normalize_frame
from .fsm import StateMachine, parse_fsm

log = logging.getLogger(__name__)

EXPLOIT_KINDS = ("blueborne", "overflow")


class SpecError(ValueError):
    pass


class BindError(OSError):
    pass


@dataclass
class SimConfig:
    fsm_spec_path: str | None = None
    bt_port: int = 7301
    can_port: int = 7302
    host: str = "127.0.0.1"
    vulnerable: bool = True
    can_beacon_period_ms: int = 500
    beacon_frame: str = "100#0000000000000000"
    target_id: str = "sim-ecu-01"
    exploit_input: str = "bt.exploit"
    exec_input: str = "sh.exec"

    def __post_init__(self) -> None:
        if self.bt_port == self.can_port and self.bt_port != 0:
            raise ValueError("BT and CAN ports must differ")
        if self.can_beacon_period_ms <= 0:
            raise ValueError("beacon period must be positive")
        self.beacon_frame = normalize_frame(self.beacon_frame)


@dataclass
class SimSession:
    token: str
    live: bool = True


def encode_out(text: str) -> str:
    return "OUT " + base64.b64encode(text.encode("utf-8")).decode("ascii")


def decode_out(line: str) -> str:
    if not line.startswith("OUT "):
        raise ValueError(f"not an OUT line: {line!r}")
    return base64.b64decode(line[4:]).decode("utf-8")


class Simulator:
    def __init__(self, machine: StateMachine, config: SimConfig | None = None):
        self.machine = machine
        self.config = config or SimConfig()
        self.state = machine.initial
        self.sessions: dict[str, SimSession] = {}
        self._tokens = itertools.count(1)
        self._can_clients: set[asyncio.StreamWriter] = set()
        self._servers: list[asyncio.base_events.Server] = []
        self._handlers: set[asyncio.Task] = set()
        self._beacon: asyncio.Task | None = None
        self._loop: asyncio.AbstractEventLoop | None = None
        self._thread: threading.Thread | None = None
        self._stopped: asyncio.Event | None = None
        self.bt_address: tuple[str, int] | None = None
        self.can_address: tuple[str, int] | None = None

    @classmethod
    def from_config(cls, config: SimConfig) -> Simulator:
        if not config.fsm_spec_path:
            raise SpecError("no FSM spec path configured")
        try:
            machine = parse_fsm(Path(config.fsm_spec_path).read_text(encoding="utf-8"))
        except ValueError as exc:
            raise SpecError(str(exc)) from exc
        return cls(machine, config)

    # -- machine -----------------------------------------------------------

    def _fire(self, symbol: str) -> str | None:
        out, self.state = self.machine.step(self.state, symbol)
        if out is not None and out.startswith("can.frame:"):
            try:
                self._broadcast(normalize_frame(out.split(":", 1)[1]))
            except FrameError:
                log.warning("output %r carries an invalid frame", out)
        return out

    def _new_session(self) -> str:
        token = f"s{next(self._tokens)}-{secrets.token_hex(3)}"
        self.sessions[token] = SimSession(token)
        return token

    def _broadcast(self, frame: str, sender: asyncio.StreamWriter | None = None) -> None:
        line = f"FRAME {frame}\n".encode()
        for w in list(self._can_clients):
            if w is sender:
                continue
            if w.is_closing():
                self._can_clients.discard(w)
                continue
            w.write(line)

    def handle_bt(self, line: str) -> str:
        """Process one BT-port line and return the reply (without newline)."""
        parts = line.strip().split()
        if not parts:
            return "ERR unknown-command"
        cmd, args = parts[0].upper(), parts[1:]
        cfg = self.config
        if cmd == "SCAN" and not args:
            return f"TARGET={cfg.target_id}"
        if cmd == "PROBE" and not args:
            return "VULNERABLE blueborne" if cfg.vulnerable else "SAFE"
        if cmd == "EXPLOIT" and len(args) >= 2:
            kind, target = args[0].lower(), args[1]
            if kind not in EXPLOIT_KINDS:
                return "ERR unknown-exploit"
            if target != cfg.target_id or not cfg.vulnerable:
                return "DENIED"
            out = self._fire(cfg.exploit_input)
            if out is None:
                return "DENIED"
            return f"SESSION {self._new_session()}"
        if cmd == "EXEC" and len(args) == 2:
            session = self.sessions.get(args[0])
            if session is None or not session.live:
                return "ERR no-session"
            try:
                base64.b64decode(args[1], validate=True)
            except (binascii.Error, ValueError):
                return "ERR bad-command"
            return encode_out(self._fire(cfg.exec_input) or "")
        if cmd == "INPUT" and len(args) == 1:
            return encode_out(self._fire(args[0]) or "")
        if cmd == "RESET" and not args:
            self.state = self.machine.initial
            for s in self.sessions.values():
                s.live = False
            return "OK"
        return "ERR unknown-command"

    def handle_can(self, line: str, sender: asyncio.StreamWriter | None) -> str | None:
        parts = line.strip().split()
        if len(parts) != 2 or parts[0].upper() != "SEND":
            return "ERR unknown-command"
        try:
            frame = normalize_frame(parts[1])
        except FrameError:
            return "ERR bad-frame"
        self._broadcast(frame, sender)
        symbol = f"can.frame:{frame}"
        if symbol in self.machine.inputs:
            self._fire(symbol)
        return None

    # -- networking --------------------------------------------------------

    async def _serve_bt(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self._track()
        try:
            while True:
                raw = await reader.readline()
                if not raw:
                    break
                reply = self.handle_bt(raw.decode("utf-8", errors="replace"))
                writer.write((reply + "\n").encode())
                await writer.drain()
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            writer.close()

    async def _serve_can(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self._track()
        self._can_clients.add(writer)
        try:
            while True:
                raw = await reader.readline()
                if not raw:
                    break
                reply = self.handle_can(raw.decode("utf-8", errors="replace"), writer)
                if reply is not None:
                    writer.write((reply + "\n").encode())
                await writer.drain()
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            self._can_clients.discard(writer)
            writer.close()

    def _track(self) -> None:
        task = asyncio.current_task()
        if task is not None:
            self._handlers.add(task)
            task.add_done_callback(self._handlers.discard)

    async def _beacon_loop(self) -> None:
        period = self.config.can_beacon_period_ms / 1000
        while True:
            await asyncio.sleep(period)
            self._broadcast(self.config.beacon_frame)

    async def start_async(self) -> None:
        cfg = self.config
        try:
            bt = await asyncio.start_server(self._serve_bt, cfg.host, cfg.bt_port)
            can = await asyncio.start_server(self._serve_can, cfg.host, cfg.can_port)
        except OSError as exc:
            raise BindError(exc.errno, f"cannot bind simulator ports: {exc}") from exc
        self._servers = [bt, can]
        self.bt_address = bt.sockets[0].getsockname()[:2]
        self.can_address = can.sockets[0].getsockname()[:2]
        self._beacon = asyncio.ensure_future(self._beacon_loop())

    async def close_async(self) -> None:
        if self._beacon:
            self._beacon.cancel()
        for w in list(self._can_clients):
            w.close()
        for s in self._servers:
            s.close()
        handlers = list(self._handlers)
        for task in handlers:
            task.cancel()
        await asyncio.gather(*handlers, return_exceptions=True)
        for s in self._servers:
            await s.wait_closed()

    async def serve_forever(self) -> None:
        await self.start_async()
        self._stopped = asyncio.Event()
        try:
            await self._stopped.wait()
        finally:
            await self.close_async()

    # -- background thread helpers ------------------------------------------

    def start(self) -> Simulator:
        """Run the simulator on a background thread; returns once listening."""
        ready = threading.Event()
        errors: list[BaseException] = []

        def runner() -> None:
            loop = asyncio.new_event_loop()
            self._loop = loop
            asyncio.set_event_loop(loop)
            try:
                loop.run_until_complete(self.start_async())
            except BaseException as exc:  # surfaced to the caller below
                errors.append(exc)
                ready.set()
                loop.close()
                return
            self._stopped = asyncio.Event()
            ready.set()
            try:
                loop.run_until_complete(self._stopped.wait())
                loop.run_until_complete(self.close_async())
            finally:
                loop.close()

        self._thread = threading.Thread(target=runner, name="sim-sut", daemon=True)
        self._thread.start()
        ready.wait()
        if errors:
            raise errors[0]
        return self

    def stop(self) -> None:
        if self._loop is not None and self._stopped is not None and self._thread is not None:
            self._loop.call_soon_threadsafe(self._stopped.set)
            self._thread.join(timeout=5)

    def call(self, fn, *args):
        """Run ``fn(*args)`` on the simulator loop and return its result."""
        assert self._loop is not None
        fut = asyncio.run_coroutine_threadsafe(_acall(fn, *args), self._loop)
        return fut.result(timeout=5)

    def __enter__(self) -> Simulator:
        return self if self._thread is not None else self.start()

    def __exit__(self, *exc: object) -> None:
        self.stop()


async def _acall(fn, *args):
    return fn(*args)


def run_word(bt_address: tuple[str, int], word, timeout: float = 5.0) -> list[str | None]:
    """Reset the simulator, feed ``word`` as raw stimuli, return the outputs."""
    with socket.create_connection(bt_address, timeout=timeout) as sock:
        f = sock.makefile("rwb")

        def ask(line: str) -> str:
            f.write(line.encode() + b"\n")
            f.flush()
            return f.readline().decode().rstrip("\r\n")

        if ask("RESET") != "OK":
            raise ConnectionError("simulator refused RESET")
        outputs = []
        for symbol in word:
            reply = ask(f"INPUT {symbol}")
            text = decode_out(reply)
            outputs.append(text or None)
        return outputs


def run_simulator(config: SimConfig) -> None:
    """Blocking entry point used by the CLI."""
    sim = Simulator.from_config(config)

    async def main() -> None:
        await sim.start_async()
        log.info("sim-sut listening: bt=%s can=%s", sim.bt_address, sim.can_address)
        print(f"sim-sut bt={sim.bt_address[0]}:{sim.bt_address[1]} "
              f"can={sim.can_address[0]}:{sim.can_address[1]}", flush=True)
        try:
            await asyncio.Event().wait()
        finally:
            await sim.close_async()

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
