import json
import socket
import threading
import time
from pathlib import Path

import pytest
import uvicorn

from aact.axe.app import create_app
from aact.axe.engine import Engine
from aact.catalog import load_catalog
from aact.fsm import parse_fsm
from aact.sim import SimConfig, Simulator

DATA = Path(__file__).resolve().parents[1] / "src" / "aact" / "data"


def data_path(name: str) -> Path:
    return DATA / name


def data_text(name: str) -> str:
    return (DATA / name).read_text(encoding="utf-8")


def data_json(name: str):
    return json.loads(data_text(name))


class LiveService:
    """uvicorn on an ephemeral port, in a background thread."""

    def __init__(self, engine: Engine | None = None):
        self.engine = engine or Engine()
        cfg = uvicorn.Config(create_app(self.engine), host="127.0.0.1", port=0,
                             log_level="warning", lifespan="off")
        self.server = uvicorn.Server(cfg)
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    def __enter__(self):
        self.thread.start()
        deadline = time.monotonic() + 10
        while not self.server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("service did not start")
            time.sleep(0.01)
        port = self.server.servers[0].sockets[0].getsockname()[1]
        self.url = f"http://127.0.0.1:{port}"
        return self

    def __exit__(self, *exc):
        self.server.should_exit = True
        self.thread.join(timeout=5)


def start_sim(machine=None, **kw) -> Simulator:
    machine = machine or parse_fsm(data_text("demo.fsm"))
    kw.setdefault("bt_port", 0)
    kw.setdefault("can_port", 0)
    return Simulator(machine, SimConfig(**kw)).start()


def addr(pair) -> str:
    return f"{pair[0]}:{pair[1]}"


@pytest.fixture
def demo_machine():
    return parse_fsm(data_text("demo.fsm"))


@pytest.fixture
def demo_catalog():
    return load_catalog(data_path("catalog.json"))


@pytest.fixture
def sim():
    s = start_sim()
    yield s
    s.stop()


@pytest.fixture
def patched_sim():
    s = start_sim(vulnerable=False)
    yield s
    s.stop()


@pytest.fixture
def service():
    with LiveService() as svc:
        yield svc


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]
