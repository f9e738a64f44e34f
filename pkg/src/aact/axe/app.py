"""HTTP front end of the execution engine."""

from __future__ import annotations

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .engine import Engine, InvalidConfigName, UnknownTool
from .schemas import ConfigOut, ExecutionOut, SessionOut, SubmitResponse, TestCaseIn


def create_app(engine: Engine | None = None) -> FastAPI:
    engine = engine or Engine()
    app = FastAPI(title="aact execution engine", version="0.1.0")
    app.state.engine = engine

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError) -> JSONResponse:
        return JSONResponse(status_code=400, content={"detail": jsonable(exc.errors())})

    @app.post("/api/v1/testcases", status_code=202, response_model=SubmitResponse)
    def submit(body: TestCaseIn) -> SubmitResponse:
        try:
            eid = engine.submit(body.to_testcase())
        except UnknownTool as exc:
            raise HTTPException(422, detail=str(exc)) from exc
        return SubmitResponse(executionId=eid)

    @app.get("/api/v1/executions/{execution_id}", response_model=ExecutionOut)
    def get_execution(execution_id: str) -> dict:
        try:
            return engine.get(execution_id)
        except KeyError:
            raise HTTPException(404, detail=f"unknown execution {execution_id}") from None

    @app.put("/api/v1/config", response_model=ConfigOut)
    def put_config(entries: dict[str, str]) -> ConfigOut:
        try:
            engine.put_config(entries)
        except InvalidConfigName as exc:
            raise HTTPException(400, detail=str(exc)) from exc
        return ConfigOut(config=engine.config())

    @app.get("/api/v1/sessions", response_model=list[SessionOut])
    def sessions() -> list[dict]:
        return engine.sessions()

    return app


def jsonable(errors: list) -> list:
    # ctx may hold exception objects that JSON cannot carry
    out = []
    for e in errors:
        e = dict(e)
        if "ctx" in e:
            e["ctx"] = {k: str(v) for k, v in e["ctx"].items()}
        e.pop("input", None)
        out.append(e)
    return out


def serve(host: str = "127.0.0.1", port: int = 8080, config: dict[str, str] | None = None,
          certfile: str | None = None, keyfile: str | None = None) -> None:
    import uvicorn

    uvicorn.run(create_app(Engine(config=config)), host=host, port=port,
                ssl_certfile=certfile, ssl_keyfile=keyfile, log_level="info")
