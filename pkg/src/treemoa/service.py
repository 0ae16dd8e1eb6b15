"""HTTP service harness for the two engine entrypoints.

Routes (JSON bodies; ``t`` is the caller's simulated clock in seconds):

``POST /prefill_only``
    request ``{"agent": "2.1", "start": 0, "tokens": [..], "t": 0.0}``;
    response ``{"agent", "start", "end_token", "begin", "end"}``. Prefills
    ``tokens`` into the agent's KV at offset ``start`` without decoding.
``POST /generate``
    request ``{"agent", "tokens", "output_len", "t"}``; response
    ``{"agent", "prompt_len", "reused", "prefill", "decode_start",
    "decode_end", "output_tokens"}``. Prefills whatever part of the prompt is
    not resident, hands off the KV and decodes.
``POST /release``
    request ``{"agent", "upto"}``; response ``{"agent", "released"}``. Drops
    KV past token ``upto``.

Contiguity violations and prompt mismatches answer 409; unknown agents 404.
Install with the ``service`` extra (FastAPI).
"""

from __future__ import annotations

from typing import Any, Mapping, Sequence

import httpx
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from treemoa.pdsim import AgentEngine, EngineSpec, SimError, mock_decode
from treemoa.topology import AgentId


class PrefillRequest(BaseModel):
    agent: str
    start: int = Field(ge=0)
    tokens: list[int]
    t: float = 0.0


class GenerateRequest(BaseModel):
    agent: str
    tokens: list[int]
    output_len: int = Field(ge=0)
    t: float = 0.0


class ReleaseRequest(BaseModel):
    agent: str
    upto: int = Field(ge=0)


class EnginePool:
    """Engines keyed by agent id; unknown agents get ``default`` if given."""

    def __init__(self, engines: Mapping[str, EngineSpec] | None = None, default: EngineSpec | None = None,
                 seed: int = 0, colocated: bool = False) -> None:
        self.specs = dict(engines or {})
        self.default = default
        self.seed = seed
        self.colocated = colocated
        self.engines: dict[str, AgentEngine] = {}

    def get(self, agent: str) -> AgentEngine:
        key = str(AgentId.parse(agent))
        if key not in self.engines:
            spec = self.specs.get(key, self.default)
            if spec is None:
                raise KeyError(key)
            self.engines[key] = AgentEngine(spec, colocated=self.colocated)
        return self.engines[key]


def create_app(pool: EnginePool | None = None) -> FastAPI:
    pool = pool or EnginePool(default=EngineSpec(2000.0, 65.0))
    app = FastAPI(title="treemoa engine harness")
    app.state.pool = pool

    def engine(agent: str) -> AgentEngine:
        try:
            return pool.get(agent)
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from exc
        except KeyError as exc:
            raise HTTPException(404, f"unknown agent {agent}") from exc

    @app.post("/prefill_only")
    def prefill_only(req: PrefillRequest) -> dict[str, Any]:
        eng = engine(req.agent)
        try:
            begin, end = eng.submit_prefill_only(req.t, req.start, req.tokens)
        except SimError as exc:
            raise HTTPException(409, str(exc)) from exc
        return {"agent": req.agent, "start": req.start, "end_token": req.start + len(req.tokens),
                "begin": begin, "end": end}

    @app.post("/generate")
    def generate(req: GenerateRequest) -> dict[str, Any]:
        eng = engine(req.agent)
        reused = eng.kv.end
        try:
            timing = eng.submit_generate(req.t, req.tokens, req.output_len)
        except SimError as exc:
            raise HTTPException(409, str(exc)) from exc
        out = mock_decode(pool.seed, AgentId.parse(req.agent), req.tokens, req.output_len)
        return {"agent": req.agent, "prompt_len": len(req.tokens), "reused": reused,
                "prefill": [list(iv) for iv in timing.prefill], "decode_start": timing.decode_start,
                "decode_end": timing.decode_end, "output_tokens": out}

    @app.post("/release")
    def release(req: ReleaseRequest) -> dict[str, Any]:
        eng = engine(req.agent)
        try:
            n = eng.kv.truncate(req.upto)
        except SimError as exc:
            raise HTTPException(409, str(exc)) from exc
        return {"agent": req.agent, "released": n}

    return app


class HttpBackend:
    """Router backend that forwards calls to the service routes.

    Responses are kept in ``responses`` in call order; the caller's clock is
    sent with every request.
    """

    supports_prefill_only = True

    def __init__(self, client: httpx.Client, output_len: Mapping[str, int] | None = None,
                 clock: Any = lambda: 0.0) -> None:
        self.client = client
        self.output_len = dict(output_len or {})
        self.clock = clock
        self.responses: list[dict[str, Any]] = []

    def _post(self, route: str, body: dict[str, Any]) -> dict[str, Any]:
        r = self.client.post(route, json=body)
        if r.status_code != 200:
            raise SimError(f"{route} failed with {r.status_code}: {r.text}")
        data = r.json()
        self.responses.append({"route": route, **data})
        return data

    def prefill_only(self, agent: AgentId, start: int, tokens: Sequence[int]) -> None:
        self._post("/prefill_only", {"agent": str(agent), "start": start, "tokens": list(tokens), "t": self.clock()})

    def generate(self, agent: AgentId, tokens: Sequence[int]) -> None:
        self._post("/generate", {"agent": str(agent), "tokens": list(tokens),
                                 "output_len": self.output_len.get(str(agent), 0), "t": self.clock()})

    def release(self, agent: AgentId, upto: int) -> None:
        self._post("/release", {"agent": str(agent), "upto": upto})
