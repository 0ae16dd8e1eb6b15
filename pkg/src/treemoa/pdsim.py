"""Deterministic discrete-event simulation of prefill/decode-disaggregated serving.

Every agent owns one engine pair: a prefill engine (PE) with a KV store and a
decode engine (DE), each a FIFO resource. Costs are linear: a prefill request
of n tokens takes ``startup_overhead + n / prefill_rate``, handing the KV of a
p-token prompt to the DE takes ``kv_transfer * ceil(p / kv_block_size)``, and
decoding emits one token every ``1 / decode_rate`` seconds.

Schedule modes:

``sequential-PD``
    Naive PD disaggregation; a dependent prompt is prefilled only after every
    precursor has finished.
``dp-only``
    Prefill and decode colocated on one replica, so there is no KV hand-off.
``dp-chunked-prefill``
    As ``dp-only`` with the prompt prefilled in ``chunk_size`` pieces on the
    same request (startup overhead charged once).
``incremental-overlap``
    PD disaggregation driven by shell routers that prefill prompt segments as
    precursor tokens stream in.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from treemoa.prompt import PromptTemplate, SlotSpec
from treemoa.router import ShellRouter
from treemoa.topology import AgentId
from treemoa.trace import AgentRecord, RunTrace

SCHEDULE_MODES = ("sequential-PD", "dp-only", "dp-chunked-prefill", "incremental-overlap")
DEFAULT_CHUNK_SIZE = 32


class SimError(RuntimeError):
    pass


class ContiguityError(SimError):
    pass


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class EngineSpec:
    prefill_rate: float
    decode_rate: float
    prefill_startup_overhead: float = 0.0
    kv_transfer: float = 0.0
    kv_block_size: int = 16

    def __post_init__(self) -> None:
        if self.prefill_rate <= 0 or self.decode_rate <= 0:
            raise ScenarioError("engine rates must be > 0")
        if self.prefill_startup_overhead < 0 or self.kv_transfer < 0:
            raise ScenarioError("engine overheads must be >= 0")
        if self.kv_block_size < 1:
            raise ScenarioError("kv_block_size must be >= 1")

    def prefill_time(self, n: int) -> float:
        return self.prefill_startup_overhead + n / self.prefill_rate if n > 0 else 0.0

    def transfer_time(self, prompt_len: int) -> float:
        return self.kv_transfer * math.ceil(prompt_len / self.kv_block_size)

    def to_dict(self) -> dict[str, Any]:
        return {
            "prefill_rate": self.prefill_rate,
            "decode_rate": self.decode_rate,
            "prefill_startup_overhead": self.prefill_startup_overhead,
            "kv_transfer": self.kv_transfer,
            "kv_block_size": self.kv_block_size,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EngineSpec":
        return cls(
            prefill_rate=float(d["prefill_rate"]),
            decode_rate=float(d["decode_rate"]),
            prefill_startup_overhead=float(d.get("prefill_startup_overhead", 0.0)),
            kv_transfer=float(d.get("kv_transfer", 0.0)),
            kv_block_size=int(d.get("kv_block_size", 16)),
        )


class KvStore:
    """Prefilled KV of one request: a contiguous prefix of its prompt."""

    def __init__(self) -> None:
        self.tokens: list[int] = []
        self.blocks: list[tuple[int, int]] = []
        self.computed = 0
        self.reclaimed = 0

    @property
    def end(self) -> int:
        return len(self.tokens)

    def extend(self, start: int, tokens: Sequence[int]) -> None:
        if start != self.end:
            raise ContiguityError(f"prefill range starts at {start} but the KV prefix ends at {self.end}")
        if not tokens:
            return
        self.blocks.append((start, start + len(tokens)))
        self.tokens.extend(tokens)
        self.computed += len(tokens)

    def truncate(self, upto: int) -> int:
        if not 0 <= upto <= self.end:
            raise ContiguityError(f"cannot truncate KV of length {self.end} to {upto}")
        n = self.end - upto
        del self.tokens[upto:]
        kept = []
        for s, e in self.blocks:
            if s < upto:
                kept.append((s, min(e, upto)))
        self.blocks = kept
        self.reclaimed += n
        return n

    def is_prefix_of(self, prompt: Sequence[int]) -> bool:
        return list(prompt[: self.end]) == self.tokens


@dataclass
class GenerateTiming:
    prefill: list[tuple[float, float, int]]
    transfer_start: float
    transfer_end: float
    decode_start: float
    decode_end: float


class AgentEngine:
    """PE/DE pair dedicated to one agent."""

    def __init__(self, spec: EngineSpec, colocated: bool = False, prefill_chunk: int = 0) -> None:
        self.spec = spec
        self.colocated = colocated
        self.prefill_chunk = prefill_chunk
        self.kv = KvStore()
        self.pe_free = 0.0
        self.de_free = 0.0

    def submit_prefill_only(self, now: float, start: int, tokens: Sequence[int]) -> tuple[float, float]:
        """Prefill ``tokens`` at KV offset ``start``; returns (begin, end). No KV hand-off."""
        self.kv.extend(start, tokens)
        if not tokens:
            return now, now
        begin = max(now, self.pe_free)
        end = begin + self.spec.prefill_time(len(tokens))
        self.pe_free = end
        return begin, end

    def submit_generate(self, now: float, prompt: Sequence[int], output_len: int) -> GenerateTiming:
        if not self.kv.is_prefix_of(prompt):
            raise SimError("generate prompt does not extend the resident KV prefix")
        rest = list(prompt[self.kv.end:])
        intervals: list[tuple[float, float, int]] = []
        t = now
        if rest:
            t = max(now, self.pe_free)
            pieces = [rest]
            if self.prefill_chunk > 0:
                pieces = [rest[i:i + self.prefill_chunk] for i in range(0, len(rest), self.prefill_chunk)]
            for i, piece in enumerate(pieces):
                dur = len(piece) / self.spec.prefill_rate + (self.spec.prefill_startup_overhead if i == 0 else 0.0)
                intervals.append((t, t + dur, len(piece)))
                t += dur
            self.kv.extend(self.kv.end, rest)
            self.pe_free = t
        transfer_end = t if self.colocated else t + self.spec.transfer_time(len(prompt))
        ds = max(transfer_end, self.de_free)
        de = ds + output_len / self.spec.decode_rate
        self.de_free = de
        return GenerateTiming(intervals, t, transfer_end, ds, de)


def stream_to_apc(decode_start: float, output_len: int, decode_rate: float,
                  chunk_size: int) -> list[tuple[float, int, int]]:
    """Chunk arrivals as ``(time, token_start, token_end)``.

    One arrival every ``chunk_size`` decoded tokens plus a final (possibly
    partial) chunk at decode end.
    """
    if chunk_size < 1:
        raise SimError("chunk_size must be >= 1")
    out = []
    boundary = chunk_size
    while boundary < output_len:
        out.append((decode_start + boundary / decode_rate, boundary - chunk_size, boundary))
        boundary += chunk_size
    last = boundary - chunk_size
    out.append((decode_start + output_len / decode_rate, last, output_len))
    return out


def synthetic_tokens(seed: int, label: str, n: int, vocab_size: int = 32000) -> list[int]:
    digest = hashlib.blake2b(f"{seed}|{label}".encode(), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return rng.integers(0, vocab_size, size=n).tolist()


def mock_decode(seed: int, agent: AgentId, prompt: Sequence[int], n: int, vocab_size: int = 32000) -> list[int]:
    """Output tokens as a pure function of (seed, agent, prompt), like greedy decoding."""
    h = hashlib.blake2b(digest_size=16)
    h.update(f"{seed}|{agent}|".encode())
    h.update(np.asarray(prompt, dtype="<i8").tobytes())
    return synthetic_tokens(seed, h.hexdigest(), n, vocab_size)


@dataclass
class SimAgentSpec:
    agent: AgentId
    engine: EngineSpec
    template: PromptTemplate
    output_len: int
    model_tag: str = ""
    arrival: float = 0.0

    @property
    def dependencies(self) -> tuple[AgentId, ...]:
        return self.template.precursors


@dataclass
class Scenario:
    agents: list[SimAgentSpec]
    chunk_size: int = DEFAULT_CHUNK_SIZE
    seed: int = 0
    vocab_size: int = 32000
    min_fetch_interval: float = 0.0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.chunk_size < 1:
            raise ScenarioError("chunk_size must be >= 1")
        ids = [a.agent for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ScenarioError("duplicate agent id in scenario")
        known = set(ids)
        for a in self.agents:
            if a.output_len < 0:
                raise ScenarioError(f"agent {a.agent}: output_len must be >= 0")
            for d in a.dependencies:
                if d not in known:
                    raise ScenarioError(f"agent {a.agent} depends on unknown agent {d}")
        try:
            tuple(TopologicalSorter({a.agent: a.dependencies for a in self.agents}).static_order())
        except CycleError as exc:
            raise ScenarioError(f"cyclic dependency: {' -> '.join(map(str, exc.args[1]))}") from exc

    def spec(self, agent: AgentId) -> SimAgentSpec:
        for a in self.agents:
            if a.agent == agent:
                return a
        raise ScenarioError(f"unknown agent {agent}")

    def successors(self) -> dict[AgentId, list[AgentId]]:
        out: dict[AgentId, list[AgentId]] = {a.agent: [] for a in self.agents}
        for a in self.agents:
            for d in a.dependencies:
                out[d].append(a.agent)
        return out

    # -- JSON ----------------------------------------------------------------

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Scenario":
        seed = int(d.get("seed", 0))
        vocab = int(d.get("vocab_size", 32000))
        engines = {k: EngineSpec.from_dict(v) for k, v in (d.get("engines") or {}).items()}
        agents = []
        for i, a in enumerate(d.get("agents", [])):
            try:
                aid = AgentId.parse(a["id"])
                eng = a.get("engine", "default")
                engine = engines[eng] if isinstance(eng, str) else EngineSpec.from_dict(eng)
                prefix = a.get("prefix")
                if prefix is None:
                    prefix = synthetic_tokens(seed, f"prefix|{aid}", int(a.get("prefix_len", 0)), vocab)
                suffix = a.get("suffix")
                if suffix is None:
                    suffix = synthetic_tokens(seed, f"suffix|{aid}", int(a.get("suffix_len", 0)), vocab)
                sep_len = int(a.get("separator_len", 0))
                seps = a.get("separators") or {}
                slots = tuple(
                    SlotSpec(AgentId.parse(p), tuple(seps[p]) if p in seps
                             else tuple(synthetic_tokens(seed, f"sep|{aid}|{p}", sep_len, vocab)))
                    for p in a.get("deps", [])
                )
                agents.append(SimAgentSpec(
                    agent=aid,
                    engine=engine,
                    template=PromptTemplate(tuple(prefix), slots, tuple(suffix)),
                    output_len=int(a["output_len"]),
                    model_tag=a.get("model", ""),
                    arrival=float(a.get("arrival", 0.0)),
                ))
            except KeyError as exc:
                raise ScenarioError(f"agents[{i}]: missing field {exc}") from exc
        return cls(agents=agents, chunk_size=int(d.get("chunk_size", DEFAULT_CHUNK_SIZE)), seed=seed,
                   vocab_size=vocab, min_fetch_interval=float(d.get("min_fetch_interval", 0.0)))

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "chunk_size": self.chunk_size,
            "vocab_size": self.vocab_size,
            "min_fetch_interval": self.min_fetch_interval,
            "agents": [
                {
                    "id": str(a.agent),
                    "model": a.model_tag,
                    "engine": a.engine.to_dict(),
                    "prefix": list(a.template.prefix),
                    "suffix": list(a.template.suffix),
                    "deps": [str(p) for p in a.dependencies],
                    "separators": {str(s.precursor): list(s.separator) for s in a.template.slots},
                    "output_len": a.output_len,
                    "arrival": a.arrival,
                }
                for a in self.agents
            ],
        }


class Controller:
    """Hook for what happens when an agent finishes decoding.

    The default releases the output to successors immediately.
    """

    def on_decoded(self, sim: "Simulator", agent: AgentId) -> None:
        pass


@dataclass(order=True)
class _Event:
    t: float
    rank: int
    seq: int
    kind: str = field(compare=False)
    agent: str | None = field(compare=False)
    fn: Callable[[], None] | None = field(compare=False)
    payload: dict[str, Any] = field(compare=False, default_factory=dict)
    epoch: int = field(compare=False, default=-1)


class Simulator:
    """Single-threaded event loop. At equal times, data events run first,
    then arrivals, then deferred router steps, so a router reacts once to
    everything delivered at that instant. Other ties go by insertion order."""

    supports_prefill_only = True

    def __init__(self, scenario: Scenario, mode: str = "sequential-PD", controller: Controller | None = None,
                 record_events: bool = True) -> None:
        if mode not in SCHEDULE_MODES:
            raise SimError(f"unknown schedule mode {mode!r}; expected one of {SCHEDULE_MODES}")
        self.scenario = scenario
        self.mode = mode
        self.controller = controller or Controller()
        self.record_events = record_events
        self.now = 0.0
        self._queue: list[_Event] = []
        self._seq = 0
        self.events: list[dict[str, Any]] = []
        self.specs = {a.agent: a for a in scenario.agents}
        self.successors = scenario.successors()
        colocated = mode in ("dp-only", "dp-chunked-prefill")
        chunk = scenario.chunk_size if mode == "dp-chunked-prefill" else 0
        self.engines = {a.agent: AgentEngine(a.engine, colocated, chunk) for a in scenario.agents}
        incremental = mode == "incremental-overlap"
        self.routers = {
            a.agent: ShellRouter(a.agent, a.template, self, incremental=incremental, clock=lambda: self.now,
                                 min_fetch_interval=scenario.min_fetch_interval, call_later=self.call_later,
                                 call_soon=self.call_soon)
            for a in scenario.agents
        }
        self.records = {
            a.agent: AgentRecord(agent=str(a.agent), model_tag=a.model_tag, layer=a.agent.layer,
                                 arrival=a.arrival, output_len=a.output_len)
            for a in scenario.agents
        }
        self.outputs: dict[AgentId, list[int]] = {}
        self._epoch = {a.agent: 0 for a in scenario.agents}
        self._resolved: dict[AgentId, set[AgentId]] = {a.agent: set() for a in scenario.agents}
        self.decisions: list[dict[str, Any]] = []

    # -- event plumbing ------------------------------------------------------

    def schedule(self, t: float, kind: str, agent: AgentId | None, fn: Callable[[], None] | None = None,
                 payload: dict[str, Any] | None = None, guarded: bool = True) -> None:
        if t < self.now:
            raise SimError(f"cannot schedule {kind} in the past ({t} < {self.now})")
        epoch = self._epoch[agent] if guarded and agent is not None else -1
        rank = {"arrive": 1, "pump": 2}.get(kind, 0)
        heapq.heappush(self._queue, _Event(t, rank, self._seq, kind, None if agent is None else str(agent), fn,
                                           payload or {}, epoch))
        self._seq += 1

    def call_soon(self, fn: Callable[[], None]) -> None:
        self.schedule(self.now, "pump", None, fn)

    def call_later(self, delay: float, fn: Callable[[], None]) -> None:
        self.schedule(self.now + delay, "wake", None, fn)

    def log(self, kind: str, agent: AgentId | str | None, **payload: Any) -> None:
        if self.record_events:
            self.events.append({"t": self.now, "kind": kind, "agent": None if agent is None else str(agent),
                                "payload": payload})

    def run(self) -> RunTrace:
        for spec in self.scenario.agents:
            self.schedule(spec.arrival, "arrive", spec.agent, self._make_arrival(spec.agent))
        while self._queue:
            ev = heapq.heappop(self._queue)
            if ev.epoch >= 0 and ev.agent is not None and ev.epoch != self._epoch[AgentId.parse(ev.agent)]:
                continue
            self.now = ev.t
            if ev.kind not in ("wake", "pump"):
                self.log(ev.kind, ev.agent, **ev.payload)
            if ev.fn is not None:
                ev.fn()
        return self._finish()

    def _make_arrival(self, agent: AgentId) -> Callable[[], None]:
        def arrive() -> None:
            if not self.specs[agent].dependencies:
                self.records[agent].deps_ready_at = self.now
            self.routers[agent].start()
        return arrive

    # -- backend interface used by the routers ---------------------------------

    def prefill_only(self, agent: AgentId, start: int, tokens: Sequence[int]) -> None:
        eng = self.engines[agent]
        begin, end = eng.submit_prefill_only(self.now, start, tokens)
        rec = self.records[agent]
        self.log("prefill-only", agent, start=start, n=len(tokens))
        if tokens:
            rec.prefill.append([begin, end, len(tokens)])
            self.schedule(begin, "prefill-start", agent, payload={"n": len(tokens)})
        self.schedule(end, "prefill-end", agent, self.routers[agent].on_prefill_done, {"n": len(tokens)})

    def generate(self, agent: AgentId, tokens: Sequence[int]) -> None:
        spec = self.specs[agent]
        eng = self.engines[agent]
        rec = self.records[agent]
        prompt = list(tokens)
        timing = eng.submit_generate(self.now, prompt, spec.output_len)
        rec.prompt_len = len(prompt)
        self.log("generate", agent, n=len(prompt))
        for begin, end, n in timing.prefill:
            rec.prefill.append([begin, end, n])
            self.schedule(begin, "prefill-start", agent, payload={"n": n})
            self.schedule(end, "prefill-end", agent, payload={"n": n})
        rec.transfer = [timing.transfer_start, timing.transfer_end]
        if not eng.colocated:
            self.schedule(timing.transfer_end, "transfer-done", agent)
        rec.decode = [timing.decode_start, timing.decode_end]
        out = mock_decode(self.scenario.seed, agent, prompt, spec.output_len, self.scenario.vocab_size)
        self.outputs[agent] = out
        self.schedule(timing.decode_start, "decode-start", agent)
        arrivals = stream_to_apc(timing.decode_start, spec.output_len, spec.engine.decode_rate,
                                 self.scenario.chunk_size)
        for t, lo, hi in arrivals[:-1]:
            self.schedule(t, "chunk-arrival", agent, self._make_chunk(agent, out[lo:hi]), {"n": hi - lo})
        t, lo, hi = arrivals[-1]
        self.schedule(t, "decode-end", agent, self._make_decode_end(agent, out[lo:hi]), {"n": hi - lo})

    def release(self, agent: AgentId, upto: int) -> None:
        n = self.engines[agent].kv.truncate(upto)
        self.log("kv-reclaim", agent, upto=upto, n=n)

    # -- decode stream ---------------------------------------------------------

    def _deliver(self, agent: AgentId, chunk: Sequence[int], final: bool = False) -> None:
        for s in self.successors[agent]:
            if self.records[s].status != "pruned":
                self.routers[s].on_chunk(agent, chunk, final)

    def _make_chunk(self, agent: AgentId, chunk: Sequence[int]) -> Callable[[], None]:
        return lambda: self._deliver(agent, chunk)

    def _make_decode_end(self, agent: AgentId, chunk: Sequence[int]) -> Callable[[], None]:
        def done() -> None:
            rec = self.records[agent]
            rec.status = "completed"
            rec.output_tokens = list(self.outputs[agent])
            self._deliver(agent, chunk, final=True)
            self.release_output(agent)
            self.controller.on_decoded(self, agent)
        return done

    def release_output(self, agent: AgentId) -> None:
        rec = self.records[agent]
        if rec.released_at is not None:
            return
        rec.released_at = self.now
        for s in self.successors[agent]:
            if self.records[s].status != "pruned":
                self._mark_resolved(s, agent, by_exit=False)
                self.routers[s].on_precursor_done(agent)

    def _mark_resolved(self, agent: AgentId, precursor: AgentId, by_exit: bool) -> None:
        done = self._resolved[agent]
        done.add(precursor)
        if len(done) == len(self.specs[agent].dependencies):
            rec = self.records[agent]
            rec.deps_ready_at = self.now
            rec.deps_resolved_by_exit = by_exit

    # -- cancellation ----------------------------------------------------------

    def is_finished(self, agent: AgentId) -> bool:
        return self.records[agent].status != "pending"

    def cancel(self, agent: AgentId, cause: dict[str, Any] | None = None, cascade: bool = True) -> None:
        rec = self.records[agent]
        if rec.status != "pending":
            return
        rec.status = "pruned"
        rec.cancel = {"t": self.now, **(cause or {})}
        self._epoch[agent] += 1
        self.routers[agent].stop()
        for iv in rec.prefill:
            iv[1] = min(iv[1], max(iv[0], self.now))
        rec.prefill = [iv for iv in rec.prefill if iv[0] < self.now]
        if rec.decode is not None:
            rec.decode[1] = max(rec.decode[0], min(rec.decode[1], self.now))
        self.log("cancel", agent, **(cause or {}))
        for s in self.successors[agent]:
            if self.records[s].status == "pending":
                self._mark_resolved(s, agent, by_exit=True)
                self.routers[s].on_precursor_cancelled(agent)
        if cascade:
            for p in self.specs[agent].dependencies:
                if self.records[p].status == "pending" and all(
                    self.records[s].status == "pruned" for s in self.successors[p]
                ):
                    self.cancel(p, {**(cause or {}), "orphaned_by": str(agent)}, cascade=True)

    # -- results ---------------------------------------------------------------

    def _finish(self) -> RunTrace:
        for agent, rec in self.records.items():
            router = self.routers[agent]
            rec.calls = list(router.calls)
            kv = self.engines[agent].kv
            rec.prefilled_tokens = kv.computed
            rec.reclaimed_tokens = kv.reclaimed
            rec.recomputed_tokens = kv.computed - kv.reclaimed - kv.end
            deps = self.specs[agent].dependencies
            rec.no_inputs = bool(deps) and all(self.records[d].status == "pruned" for d in deps)
            if rec.status == "pending":
                raise SimError(f"agent {agent} never finished (deadlock)")
        trace = RunTrace(
            mode=self.mode,
            seed=self.scenario.seed,
            agents={str(a): self.records[a] for a in sorted(self.records)},
            events=self.events,
            decisions=self.decisions,
        )
        trace.meta["chunk_size"] = self.scenario.chunk_size
        return trace


def run(mode: str, scenario: Scenario, controller: Controller | None = None) -> RunTrace:
    return Simulator(scenario, mode, controller).run()


def load_scenario(path: str) -> tuple[Scenario, str | None]:
    with open(path) as fh:
        data = json.load(fh)
    return Scenario.from_dict(data), data.get("mode")
