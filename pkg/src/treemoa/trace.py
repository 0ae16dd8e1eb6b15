"""Run traces: per-agent timing records plus the raw event log.

A trace exports as JSON lines where every line has the fields
``t, kind, agent, payload``. The first line (kind ``run-meta``) carries the
run-level fields and each agent's full record travels in an
``agent-record`` line, so an exported trace re-imports losslessly.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Iterable


@dataclass
class AgentRecord:
    agent: str
    model_tag: str = ""
    layer: int = 1
    prompt_len: int = 0
    output_len: int = 0
    status: str = "pending"  # completed | pruned | pending
    arrival: float = 0.0
    prefill: list[list[float]] = field(default_factory=list)  # [start, end, tokens]
    transfer: list[float] | None = None
    decode: list[float] | None = None
    deps_ready_at: float | None = None
    deps_resolved_by_exit: bool = False
    released_at: float | None = None
    no_inputs: bool = False
    calls: list[dict[str, Any]] = field(default_factory=list)
    prefilled_tokens: int = 0
    reclaimed_tokens: int = 0
    recomputed_tokens: int = 0
    output_tokens: list[int] = field(default_factory=list)
    cancel: dict[str, Any] | None = None
    quality: list[dict[str, Any]] = field(default_factory=list)

    @property
    def prefill_done_at(self) -> float | None:
        return self.prefill[-1][1] if self.prefill else None

    @property
    def decode_start(self) -> float | None:
        return self.decode[0] if self.decode else None

    @property
    def end(self) -> float | None:
        return self.decode[1] if self.decode and self.status == "completed" else None

    @property
    def exposed_prefill(self) -> float | None:
        """Prefill time left on the critical path after the inputs were ready."""
        if self.decode is None or self.deps_ready_at is None:
            return None
        done = self.prefill_done_at if self.prefill_done_at is not None else self.deps_ready_at
        return max(0.0, done - self.deps_ready_at)

    @property
    def pe_busy(self) -> float:
        return sum(e - s for s, e, _ in self.prefill)

    @property
    def de_busy(self) -> float:
        return self.decode[1] - self.decode[0] if self.decode else 0.0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AgentRecord":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class RunTrace:
    mode: str
    seed: int
    agents: dict[str, AgentRecord] = field(default_factory=dict)
    events: list[dict[str, Any]] = field(default_factory=list)
    decisions: list[dict[str, Any]] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def e2e(self) -> float:
        ends = [r.end for r in self.agents.values() if r.end is not None]
        return max(ends) if ends else 0.0

    def completed(self) -> list[AgentRecord]:
        return [r for r in self.agents.values() if r.status == "completed"]

    def activation(self) -> dict[str, float]:
        """Fraction of agents per model tag that ran to completion (not pruned)."""
        total: dict[str, int] = {}
        invoked: dict[str, int] = {}
        for r in self.agents.values():
            total[r.model_tag] = total.get(r.model_tag, 0) + 1
            invoked[r.model_tag] = invoked.get(r.model_tag, 0) + (r.status == "completed")
        return {tag: invoked[tag] / total[tag] for tag in sorted(total)}

    def summary(self) -> dict[str, Any]:
        e2e = self.e2e
        out = {
            "mode": self.mode,
            "seed": self.seed,
            "e2e_latency": e2e,
            "activation": self.activation(),
            "agents_completed": len(self.completed()),
            "agents_pruned": sum(r.status == "pruned" for r in self.agents.values()),
            "exit_decisions": sum(1 for d in self.decisions if d.get("exited")),
            "reclaimed_tokens": sum(r.reclaimed_tokens for r in self.agents.values()),
            "recomputed_tokens": sum(r.recomputed_tokens for r in self.agents.values()),
        }
        out.update({k: v for k, v in self.meta.items() if k.startswith("metric_")})
        return out

    # -- serialisation ----------------------------------------------------

    def to_jsonl(self) -> str:
        lines = [{
            "t": 0.0,
            "kind": "run-meta",
            "agent": None,
            "payload": {"mode": self.mode, "seed": self.seed, "meta": self.meta, "decisions": self.decisions},
        }]
        lines.extend(self.events)
        for key in sorted(self.agents):
            rec = self.agents[key]
            lines.append({"t": rec.end if rec.end is not None else 0.0, "kind": "agent-record",
                          "agent": key, "payload": rec.to_dict()})
        return "".join(json.dumps(line, sort_keys=True) + "\n" for line in lines)

    @classmethod
    def from_jsonl(cls, text: str | Iterable[str]) -> "RunTrace":
        raw = text.splitlines() if isinstance(text, str) else list(text)
        trace: RunTrace | None = None
        events: list[dict[str, Any]] = []
        agents: dict[str, AgentRecord] = {}
        for n, line in enumerate(raw, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                kind = obj["kind"]
            except (ValueError, KeyError) as exc:
                raise ValueError(f"trace line {n}: malformed record ({exc})") from exc
            if kind == "run-meta":
                p = obj["payload"]
                trace = cls(mode=p["mode"], seed=p["seed"], meta=p.get("meta", {}), decisions=p.get("decisions", []))
            elif kind == "agent-record":
                agents[obj["agent"]] = AgentRecord.from_dict(obj["payload"])
            else:
                events.append(obj)
        if trace is None:
            raise ValueError("trace has no run-meta line")
        trace.events = events
        trace.agents = agents
        return trace

    def to_csv(self) -> str:
        cols = ["agent", "model_tag", "layer", "status", "prompt_len", "output_len", "prefill_start",
                "prefill_end", "decode_start", "decode_end", "deps_ready_at", "exposed_prefill",
                "pe_busy_fraction", "de_busy_fraction", "prefill_calls", "reclaimed_tokens"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        e2e = self.e2e or 1.0
        for key in sorted(self.agents):
            r = self.agents[key]
            w.writerow([
                r.agent, r.model_tag, r.layer, r.status, r.prompt_len, r.output_len,
                _fmt(r.prefill[0][0] if r.prefill else None), _fmt(r.prefill_done_at),
                _fmt(r.decode[0] if r.decode else None), _fmt(r.decode[1] if r.decode else None),
                _fmt(r.deps_ready_at), _fmt(r.exposed_prefill),
                _fmt(r.pe_busy / e2e), _fmt(r.de_busy / e2e),
                sum(c["call"] == "prefill_only" for c in r.calls), r.reclaimed_tokens,
            ])
        return buf.getvalue()


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))
