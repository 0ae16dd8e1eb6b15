"""Run whole mixture-of-agents queries over a topology on the simulator.

A query fans out to every leaf. Whenever an agent inside an exit scope (its
cluster by default) finishes, the scope's quality score is updated and, if
members are still running, an exit is drawn; an exit cancels the unfinished
members after the scoring cost has elapsed. Dependent agents are driven by
shell routers, so successors see only surviving outputs.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np

from treemoa.embedding import ProviderSpec
from treemoa.metricq import DEFAULT_TAU, MetricQState, decide_exit
from treemoa.pdsim import (
    DEFAULT_CHUNK_SIZE,
    SCHEDULE_MODES,
    Controller,
    EngineSpec,
    Scenario,
    SimAgentSpec,
    Simulator,
    synthetic_tokens,
)
from treemoa.presets import PRESETS, preset
from treemoa.prompt import PromptTemplate, SlotSpec
from treemoa.topology import AgentId, AgentProfile, OutputLenDist, Topology, topology_from_dict
from treemoa.trace import RunTrace

log = logging.getLogger(__name__)

ACCURACY_MARKER = "n/a (needs real LLM inference)"
SETTINGS = ("all-to-all", "tree-only", "tree+overlap", "full")


class ConfigError(ValueError):
    pass


@dataclass
class QuerySpec:
    """Synthetic query shape, in tokens."""

    prompt_len: OutputLenDist = field(default_factory=lambda: OutputLenDist("uniform", min=128, max=1024))
    aggregator_prefix_len: int = 64
    suffix_len: int = 32
    separator_len: int = 0

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "QuerySpec":
        return cls(
            prompt_len=OutputLenDist.from_dict(d.get("prompt_len", {"kind": "uniform", "min": 128, "max": 1024})),
            aggregator_prefix_len=int(d.get("aggregator_prefix_len", 64)),
            suffix_len=int(d.get("suffix_len", 32)),
            separator_len=int(d.get("separator_len", 0)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {"prompt_len": self.prompt_len.to_dict(), "aggregator_prefix_len": self.aggregator_prefix_len,
                "suffix_len": self.suffix_len, "separator_len": self.separator_len}


@dataclass
class RunConfig:
    topology: str | dict[str, Any] = "tree-9-3-1"
    early_exit: bool = False
    overlap: bool = False
    mode: str | None = None
    tau: float = DEFAULT_TAU
    chunk_size: int = DEFAULT_CHUNK_SIZE
    seed: int = 0
    repetitions: int = 1
    ee_scope: str = "cluster"
    ee_cost: float | None = None
    ee_cost_fraction: float = 0.05
    ee_force_q: float | None = None
    ee_include_diagonal: bool = True
    slot_order: str = "position"
    prefill_startup_overhead: float = 0.02
    kv_transfer: float = 0.0002
    kv_block_size: int = 16
    query: QuerySpec = field(default_factory=QuerySpec)
    embedding: ProviderSpec = field(default_factory=ProviderSpec)
    models: dict[str, AgentProfile] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.mode is not None and self.mode not in SCHEDULE_MODES:
            raise ConfigError(f"mode: unknown schedule mode {self.mode!r}")
        if not 0 < self.tau <= 1:
            raise ConfigError(f"tau: must lie in (0, 1], got {self.tau}")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size: must be >= 1")
        if self.repetitions < 1:
            raise ConfigError("repetitions: must be >= 1")
        if self.ee_scope not in ("cluster", "layer"):
            raise ConfigError(f"ee_scope: expected 'cluster' or 'layer', got {self.ee_scope!r}")
        if self.ee_force_q is not None and not 0 <= self.ee_force_q <= 1:
            raise ConfigError("ee_force_q: must lie in [0, 1]")
        if self.slot_order not in ("position", "reverse"):
            raise ConfigError(f"slot_order: expected 'position' or 'reverse', got {self.slot_order!r}")
        if isinstance(self.topology, str) and self.topology not in PRESETS:
            raise ConfigError(f"topology: unknown preset {self.topology!r}")
        if self.mode is not None and self.overlap and self.mode != "incremental-overlap":
            raise ConfigError("overlap is on but mode names a non-overlapping schedule")

    @property
    def schedule_mode(self) -> str:
        if self.mode is not None:
            return self.mode
        return "incremental-overlap" if self.overlap else "sequential-PD"

    def build_topology(self) -> Topology:
        if isinstance(self.topology, str):
            return preset(self.topology, self.models)
        from treemoa.presets import DEFAULT_MODELS

        return topology_from_dict(self.topology, {**DEFAULT_MODELS, **self.models})

    def engine_for(self, profile: AgentProfile) -> EngineSpec:
        return EngineSpec(profile.prefill_rate, profile.decode_rate, self.prefill_startup_overhead,
                          self.kv_transfer, self.kv_block_size)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown config field")
        if "query" in d:
            d["query"] = QuerySpec.from_dict(d["query"])
        if "embedding" in d:
            d["embedding"] = ProviderSpec.from_dict(d["embedding"])
        if "models" in d:
            d["models"] = {k: AgentProfile.from_dict(v, model_tag=k) for k, v in d["models"].items()}
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        return {
            "topology": self.topology, "early_exit": self.early_exit, "overlap": self.overlap, "mode": self.mode,
            "tau": self.tau, "chunk_size": self.chunk_size, "seed": self.seed, "repetitions": self.repetitions,
            "ee_scope": self.ee_scope, "ee_cost": self.ee_cost, "ee_cost_fraction": self.ee_cost_fraction,
            "ee_force_q": self.ee_force_q, "ee_include_diagonal": self.ee_include_diagonal,
            "slot_order": self.slot_order, "prefill_startup_overhead": self.prefill_startup_overhead,
            "kv_transfer": self.kv_transfer, "kv_block_size": self.kv_block_size,
            "query": self.query.to_dict(), "embedding": self.embedding.to_dict(),
            "models": {k: v.to_dict() for k, v in self.models.items()},
        }


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


_LEN, _LOGPROB, _QUERY, _EXIT, _SCENARIO = range(5)


@dataclass
class Query:
    """A synthetic query instance: token ids plus per-agent draws."""

    sample: int
    tokens: list[int]
    output_lens: dict[AgentId, int]
    logprobs: dict[AgentId, list[float]]


def make_query(config: RunConfig, topology: Topology, sample: int = 0) -> Query:
    """Draw everything random about one query from per-agent streams, so the
    draws do not depend on the schedule or on which other agents exist."""
    qlen = config.query.prompt_len.sample(_rng(config.seed, _QUERY, sample))
    tokens = synthetic_tokens(config.seed, f"query|{sample}", qlen)
    lens, lps = {}, {}
    for a in topology.agents():
        prof = topology.profile(a)
        n = prof.output_len.sample(_rng(config.seed, _LEN, sample, a.layer, a.position))
        lens[a] = n
        raw = _rng(config.seed, _LOGPROB, sample, a.layer, a.position).normal(
            prof.logprob_mean, prof.logprob_std, size=max(1, n))
        lps[a] = np.minimum(raw, 0.0).tolist()
    return Query(sample, tokens, lens, lps)


def build_scenario(config: RunConfig, topology: Topology, query: Query) -> Scenario:
    seed = int(np.random.SeedSequence(config.seed, spawn_key=(_SCENARIO, query.sample)).generate_state(1)[0])
    agents = []
    for a in topology.agents():
        prof = topology.profile(a)
        preds = list(topology.precursors.get(a, ()))
        if config.slot_order == "reverse":
            preds.reverse()
        if preds:
            prefix = synthetic_tokens(seed, f"instr|{a}", config.query.aggregator_prefix_len) + query.tokens
            suffix = synthetic_tokens(seed, f"suffix|{a}", config.query.suffix_len)
            slots = tuple(
                SlotSpec(p, tuple(synthetic_tokens(seed, f"sep|{a}|{p}", config.query.separator_len)))
                for p in preds
            )
        else:
            prefix, suffix, slots = list(query.tokens), [], ()
        agents.append(SimAgentSpec(
            agent=a,
            engine=config.engine_for(prof),
            template=PromptTemplate(tuple(prefix), slots, tuple(suffix)),
            output_len=query.output_lens[a],
            model_tag=prof.model_tag,
        ))
    return Scenario(agents=agents, chunk_size=config.chunk_size, seed=seed)


def default_ee_cost(config: RunConfig, topology: Topology) -> float:
    """Scoring cost per evaluation: a fraction of the fastest leaf's expected runtime.

    With early exit the leaf layer is typically gated by its first finisher.
    """
    qlen = config.query.prompt_len.mean()
    fastest = min(
        topology.profile(a).runtime(int(qlen), int(topology.profile(a).output_len.mean()))
        for a in topology.layer(1)
    )
    return config.ee_cost_fraction * fastest


@dataclass
class _Scope:
    key: str
    members: tuple[AgentId, ...]
    state: MetricQState
    rng: np.random.Generator
    resolved: bool = False


class EarlyExitController(Controller):
    def __init__(self, config: RunConfig, topology: Topology, query: Query, provider: Any, cost: float) -> None:
        self.config = config
        self.topology = topology
        self.query = query
        self.provider = provider
        self.cost = cost
        self.scopes: dict[AgentId, _Scope] = {}
        for layer in range(1, topology.depth):
            groups = ([topology.layer(layer)] if config.ee_scope == "layer"
                      else _unique(topology.cluster_of(a) for a in topology.layer(layer)))
            for idx, members in enumerate(groups):
                scope = _Scope(
                    key=f"L{layer}.S{idx}",
                    members=tuple(members),
                    state=MetricQState(provider, config.tau, config.ee_include_diagonal),
                    rng=_rng(config.seed, _EXIT, query.sample, layer, idx),
                )
                for m in members:
                    self.scopes[m] = scope

    def on_decoded(self, sim: Simulator, agent: AgentId) -> None:
        scope = self.scopes.get(agent)
        if scope is None or scope.resolved:
            return
        try:
            score = scope.state.add(str(agent), sim.outputs[agent] or [0], self.query.logprobs[agent])
        except Exception as exc:  # provider failure: never exit on a score we could not compute
            log.warning("quality scoring failed for %s (%s); not exiting", agent, exc)
            sim.log("ee-error", agent, error=str(exc))
            return
        sim.records[agent].quality.append(score.to_dict())
        unfinished = [m for m in scope.members if not sim.is_finished(m)]
        if not unfinished:
            scope.resolved = True
            return
        q = score.q if self.config.ee_force_q is None else self.config.ee_force_q
        decision = decide_exit(q, scope.rng, stream=scope.key)
        idx = len(sim.decisions)
        sim.decisions.append({"index": idx, "scope": scope.key, "trigger": str(agent), "t": sim.now,
                              "effective_at": sim.now + self.cost, **decision.to_dict(), "score": score.to_dict()})
        sim.log("ee-eval", agent, decision=idx, q=q, exited=decision.exited)
        if decision.exited:
            sim.schedule(sim.now + self.cost, "ee-exit", None, lambda: self._apply(sim, scope, idx), {"decision": idx},
                         guarded=False)

    def _apply(self, sim: Simulator, scope: _Scope, idx: int) -> None:
        if scope.resolved:
            return
        scope.resolved = True
        for m in scope.members:
            if not sim.is_finished(m):
                sim.cancel(m, {"decision": idx, "scope": scope.key})


def _unique(groups: Any) -> list[tuple[AgentId, ...]]:
    seen: list[tuple[AgentId, ...]] = []
    for g in groups:
        if g not in seen:
            seen.append(g)
    return seen


def critical_chain(trace: RunTrace, topology: Topology) -> list[str]:
    """Agents gating the final answer, leaf first: from the root, repeatedly
    step to the completed precursor whose output was released last."""
    chain = [str(topology.root)]
    agent = topology.root
    while topology.precursors.get(agent):
        done = [p for p in topology.precursors[agent] if trace.agents[str(p)].status == "completed"]
        if not done:
            break
        agent = max(done, key=lambda p: (trace.agents[str(p)].released_at, -p.position))
        chain.append(str(agent))
    return chain[::-1]


def _annotate(trace: RunTrace, topology: Topology, config: RunConfig, ee_cost: float) -> None:
    e2e = trace.e2e
    chain = critical_chain(trace, topology)
    prefill = sum(trace.agents[a].pe_busy for a in chain)
    exposed = sum(trace.agents[a].exposed_prefill or 0.0 for a in chain)
    ee = ee_cost * sum(trace.agents[a].deps_resolved_by_exit for a in chain) if config.early_exit else 0.0
    trace.meta.update({
        "topology": topology.kind,
        "widths": topology.widths,
        "early_exit": config.early_exit,
        "overlap": config.schedule_mode == "incremental-overlap",
        "tau": config.tau,
        "ee_cost": ee_cost if config.early_exit else 0.0,
        "critical_chain": chain,
        "metric_e2e": e2e,
        "metric_prefill_share": prefill / e2e if e2e else 0.0,
        "metric_exposed_prefill": exposed,
        "metric_ee_share": ee / e2e if e2e else 0.0,
    })


def run_query(config: RunConfig, sample: int = 0, topology: Topology | None = None) -> RunTrace:
    topology = topology or config.build_topology()
    query = make_query(config, topology, sample)
    scenario = build_scenario(config, topology, query)
    controller = None
    cost = 0.0
    if config.early_exit:
        cost = config.ee_cost if config.ee_cost is not None else default_ee_cost(config, topology)
        provider = config.embedding.build(default_seed=config.seed)
        controller = EarlyExitController(config, topology, query, provider, cost)
    trace = Simulator(scenario, config.schedule_mode, controller).run()
    trace.seed = config.seed
    trace.meta["sample"] = sample
    _annotate(trace, topology, config, cost)
    return trace


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def setting_config(base: RunConfig, setting: str) -> RunConfig:
    if setting == "all-to-all":
        return replace(base, topology="all-to-all-9-9-1" if isinstance(base.topology, str) else
                       {**base.topology, "kind": "all-to-all"}, overlap=False, early_exit=False, mode=None)
    if setting == "tree-only":
        return replace(base, overlap=False, early_exit=False, mode=None)
    if setting == "tree+overlap":
        return replace(base, overlap=True, early_exit=False, mode=None)
    if setting == "full":
        return replace(base, overlap=True, early_exit=True, mode=None)
    raise ConfigError(f"unknown ablation setting {setting!r}; expected one of {SETTINGS}")


def _pct(values: Sequence[float], q: float) -> float:
    return float(np.percentile(np.asarray(values, dtype=float), q))


@dataclass
class AblationResult:
    settings: list[str]
    per_sample: list[dict[str, Any]]
    summary: list[dict[str, Any]]

    def per_sample_csv(self) -> str:
        return _table_csv(self.per_sample)

    def summary_csv(self) -> str:
        return _table_csv(self.summary)


def _table_csv(rows: list[dict[str, Any]]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(rows[0])
    w.writerow(cols)
    for r in rows:
        w.writerow([_cell(r[c]) for c in cols])
    return buf.getvalue()


def _cell(v: Any) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, dict):
        return ";".join(f"{k}={v[k]:.4f}" for k in sorted(v))
    return str(v)


def run_ablation(base: RunConfig, settings: Sequence[str] = SETTINGS, samples: int | None = None) -> AblationResult:
    """E2E latency per setting, normalised per sample to the all-to-all baseline
    (or to the first setting when the baseline is not in the grid)."""
    samples = samples or base.repetitions
    settings = list(settings)
    cfgs = {s: setting_config(base, s) for s in settings}
    topos = {s: c.build_topology() for s, c in cfgs.items()}
    ref = "all-to-all" if "all-to-all" in settings else settings[0]
    raw: dict[str, list[RunTrace]] = {s: [] for s in settings}
    per_sample = []
    for k in range(samples):
        row: dict[str, Any] = {"sample": k}
        for s in settings:
            raw[s].append(run_query(cfgs[s], k, topos[s]))
        base_e2e = raw[ref][k].e2e
        for s in settings:
            row[s] = raw[s][k].e2e / base_e2e
        per_sample.append(row)
    summary = []
    for s in settings:
        norm = [r[s] for r in per_sample]
        traces = raw[s]
        act: dict[str, list[float]] = {}
        for t in traces:
            for tag, v in t.activation().items():
                act.setdefault(tag, []).append(v)
        summary.append({
            "setting": s,
            "normalized_mean": float(np.mean(norm)),
            "normalized_p50": _pct(norm, 50),
            "normalized_p90": _pct(norm, 90),
            "reduction_mean": 1.0 - float(np.mean(norm)),
            "e2e_mean": float(np.mean([t.e2e for t in traces])),
            "prefill_share": float(np.mean([t.meta["metric_prefill_share"] for t in traces])),
            "ee_share": float(np.mean([t.meta["metric_ee_share"] for t in traces])),
            "activation": {tag: float(np.mean(v)) for tag, v in act.items()},
            "accuracy": ACCURACY_MARKER,
        })
    return AblationResult(settings, per_sample, summary)


@dataclass
class SecondLayerStudy:
    """Second-layer aggregator latency under the four schedule modes.

    Leaves get random-token inputs of uniformly distributed length and every
    agent emits a fixed number of tokens; early exit is off. The study is
    repeated for each value in ``fixed_tokens``.
    """

    prompt_len: OutputLenDist = field(default_factory=lambda: OutputLenDist("uniform", min=1, max=2048))
    fixed_tokens: tuple[int, ...] = (8, 16, 32, 64, 128)
    samples: int = 20


def run_second_layer_study(base: RunConfig, study: SecondLayerStudy | None = None) -> AblationResult:
    """Mean layer-2 completion time per mode, normalised per sample to sequential PD."""
    study = study or SecondLayerStudy()
    base_topo = base.build_topology()
    tags = {base_topo.profile(a).model_tag: base_topo.profile(a) for a in base_topo.agents()}
    per_sample: list[dict[str, Any]] = []
    summary: list[dict[str, Any]] = []
    for ft in study.fixed_tokens:
        fixed = OutputLenDist("fixed", value=ft)
        models = {tag: replace(p, output_len=fixed) for tag, p in tags.items()}
        cfg = replace(base, early_exit=False, overlap=False, mode=None, models={**base.models, **models},
                      query=replace(base.query, prompt_len=study.prompt_len))
        topo = cfg.build_topology()
        raw: dict[str, list[float]] = {m: [] for m in SCHEDULE_MODES}
        rows = []
        for k in range(study.samples):
            for m in SCHEDULE_MODES:
                tr = run_query(replace(cfg, mode=m), k, topo)
                raw[m].append(float(np.mean([tr.agents[str(a)].end for a in topo.layer(2)])))
            rows.append({"fixed_tokens": ft, "sample": k,
                         **{m: raw[m][k] / raw["sequential-PD"][k] for m in SCHEDULE_MODES}})
        per_sample.extend(rows)
        for m in SCHEDULE_MODES:
            norm = [r[m] for r in rows]
            summary.append({
                "fixed_tokens": ft,
                "mode": m,
                "normalized_mean": float(np.mean(norm)),
                "reduction_mean": 1.0 - float(np.mean(norm)),
                "reduction_best_sample": 1.0 - float(np.min(norm)),
                "layer2_latency_mean": float(np.mean(raw[m])),
            })
    return AblationResult(list(SCHEDULE_MODES), per_sample, summary)


def max_mean_reduction(study: AblationResult, mode: str = "incremental-overlap") -> float:
    """Largest mean reduction of ``mode`` over the swept output lengths."""
    return max(r["reduction_mean"] for r in study.summary if r["mode"] == mode)
