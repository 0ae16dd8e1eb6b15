"""Layered agent graphs (hierarchical tree and all-to-all) and their latency laws.

Layers are numbered from 1 (leaves / proposers) to ``depth`` (the single root
aggregator). Every non-leaf agent reads the outputs of a set of precursors in
the layer directly below it. In a tree those precursor sets partition the lower
layer; in the all-to-all baseline every agent reads the whole lower layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Iterable, Mapping, Sequence

import numpy as np


class TopologyError(ValueError):
    """Raised when a topology description is inconsistent."""


@dataclass(frozen=True, order=True)
class AgentId:
    layer: int
    position: int

    def __post_init__(self) -> None:
        if self.layer < 1:
            raise TopologyError(f"agent layer must be >= 1, got {self.layer}")
        if self.position < 0:
            raise TopologyError(f"agent position must be >= 0, got {self.position}")

    def __str__(self) -> str:
        return f"{self.layer}.{self.position}"

    @classmethod
    def parse(cls, text: str | "AgentId") -> "AgentId":
        if isinstance(text, AgentId):
            return text
        try:
            layer, position = str(text).split(".")
            return cls(int(layer), int(position))
        except ValueError as exc:
            raise TopologyError(f"malformed agent id {text!r} (expected 'layer.position')") from exc


@dataclass(frozen=True)
class OutputLenDist:
    """Output length distribution in tokens: fixed, uniform[min, max] or empirical."""

    kind: str = "fixed"
    value: int = 128
    min: int = 1
    max: int = 1
    values: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.kind == "fixed":
            if self.value < 0:
                raise TopologyError("fixed output length must be >= 0")
        elif self.kind == "uniform":
            if not 1 <= self.min <= self.max:
                raise TopologyError(f"uniform output length needs 1 <= min <= max, got [{self.min}, {self.max}]")
        elif self.kind == "empirical":
            if not self.values or any(v < 0 for v in self.values):
                raise TopologyError("empirical output length needs a non-empty list of non-negative values")
        else:
            raise TopologyError(f"unknown output length distribution {self.kind!r}")

    def sample(self, rng: np.random.Generator) -> int:
        if self.kind == "fixed":
            return self.value
        if self.kind == "uniform":
            return int(rng.integers(self.min, self.max + 1))
        return int(self.values[int(rng.integers(len(self.values)))])

    def mean(self) -> float:
        if self.kind == "fixed":
            return float(self.value)
        if self.kind == "uniform":
            return (self.min + self.max) / 2.0
        return float(np.mean(self.values))

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "fixed":
            return {"kind": "fixed", "value": self.value}
        if self.kind == "uniform":
            return {"kind": "uniform", "min": self.min, "max": self.max}
        return {"kind": "empirical", "values": list(self.values)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | int) -> "OutputLenDist":
        if isinstance(data, int):
            return cls("fixed", value=data)
        kind = data.get("kind", "fixed")
        if kind == "fixed":
            return cls("fixed", value=int(data["value"]))
        if kind == "uniform":
            return cls("uniform", min=int(data["min"]), max=int(data["max"]))
        if kind == "empirical":
            return cls("empirical", values=tuple(int(v) for v in data["values"]))
        raise TopologyError(f"unknown output length distribution {kind!r}")


@dataclass(frozen=True)
class AgentProfile:
    """Model backing an agent plus the rates used by the linear latency model.

    ``logprob_mean``/``logprob_std`` parameterise the synthetic token
    log-probabilities used for confidence in simulation mode.
    """

    model_tag: str
    prefill_rate: float
    decode_rate: float
    output_len: OutputLenDist = field(default_factory=OutputLenDist)
    logprob_mean: float = -0.3
    logprob_std: float = 0.3

    def __post_init__(self) -> None:
        if self.prefill_rate <= 0 or self.decode_rate <= 0:
            raise TopologyError(f"profile {self.model_tag!r}: rates must be strictly positive")

    def runtime(self, prompt_tokens: int, output_tokens: int) -> float:
        """Linear per-agent runtime: prompt/prefill_rate + output/decode_rate."""
        return prompt_tokens / self.prefill_rate + output_tokens / self.decode_rate

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_tag": self.model_tag,
            "prefill_rate": self.prefill_rate,
            "decode_rate": self.decode_rate,
            "output_len": self.output_len.to_dict(),
            "logprob_mean": self.logprob_mean,
            "logprob_std": self.logprob_std,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], model_tag: str | None = None) -> "AgentProfile":
        return cls(
            model_tag=data.get("model_tag", model_tag),
            prefill_rate=float(data["prefill_rate"]),
            decode_rate=float(data["decode_rate"]),
            output_len=OutputLenDist.from_dict(data.get("output_len", {"kind": "fixed", "value": 128})),
            logprob_mean=float(data.get("logprob_mean", -0.3)),
            logprob_std=float(data.get("logprob_std", 0.3)),
        )


@dataclass(frozen=True, eq=False)
class Topology:
    """Immutable layered DAG. Use :func:`build_tree` / :func:`build_all_to_all`."""

    kind: str
    layers: tuple[tuple[AgentId, ...], ...]
    precursors: Mapping[AgentId, tuple[AgentId, ...]]
    profiles: Mapping[AgentId, AgentProfile] = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def widths(self) -> list[int]:
        return [len(layer) for layer in self.layers]

    @property
    def root(self) -> AgentId:
        return self.layers[-1][0]

    def agents(self) -> list[AgentId]:
        return [a for layer in self.layers for a in layer]

    def layer(self, index: int) -> tuple[AgentId, ...]:
        return self.layers[index - 1]

    def successors(self, agent: AgentId) -> tuple[AgentId, ...]:
        if agent.layer >= self.depth:
            return ()
        return tuple(a for a in self.layer(agent.layer + 1) if agent in self.precursors[a])

    def clusters(self, layer: int) -> list[tuple[AgentId, ...]]:
        """Precursor sets of the agents in ``layer`` (layer >= 2), in position order."""
        return [self.precursors[a] for a in self.layer(layer)]

    def cluster_of(self, agent: AgentId) -> tuple[AgentId, ...]:
        """Early-exit scope of a non-root agent: the precursor set it belongs to.

        For the all-to-all topology this is the whole layer.
        """
        succ = self.successors(agent)
        if not succ:
            return (agent,)
        return self.precursors[succ[0]]

    def edges(self) -> list[tuple[AgentId, AgentId]]:
        return [(p, a) for a in self.agents() for p in self.precursors.get(a, ())]

    def profile(self, agent: AgentId) -> AgentProfile:
        try:
            return self.profiles[agent]
        except KeyError:
            raise TopologyError(f"no profile for agent {agent}") from None

    def validate(self) -> "Topology":
        if not self.layers:
            raise TopologyError("topology needs at least one layer")
        if len(self.layers[-1]) != 1:
            raise TopologyError(f"layer {self.depth}: top layer must hold exactly one agent")
        seen: set[AgentId] = set()
        for idx, layer in enumerate(self.layers, start=1):
            if not layer:
                raise TopologyError(f"layer {idx}: empty layer")
            for pos, a in enumerate(layer):
                if a != AgentId(idx, pos):
                    raise TopologyError(f"layer {idx}: agent {a} out of place (expected {idx}.{pos})")
                if a in seen:
                    raise TopologyError(f"duplicate agent {a}")
                seen.add(a)
        for a in self.layers[0]:
            if self.precursors.get(a):
                raise TopologyError(f"layer 1: leaf {a} cannot have precursors")
        for idx in range(2, self.depth + 1):
            lower = set(self.layer(idx - 1))
            covered: list[AgentId] = []
            for a in self.layer(idx):
                preds = self.precursors.get(a, ())
                if not preds:
                    raise TopologyError(f"layer {idx}: agent {a} has no precursors")
                if len(set(preds)) != len(preds):
                    raise TopologyError(f"layer {idx}: agent {a} lists a precursor twice")
                bad = [p for p in preds if p not in lower]
                if bad:
                    raise TopologyError(f"layer {idx}: agent {a} reads {bad[0]} outside layer {idx - 1}")
                covered.extend(preds)
            if self.kind == "tree":
                if len(covered) != len(set(covered)) or set(covered) != lower:
                    raise TopologyError(f"layer {idx}: clusters do not partition layer {idx - 1}")
            elif self.kind == "all-to-all":
                for a in self.layer(idx):
                    if set(self.precursors[a]) != lower:
                        raise TopologyError(f"layer {idx}: agent {a} is not connected to all of layer {idx - 1}")
            else:
                raise TopologyError(f"unknown topology kind {self.kind!r}")
        extra = set(self.precursors) - seen
        if extra:
            raise TopologyError(f"precursor map names unknown agent {sorted(extra)[0]}")
        for a in self.profiles:
            if a not in seen:
                raise TopologyError(f"profile given for unknown agent {a}")
        return self

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "depth": self.depth,
            "layers": [[str(a) for a in layer] for layer in self.layers],
            "precursors": {str(a): [str(p) for p in self.precursors[a]] for a in self.agents() if a in self.precursors},
            "profiles": {str(a): self.profiles[a].to_dict() for a in self.agents() if a in self.profiles},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Topology):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.layers == other.layers
            and dict(self.precursors) == dict(other.precursors)
            and dict(self.profiles) == dict(other.profiles)
        )

    __hash__ = None  # type: ignore[assignment]


def _freeze(
    kind: str,
    layers: Sequence[Sequence[AgentId]],
    precursors: Mapping[AgentId, Sequence[AgentId]],
    profiles: Mapping[AgentId, AgentProfile] | None,
) -> Topology:
    topo = Topology(
        kind=kind,
        layers=tuple(tuple(layer) for layer in layers),
        precursors=MappingProxyType({a: tuple(p) for a, p in precursors.items()}),
        profiles=MappingProxyType(dict(profiles or {})),
    )
    return topo.validate()


def _check_widths(widths: Sequence[int]) -> None:
    if not widths:
        raise TopologyError("widths must be non-empty")
    for idx, w in enumerate(widths, start=1):
        if w < 1:
            raise TopologyError(f"layer {idx}: width must be >= 1, got {w}")
    if widths[-1] != 1:
        raise TopologyError(f"layer {len(widths)}: top layer width must be 1, got {widths[-1]}")


def cluster_sizes(widths: Sequence[int], branching: Sequence[int | Sequence[int]]) -> list[list[int]]:
    """Resolve ``branching`` into explicit cluster sizes for layers 2..L.

    An integer entry means equal clusters of that size; a list gives each
    cluster's size in position order.
    """
    _check_widths(widths)
    if len(branching) != len(widths) - 1:
        raise TopologyError(
            f"branching has {len(branching)} entries but {len(widths)} layers need {len(widths) - 1}"
        )
    sizes: list[list[int]] = []
    for idx, spec in enumerate(branching, start=2):
        lower, upper = widths[idx - 2], widths[idx - 1]
        if isinstance(spec, int):
            if spec < 1 or lower != upper * spec:
                raise TopologyError(
                    f"layer {idx}: {upper} clusters of size {spec} cannot partition the {lower} agents of layer {idx - 1}"
                )
            sizes.append([spec] * upper)
        else:
            spec = [int(s) for s in spec]
            if len(spec) != upper or any(s < 1 for s in spec) or sum(spec) != lower:
                raise TopologyError(
                    f"layer {idx}: cluster sizes {spec} must be {upper} positive sizes summing to {lower}"
                )
            sizes.append(spec)
    return sizes


def _assign_profiles(
    widths: Sequence[int],
    layer_profiles: Sequence[Sequence[AgentProfile]] | None,
    overrides: Mapping[AgentId, AgentProfile] | None,
) -> dict[AgentId, AgentProfile]:
    profiles: dict[AgentId, AgentProfile] = {}
    if layer_profiles is not None:
        if len(layer_profiles) != len(widths):
            raise TopologyError(f"need a profile list per layer ({len(widths)}), got {len(layer_profiles)}")
        for idx, (width, cycle) in enumerate(zip(widths, layer_profiles), start=1):
            if not cycle:
                raise TopologyError(f"layer {idx}: empty profile list")
            for pos in range(width):
                profiles[AgentId(idx, pos)] = cycle[pos % len(cycle)]
    for a, p in (overrides or {}).items():
        profiles[AgentId.parse(a)] = p
    return profiles


def build_tree(
    widths: Sequence[int],
    branching: Sequence[int | Sequence[int]],
    layer_profiles: Sequence[Sequence[AgentProfile]] | None = None,
    overrides: Mapping[AgentId, AgentProfile] | None = None,
) -> Topology:
    """Hierarchical tree with clusters formed from contiguous position ranges.

    >>> [len(c) for c in build_tree([9, 3, 1], [3, 3]).clusters(2)]
    [3, 3, 3]
    """
    sizes = cluster_sizes(widths, branching)
    layers = [[AgentId(idx, pos) for pos in range(w)] for idx, w in enumerate(widths, start=1)]
    precursors: dict[AgentId, list[AgentId]] = {}
    for idx, layer_sizes in enumerate(sizes, start=2):
        start = 0
        for pos, size in enumerate(layer_sizes):
            precursors[AgentId(idx, pos)] = layers[idx - 2][start:start + size]
            start += size
    return _freeze("tree", layers, precursors, _assign_profiles(widths, layer_profiles, overrides))


def build_all_to_all(
    widths: Sequence[int],
    layer_profiles: Sequence[Sequence[AgentProfile]] | None = None,
    overrides: Mapping[AgentId, AgentProfile] | None = None,
) -> Topology:
    _check_widths(widths)
    layers = [[AgentId(idx, pos) for pos in range(w)] for idx, w in enumerate(widths, start=1)]
    precursors = {a: list(layers[idx - 2]) for idx in range(2, len(widths) + 1) for a in layers[idx - 1]}
    return _freeze("all-to-all", layers, precursors, _assign_profiles(widths, layer_profiles, overrides))


def topology_from_dict(data: Mapping[str, Any], models: Mapping[str, AgentProfile] | None = None) -> Topology:
    """Load either a config (``widths``/``branching``) or an exported dump (``layers``/``precursors``)."""
    models = dict(models or {})
    for tag, spec in (data.get("models") or {}).items():
        models[tag] = AgentProfile.from_dict(spec, model_tag=tag)
    kind = data.get("kind", "tree")

    def resolve(ref: Any) -> AgentProfile:
        if isinstance(ref, str):
            if ref not in models:
                raise TopologyError(f"unknown model tag {ref!r}")
            return models[ref]
        return AgentProfile.from_dict(ref)

    if "layers" in data:
        layers = [[AgentId.parse(a) for a in layer] for layer in data["layers"]]
        precursors = {
            AgentId.parse(a): [AgentId.parse(p) for p in preds]
            for a, preds in (data.get("precursors") or {}).items()
        }
        profiles = {AgentId.parse(a): resolve(p) for a, p in (data.get("profiles") or {}).items()}
        return _freeze(kind, layers, precursors, profiles)

    widths = [int(w) for w in data["widths"]]
    layer_models = data.get("layer_models")
    layer_profiles = [[resolve(r) for r in refs] for refs in layer_models] if layer_models else None
    overrides = {AgentId.parse(a): resolve(p) for a, p in (data.get("overrides") or {}).items()}
    if kind == "tree":
        return build_tree(widths, data.get("branching", []), layer_profiles, overrides)
    if kind == "all-to-all":
        return build_all_to_all(widths, layer_profiles, overrides)
    raise TopologyError(f"unknown topology kind {kind!r}")


def loads(text: str) -> Topology:
    return topology_from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Latency laws
# ---------------------------------------------------------------------------


def layer_latency_all(times: Sequence[float]) -> float:
    """All-to-all layer latency: the layer is gated by its slowest agent."""
    times = list(times)
    if not times:
        raise ValueError("layer_latency_all needs at least one runtime")
    if any(t < 0 for t in times):
        raise ValueError("runtimes must be non-negative")
    return max(times)


def layer_latency_tree(
    times: Mapping[Any, float], clusters: Iterable[Iterable[Any]]
) -> tuple[float, list[float]]:
    """Tree layer latency (max over successors of the max over their cluster).

    Returns ``(layer_value, readiness)`` where ``readiness[j]`` is the time the
    j-th successor's precursors are all done.
    """
    readiness = []
    for cluster in clusters:
        members = list(cluster)
        if not members:
            raise ValueError("empty cluster")
        missing = [m for m in members if m not in times]
        if missing:
            raise ValueError(f"no runtime for precursor {missing[0]}")
        readiness.append(max(times[m] for m in members))
    if not readiness:
        raise ValueError("layer_latency_tree needs at least one cluster")
    return max(readiness), readiness


def finish_times(topology: Topology, times: Mapping[AgentId, float]) -> dict[AgentId, float]:
    """Earliest finish of every agent when each starts as soon as its precursors finish."""
    missing = [a for a in topology.agents() if a not in times]
    if missing:
        raise ValueError(f"no runtime for agent {missing[0]}")
    finish: dict[AgentId, float] = {}
    for layer in topology.layers:
        for a in layer:
            start = max((finish[p] for p in topology.precursors.get(a, ())), default=0.0)
            finish[a] = start + times[a]
    return finish


def critical_path(topology: Topology, times: Mapping[AgentId, float]) -> float:
    """Longest leaf-to-root path cost under precursor-gated start times."""
    return finish_times(topology, times)[topology.root]


def critical_path_agents(topology: Topology, times: Mapping[AgentId, float]) -> list[AgentId]:
    """The agents on the critical path, leaf first. Ties go to the lowest position."""
    finish = finish_times(topology, times)
    path = [topology.root]
    while topology.precursors.get(path[-1]):
        preds = topology.precursors[path[-1]]
        path.append(min(preds, key=lambda p: (-finish[p], p)))
    return path[::-1]
