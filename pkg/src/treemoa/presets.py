"""Named topologies and the default calibration.

Default calibration (desk scale, not a hardware measurement):

* three model tiers ``4B``, ``8B``, ``32B`` with prefill/decode rates chosen so
  that prefill is roughly 10-30% of end-to-end latency on the all-to-all
  baseline;
* the 9-3-1 tree places one model of each tier in every leaf cluster, in
  size order, and uses ``8B`` for the mid-layer and root aggregators;
* the 9-9-1 all-to-all baseline repeats the leaf tier pattern in layer 2;
* synthetic confidence rises with model size (larger models are surer).
"""

from __future__ import annotations

from treemoa.topology import AgentProfile, OutputLenDist, Topology, build_all_to_all, build_tree

DEFAULT_MODELS: dict[str, AgentProfile] = {
    "4B": AgentProfile("4B", prefill_rate=3000.0, decode_rate=100.0,
                       output_len=OutputLenDist("uniform", min=150, max=450),
                       logprob_mean=-0.9, logprob_std=0.5),
    "8B": AgentProfile("8B", prefill_rate=2000.0, decode_rate=65.0,
                       output_len=OutputLenDist("uniform", min=150, max=450),
                       logprob_mean=-0.5, logprob_std=0.4),
    "32B": AgentProfile("32B", prefill_rate=800.0, decode_rate=25.0,
                        output_len=OutputLenDist("uniform", min=150, max=450),
                        logprob_mean=-0.2, logprob_std=0.2),
}

LEAF_TIERS = ("4B", "8B", "32B")
AGGREGATOR_TIER = "8B"


def _models(models: dict[str, AgentProfile] | None) -> dict[str, AgentProfile]:
    merged = dict(DEFAULT_MODELS)
    merged.update(models or {})
    return merged


def tree_9_3_1(models: dict[str, AgentProfile] | None = None) -> Topology:
    m = _models(models)
    leaves = [m[t] for t in LEAF_TIERS]
    return build_tree([9, 3, 1], [3, 3], [leaves, [m[AGGREGATOR_TIER]], [m[AGGREGATOR_TIER]]])


def all_to_all_9_9_1(models: dict[str, AgentProfile] | None = None) -> Topology:
    m = _models(models)
    tiers = [m[t] for t in LEAF_TIERS]
    return build_all_to_all([9, 9, 1], [tiers, tiers, [m[AGGREGATOR_TIER]]])


PRESETS = {
    "tree-9-3-1": tree_9_3_1,
    "all-to-all-9-9-1": all_to_all_9_9_1,
}


def preset(name: str, models: dict[str, AgentProfile] | None = None) -> Topology:
    try:
        return PRESETS[name](models)
    except KeyError:
        raise KeyError(f"unknown topology preset {name!r}; known: {sorted(PRESETS)}") from None
