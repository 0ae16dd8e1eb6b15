"""Command-line entry point.

Exit status: 0 on success, 2 when the config or input files fail to parse or
validate, 3 when a run fails.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from treemoa.embedding import EmbeddingError, ProviderSpec
from treemoa.metricq import DEFAULT_TAU, MetricQError, geometric_mean_confidence, score_from_parts, sim_matrix
from treemoa.orchestrator import (
    SETTINGS,
    ConfigError,
    RunConfig,
    SecondLayerStudy,
    max_mean_reduction,
    run_ablation,
    run_query,
    run_second_layer_study,
)
from treemoa.pdsim import SCHEDULE_MODES, Scenario, ScenarioError, Simulator
from treemoa.presets import DEFAULT_MODELS, preset
from treemoa.topology import TopologyError, topology_from_dict
from treemoa.trace import RunTrace

log = logging.getLogger("treemoa")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class ValidationError(Exception):
    pass


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_json(path: str | None, what: str = "config") -> Any:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ValidationError(f"{what} {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{what} {path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def _dumps(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def load_run_config(args: argparse.Namespace) -> RunConfig:
    data = read_json(args.config)
    if not isinstance(data, dict):
        raise ValidationError("config: top level must be a JSON object")
    try:
        cfg = RunConfig.from_dict(data)
        over: dict[str, Any] = {}
        if args.seed is not None:
            over["seed"] = args.seed
        if args.mode is not None:
            over["mode"] = args.mode
            over["overlap"] = args.mode == "incremental-overlap"
        if args.tau is not None:
            over["tau"] = args.tau
        if args.chunk_size is not None:
            over["chunk_size"] = args.chunk_size
        cfg = replace(cfg, **over) if over else cfg
        cfg.build_topology()
    except (ConfigError, TopologyError, EmbeddingError, TypeError) as exc:
        raise ValidationError(f"config: {exc}") from exc
    except KeyError as exc:
        raise ValidationError(f"config: missing field {exc}") from exc
    return cfg


def _flat(summary: dict[str, Any]) -> dict[str, Any]:
    out = {}
    for k, v in summary.items():
        if isinstance(v, dict):
            out.update({f"{k}_{t}": v[t] for t in sorted(v)})
        else:
            out[k] = v
    return out


def _rows_csv(rows: list[dict[str, Any]]) -> str:
    buf = io.StringIO()
    cols: list[str] = []
    for r in rows:
        cols += [c for c in r if c not in cols]
    w = csv.DictWriter(buf, cols, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _write_trace(out: Path, stem: str, trace: RunTrace, fmt: str | None) -> None:
    if (fmt or "jsonl") == "jsonl":
        write_atomic(out / f"{stem}.jsonl", trace.to_jsonl())
    else:
        write_atomic(out / f"{stem}.csv", trace.to_csv())


# -- subcommands ---------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    data = read_json(args.config)
    out = Path(args.out or "out")
    if isinstance(data, dict) and "agents" in data:
        # a raw scenario file drives the simulator directly
        try:
            scenario = Scenario.from_dict(data)
            if args.seed is not None:
                scenario.seed = args.seed
            if args.chunk_size is not None:
                scenario.chunk_size = args.chunk_size
            scenario.validate()
            mode = args.mode or data.get("mode") or "sequential-PD"
            if mode not in SCHEDULE_MODES:
                raise ScenarioError(f"mode: unknown schedule mode {mode!r}")
        except (ScenarioError, TopologyError, TypeError, ValueError) as exc:
            raise ValidationError(f"scenario: {exc}") from exc
        traces = [Simulator(scenario, mode).run()]
    else:
        cfg = load_run_config(args)
        topo = cfg.build_topology()
        traces = [run_query(cfg, k, topo) for k in range(cfg.repetitions)]
    summaries = []
    for k, tr in enumerate(traces):
        _write_trace(out, f"trace-{k}", tr, args.format)
        summaries.append({"sample": k, **tr.summary()})
    write_atomic(out / "summary.json", _dumps(summaries))
    write_atomic(out / "summary.csv", _rows_csv([_flat(s) for s in summaries]))
    for s in summaries:
        act = " ".join(f"{t}={v:.0%}" for t, v in s["activation"].items())
        print(f"sample {s['sample']}: e2e={s['e2e_latency']:.6f}s activation {act}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    out = Path(args.out or "out")
    if args.second_layer:
        study = SecondLayerStudy(
            fixed_tokens=tuple(args.fixed_tokens) if args.fixed_tokens else SecondLayerStudy().fixed_tokens,
            samples=args.samples or SecondLayerStudy().samples,
        )
        res = run_second_layer_study(cfg, study)
        stem = "second_layer"
    else:
        settings = args.settings or list(SETTINGS)
        bad = [s for s in settings if s not in SETTINGS]
        if bad:
            raise ValidationError(f"--settings: unknown setting {bad[0]!r}; expected {list(SETTINGS)}")
        res = run_ablation(cfg, settings, args.samples)
        stem = "ablation"
    if (args.format or "csv") == "jsonl":
        write_atomic(out / f"{stem}_per_sample.jsonl",
                     "".join(json.dumps(r, sort_keys=True) + "\n" for r in res.per_sample))
        write_atomic(out / f"{stem}_summary.jsonl",
                     "".join(json.dumps(r, sort_keys=True) + "\n" for r in res.summary))
    else:
        write_atomic(out / f"{stem}_per_sample.csv", res.per_sample_csv())
        write_atomic(out / f"{stem}_summary.csv", res.summary_csv())
    for r in res.summary:
        label = f"{r['mode']} fixed_tokens={r['fixed_tokens']}" if args.second_layer else r["setting"]
        print(f"{label}: normalized={r['normalized_mean']:.4f} reduction={r['reduction_mean']:.1%}")
    if args.second_layer:
        print(f"max incremental reduction: {max_mean_reduction(res):.1%}")
    return EXIT_OK


def _token_lists(data: Any, what: str) -> list[list[float]]:
    if not isinstance(data, list) or not data:
        raise ValidationError(f"{what}: expected a non-empty JSON list of lists")
    for i, rec in enumerate(data):
        if not isinstance(rec, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in rec):
            raise ValidationError(f"{what}: record {i} is not a list of numbers")
    return data


def cmd_metricq_eval(args: argparse.Namespace) -> int:
    outputs = read_json(args.outputs, "outputs")
    logprobs = _token_lists(read_json(args.logprobs, "logprobs"), "logprobs")
    tau = args.tau if args.tau is not None else DEFAULT_TAU
    for i, lp in enumerate(logprobs):
        if not lp or any(x > 0 for x in lp):
            raise ValidationError(f"logprobs: record {i} must be non-empty with every value <= 0")
    if isinstance(outputs, dict) and "embeddings" in outputs:
        embs = outputs["embeddings"]
        if not isinstance(embs, list):
            raise ValidationError("outputs: 'embeddings' must be a list of matrices")
        mats = []
        for i, m in enumerate(embs):
            try:
                arr = np.asarray(m, dtype=float)
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"outputs: record {i} is not a numeric matrix") from exc
            if arr.ndim != 2:
                raise ValidationError(f"outputs: record {i} is not a 2-D matrix")
            mats.append(arr)
    else:
        toks = _token_lists(outputs, "outputs")
        cfg = read_json(args.embedding, "embedding") if args.embedding else {}
        try:
            provider = ProviderSpec.from_dict(cfg).build(default_seed=args.seed or 0)
        except (EmbeddingError, KeyError) as exc:
            raise ValidationError(f"embedding: {exc}") from exc
        mats = []
        for i, t in enumerate(toks):
            if not t:
                raise ValidationError(f"outputs: record {i} is empty")
            mats.append(provider.embed([int(x) for x in t]))
    if len(mats) != len(logprobs):
        raise ValidationError(f"outputs has {len(mats)} records but logprobs has {len(logprobs)}")
    if len({m.shape[1] for m in mats}) > 1:
        raise ValidationError("outputs: embedding hidden sizes differ between records")
    try:
        conf = [geometric_mean_confidence(lp) for lp in logprobs]
        score = score_from_parts(conf, sim_matrix(mats), tau, include_diagonal=not args.strict_lower)
    except MetricQError as exc:
        raise ValidationError(str(exc)) from exc
    report = score.to_dict()
    text = _dumps(report)
    if args.out:
        write_atomic(Path(args.out) / "metricq.json", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_topology_check(args: argparse.Namespace) -> int:
    data = read_json(args.config)
    try:
        if isinstance(data, str):
            topo = preset(data)
        elif "preset" in data:
            topo = preset(data["preset"])
        else:
            topo = topology_from_dict(data, DEFAULT_MODELS)
    except (TopologyError, KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"topology: {exc.args[0] if exc.args else exc}") from exc
    text = topo.dumps() + "\n"
    if args.out:
        write_atomic(Path(args.out) / "topology.json", text)
    print(f"ok: {topo.kind} widths {topo.widths}, {len(topo.edges())} edges")
    return EXIT_OK


def cmd_trace_export(args: argparse.Namespace) -> int:
    try:
        with open(args.trace) as fh:
            trace = RunTrace.from_jsonl(fh.read())
    except OSError as exc:
        raise ValidationError(f"trace {args.trace}: {exc.strerror}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise ValidationError(f"trace {args.trace}: {exc}") from exc
    out = Path(args.out or "out")
    stem = Path(args.trace).stem
    _write_trace(out, stem, trace, args.format)
    write_atomic(out / f"{stem}.summary.json", _dumps(trace.summary()))
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config, scenario or topology file")
    common.add_argument("--out", help="output directory (default: ./out; stdout only for metricq-eval and topology-check)")
    common.add_argument("--seed", type=int, help="override the config's master seed")
    common.add_argument("--mode", choices=SCHEDULE_MODES, help="override the schedule mode")
    common.add_argument("--tau", type=float, help="preference threshold for the quality score")
    common.add_argument("--chunk-size", type=int, help="decode tokens per prompt-cache chunk")
    common.add_argument("--format", choices=("csv", "jsonl"),
                        help="output format (default: jsonl for traces, csv for tables)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="treemoa", description="Tree-structured mixture-of-agents latency simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="run queries and write traces plus a summary")
    s.set_defaults(fn=cmd_simulate)

    a = sub.add_parser("ablate", parents=[common], help="compare settings, normalised per sample")
    a.add_argument("--samples", type=int, help="queries per setting (default: config repetitions)")
    a.add_argument("--settings", nargs="+", metavar="SETTING", help=f"subset of {', '.join(SETTINGS)}")
    a.add_argument("--second-layer", action="store_true", help="second-layer study across the schedule modes")
    a.add_argument("--fixed-tokens", type=int, nargs="+", help="output lengths for the second-layer study")
    a.set_defaults(fn=cmd_ablate)

    m = sub.add_parser("metricq-eval", parents=[common], help="score saved outputs offline")
    m.add_argument("--outputs", required=True,
                   help="JSON list of token-id lists, or {\"embeddings\": [matrix, ...]}")
    m.add_argument("--logprobs", required=True, help="JSON list of per-token log-probability lists")
    m.add_argument("--embedding", help="JSON embedding provider spec (default: mock)")
    m.add_argument("--strict-lower", action="store_true", help="exclude the diagonal from W and P")
    m.set_defaults(fn=cmd_metricq_eval)

    t = sub.add_parser("topology-check", parents=[common], help="validate a topology and print its dump")
    t.set_defaults(fn=cmd_topology_check)

    e = sub.add_parser("trace-export", parents=[common], help="re-export a JSON-lines trace")
    e.add_argument("trace", help="trace .jsonl file")
    e.set_defaults(fn=cmd_trace_export)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        if args.chunk_size is not None and args.chunk_size < 1:
            raise ValidationError("--chunk-size: must be >= 1")
        if args.tau is not None and not 0 < args.tau <= 1:
            raise ValidationError("--tau: must lie in (0, 1]")
        return args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - last-resort runtime failure
        log.debug("run failed", exc_info=True)
        print(f"error: run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
