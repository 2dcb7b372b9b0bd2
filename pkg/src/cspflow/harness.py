"""Executable surface: synthetic dataset generation, file replay, the
reference classification topology, scenario runs, load sweeps, and manifests
for exact reruns.

Datasets are JSON lines: {id, text, ts_ms, gold_label, is_retweet}. A
scenario bundles a topology, a dataset (file or generator params), pacing,
crowd and learning configuration, and a seed; virtual-time runs of the same
scenario are reproducible byte for byte.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Optional, Sequence

import yaml

from . import __version__
from .core import Topology, build_topology
from .crowd import TaskPool, export_label_csv
from .engine import Engine, RunResult, SourceFeed
from .errors import InvalidParams, ParseError
from .channels import export_shed_csv
from .learning import QualityCheckpoint
from .metrics import (
    MetricsRecord,
    export_metrics_csv,
    flow_conservation,
    summarize,
)

log = logging.getLogger("cspflow.harness")

_SYLLABLES = ["ba", "re", "mi", "to", "ka", "su", "ne", "lo", "da", "vi",
              "po", "sha", "gu", "te", "ri", "mo", "za", "fe", "ki", "nu"]


@dataclass
class DatasetRecord:
    id: str
    text: str
    ts_ms: int
    gold_label: Optional[str]
    is_retweet: bool


def _word_list(rng, count: int) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < count:
        word = "".join(rng.choice(_SYLLABLES)
                       for _ in range(rng.randint(3, 4)))
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def generate_dataset(params: dict[str, Any],
                     path: Optional[str] = None) -> list[DatasetRecord]:
    """Synthetic two-class text stream: each token indicates the message's
    class at rate (1 - noise) and is drawn from the other class's vocabulary
    otherwise, so no single token is a perfect marker and quality climbs with
    training coverage. Retweets are exact copies prefixed RT; near-duplicates
    share all but one token. Deterministic per seed."""
    import random

    n = int(params.get("n", 1000))
    classes = list(params.get("classes", ["informative", "not_informative"]))
    vocab_per_class = int(params.get("vocab_per_class", 600))
    shared_vocab_size = int(params.get("shared_vocab", 400))
    noise = float(params.get("noise", 0.2))
    retweet_fraction = float(params.get("retweet_fraction", 1 / 3))
    near_dup_fraction = float(params.get("near_dup_fraction", 0.25))
    seed = int(params.get("seed", 0))
    # a holdout set passes the stream's seed here so both draw messages over
    # the same vocabulary
    vocab_seed = int(params.get("vocab_seed", seed))
    min_len = int(params.get("min_tokens", 6))
    max_len = int(params.get("max_tokens", 10))

    if n <= 0 or vocab_per_class <= 0 or shared_vocab_size <= 0:
        raise InvalidParams("n and vocabulary sizes must be positive")
    if not 0 <= noise <= 1:
        raise InvalidParams(f"noise must be in [0,1], got {noise}")
    if not 0 <= retweet_fraction < 1 or not 0 <= near_dup_fraction < 1:
        raise InvalidParams("duplicate fractions must be in [0,1)")
    if retweet_fraction + near_dup_fraction >= 1:
        raise InvalidParams("duplicate fractions sum to >= 1")
    if len(classes) < 2:
        raise InvalidParams("need at least two classes")

    vocab_rng = random.Random(f"vocab:{vocab_seed}")
    words = _word_list(vocab_rng,
                       vocab_per_class * len(classes) + shared_vocab_size)
    class_vocab = {c: words[i * vocab_per_class:(i + 1) * vocab_per_class]
                   for i, c in enumerate(classes)}
    shared = words[vocab_per_class * len(classes):]
    rng = random.Random(f"dataset:{seed}")

    records: list[DatasetRecord] = []
    originals: list[DatasetRecord] = []
    # reposts cluster on recently viral messages: mostly repeats of messages
    # already being reposted, sometimes a fresh target. The recency window
    # sits inside the sampling buffer so de-duplication gets a fair chance.
    recency = int(params.get("dup_recency_window", 300))
    viral_repeat = float(params.get("viral_repeat", 0.75))
    recent_draws: deque[int] = deque(maxlen=150)

    def pick_base_idx() -> int:
        window = min(len(originals), recency)
        lo = len(originals) - window
        if recent_draws and rng.random() < viral_repeat:
            idx = recent_draws[rng.randrange(len(recent_draws))]
            if idx >= lo:
                return idx
        return lo + rng.randrange(window)

    for i in range(n):
        rid = f"t{i:06d}"
        ts = i * 100
        roll = rng.random()
        if originals and roll < retweet_fraction:
            idx = pick_base_idx()
            recent_draws.append(idx)
            base = originals[idx]
            records.append(DatasetRecord(rid, f"RT {base.text}", ts,
                                         base.gold_label, True))
            continue
        if originals and roll < retweet_fraction + near_dup_fraction:
            idx = pick_base_idx()
            recent_draws.append(idx)
            base = originals[idx]
            tokens = base.text.split()
            tokens[rng.randrange(len(tokens))] = rng.choice(shared)
            records.append(DatasetRecord(rid, " ".join(tokens), ts,
                                         base.gold_label, False))
            continue
        gold = classes[rng.randrange(len(classes))]
        others = [c for c in classes if c != gold]
        length = rng.randint(min_len, max_len)
        off_count = min(sum(1 for _ in range(length) if rng.random() < noise),
                        length)
        tokens = rng.sample(class_vocab[rng.choice(others)], off_count) + \
            rng.sample(class_vocab[gold], length - off_count)
        rng.shuffle(tokens)
        record = DatasetRecord(rid, " ".join(tokens), ts, gold, False)
        records.append(record)
        originals.append(record)

    if path is not None:
        write_dataset(records, path)
    return records


def write_dataset(records: Sequence[DatasetRecord], path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps({
                "id": r.id,
                "text": r.text,
                "ts_ms": r.ts_ms,
                "gold_label": r.gold_label,
                "is_retweet": r.is_retweet,
            }, sort_keys=True))
            fh.write("\n")


def load_dataset(path: str) -> list[DatasetRecord]:
    records: list[DatasetRecord] = []
    last_ts = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                record = DatasetRecord(
                    id=str(raw["id"]),
                    text=str(raw["text"]),
                    ts_ms=int(raw["ts_ms"]),
                    gold_label=raw.get("gold_label"),
                    is_retweet=bool(raw.get("is_retweet", False)),
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(line_no, f"line {line_no}: {exc}") from exc
            if last_ts is not None and record.ts_ms < last_ts:
                raise ParseError(line_no,
                                 f"line {line_no}: ts_ms decreases")
            last_ts = record.ts_ms
            records.append(record)
    return records


def replay_feed(records: Sequence[DatasetRecord],
                rate: float | Sequence[tuple[float, int]]) -> SourceFeed:
    """Emit dataset records as stream items at the configured pace; virtual
    time spaces emissions exactly 1000/rate ms apart."""
    rows = [(r.id, r.text, {"gold": r.gold_label, "is_retweet": r.is_retweet})
            for r in records]
    if isinstance(rate, (int, float)):
        return SourceFeed.constant(rows, float(rate))
    plan = [(float(r), int(c)) for r, c in rate]
    covered = sum(c for _, c in plan)
    if covered < len(rows):
        plan.append((plan[-1][0], len(rows) - covered))
    return SourceFeed(records=rows, plan=plan)


# --------------------------------------------------------------------------
# scenario configuration
# --------------------------------------------------------------------------


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    topology: Any = "aidr"  # builtin name, path, or inline config mapping
    dataset: dict[str, Any] = field(default_factory=dict)
    rate: Any = 10.0  # items/s or [[rate, count], ...]
    duration_ms: Optional[float] = None
    drain_ms: Optional[float] = None
    seed: int = 0
    mode: str = "virtual"
    crowd: dict[str, Any] = field(default_factory=dict)
    learning: dict[str, Any] = field(default_factory=dict)
    out: Optional[str] = None

    @classmethod
    def from_mapping(cls, raw: dict[str, Any]) -> "ScenarioConfig":
        known = {f for f in cls.__dataclass_fields__}  # type: ignore[attr-defined]
        unknown = set(raw) - known
        if unknown:
            raise InvalidParams(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_yaml(cls, path: str) -> "ScenarioConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_mapping(yaml.safe_load(fh) or {})

    def to_mapping(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "topology": self.topology,
            "dataset": dict(self.dataset),
            "rate": self.rate,
            "duration_ms": self.duration_ms,
            "drain_ms": self.drain_ms,
            "seed": self.seed,
            "mode": self.mode,
            "crowd": copy.deepcopy(self.crowd),
            "learning": copy.deepcopy(self.learning),
            "out": self.out,
        }


def with_rate(cfg: ScenarioConfig, rate: float) -> ScenarioConfig:
    clone = ScenarioConfig.from_mapping(cfg.to_mapping())
    clone.rate = rate
    clone.out = None
    return clone


def builtin_topology_config(name: str) -> dict[str, Any]:
    data = resources.files("cspflow").joinpath(f"configs/{name}.yaml")
    with data.open("r", encoding="utf-8") as fh:
        return yaml.safe_load(fh)


def resolve_topology(ref: Any) -> Topology:
    if isinstance(ref, Topology):
        return ref
    if isinstance(ref, dict):
        return build_topology(ref)
    if isinstance(ref, str) and not ref.endswith((".yaml", ".yml")) and \
            "/" not in ref:
        return build_topology(builtin_topology_config(ref))
    with open(ref, "r", encoding="utf-8") as fh:
        return build_topology(yaml.safe_load(fh))


def _merge_behavior_params(topology: Topology, cfg: ScenarioConfig,
                           pool: Optional[TaskPool],
                           snapshot_dir: Optional[str]) -> None:
    crowd_cfg = dict(cfg.crowd)
    learning_cfg = dict(cfg.learning)
    crowd_enabled = bool(crowd_cfg.pop("enabled", True))
    classes = learning_cfg.get("classes")
    for pe in topology.pes.values():
        if pe.behavior == "select_tasks":
            pe.params.setdefault("enabled", crowd_enabled)
            for key in ("mode", "dedup", "dedup_threshold", "buffer_capacity",
                        "round_ms", "batch"):
                if key in learning_cfg:
                    pe.params[key] = learning_cfg[key]
            if not crowd_enabled:
                pe.params["enabled"] = False
        elif pe.behavior == "crowd_annotate":
            for key, value in crowd_cfg.items():
                pe.params[key] = copy.deepcopy(value)
            if classes and "template" not in pe.params:
                pe.params["template"] = {"task_kind": "binary",
                                         "question": "Which class? {text}",
                                         "options": list(classes)} \
                    if len(classes) == 2 else \
                    {"task_kind": "n_ary",
                     "question": "Which class? {text}",
                     "options": list(classes)}
            if pool is not None:
                pe.params["pool"] = pool
                pe.params.setdefault("source", "http")
        elif pe.behavior == "learn":
            for key in ("classes", "positive_class", "retrain_every",
                        "test_every", "max_train", "mode", "dedup"):
                if key in learning_cfg:
                    pe.params[key] = learning_cfg[key]
            holdout_n = int(learning_cfg.get("holdout_n", 0))
            if holdout_n > 0:
                pe.params["holdout"] = _build_holdout(cfg, holdout_n)
            if pool is not None:
                pe.params["pool"] = pool
            if snapshot_dir is not None:
                pe.params["snapshot_dir"] = snapshot_dir


def _build_holdout(cfg: ScenarioConfig, holdout_n: int):
    """Fixed evaluation set drawn from the same vocabulary as the stream but
    disjoint from it: distinct messages only, scored at every retrain."""
    from .core import DataItem
    from .learning import LabeledExample, extract_features

    generate = cfg.dataset.get("generate")
    if generate is None:
        raise InvalidParams("holdout_n requires a generated dataset")
    params = dict(generate)
    stream_seed = int(params.get("seed", cfg.seed))
    params.update({
        "n": holdout_n,
        "seed": stream_seed + 7_777_777,
        "vocab_seed": stream_seed,
        "retweet_fraction": 0.0,
        "near_dup_fraction": 0.0,
    })
    examples = []
    for r in generate_dataset(params):
        item = DataItem(f"holdout:{r.id}", r.text, 0.0,
                        frozenset({f"holdout:{r.id}"}), {})
        examples.append(LabeledExample(item.item_id, extract_features(item),
                                       r.gold_label))
    return examples


def _resolve_records(cfg: ScenarioConfig) -> list[DatasetRecord]:
    ds = dict(cfg.dataset)
    if "path" in ds:
        return load_dataset(ds["path"])
    if "generate" in ds:
        params = dict(ds["generate"])
        params.setdefault("seed", cfg.seed)
        return generate_dataset(params)
    raise InvalidParams("dataset needs either 'path' or 'generate'")


def _offered(cfg: ScenarioConfig, n_records: int) -> tuple[float, float]:
    """(nominal offered rate items/s, ingest span ms)."""
    if isinstance(cfg.rate, (int, float)):
        rate = float(cfg.rate)
        return rate, n_records / rate * 1000.0
    span = 0.0
    covered = 0
    for rate, count in cfg.rate:
        take = min(count, n_records - covered)
        span += take / float(rate) * 1000.0
        covered += take
        if covered >= n_records:
            break
    if covered < n_records:
        span += (n_records - covered) / float(cfg.rate[-1][0]) * 1000.0
    return n_records / span * 1000.0, span


@dataclass
class PreparedScenario:
    cfg: ScenarioConfig
    engine: Engine
    topology: Topology
    horizon: Optional[float]
    offered_rate: float
    span_ms: float
    out_dir: Optional[str]

    def annotator_pe(self) -> Optional[str]:
        for pe in self.topology.pes.values():
            if pe.behavior == "crowd_annotate":
                return pe.pe_id
        return None


def prepare_scenario(cfg: ScenarioConfig,
                     pool: Optional[TaskPool] = None) -> PreparedScenario:
    """Resolve dataset and topology, inject scenario parameters into the
    behaviors, and wire the engine, without starting the run."""
    records = _resolve_records(cfg)
    topology = resolve_topology(
        copy.deepcopy(cfg.topology) if isinstance(cfg.topology, dict)
        else cfg.topology)

    out_dir = cfg.out
    snapshot_dir = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        snapshot_dir = os.path.join(out_dir, "models")
        os.makedirs(snapshot_dir, exist_ok=True)

    _merge_behavior_params(topology, cfg, pool, snapshot_dir)

    engine = Engine(topology, seed=cfg.seed, mode=cfg.mode)
    source_pe = topology.sources()[0]
    engine.add_source(source_pe, replay_feed(records, cfg.rate))

    offered_rate, span_ms = _offered(cfg, len(records))
    if cfg.duration_ms is not None:
        horizon: Optional[float] = float(cfg.duration_ms)
        span_ms = min(span_ms, horizon)  # measurement window ends at cutoff
    else:
        crowd_on = bool(cfg.crowd.get("enabled", True)) and any(
            pe.behavior == "crowd_annotate" for pe in topology.pes.values())
        drain = cfg.drain_ms if cfg.drain_ms is not None else \
            (90_000.0 if crowd_on else 1_000.0)
        horizon = span_ms + float(drain)
    return PreparedScenario(cfg=cfg, engine=engine, topology=topology,
                            horizon=horizon, offered_rate=offered_rate,
                            span_ms=span_ms, out_dir=out_dir)


def finish_scenario(prep: PreparedScenario, result: RunResult) -> RunResult:
    # measure over the offered-load window; the drain tail would dilute
    # throughput (latency attribution still sees post-window consumer records)
    result.metrics = summarize(
        result.log, input_rate=prep.offered_rate,
        window=(0.0, max(prep.span_ms, 1.0)))
    result.conservation = flow_conservation(result.log,
                                            result.residual_lineages)
    if prep.out_dir:
        _write_outputs(prep.out_dir, prep.cfg, result)
    return result


def run_scenario(cfg: ScenarioConfig,
                 pool: Optional[TaskPool] = None,
                 stop_event=None) -> RunResult:
    """Execute a scenario to dataset exhaustion plus drain (or the configured
    duration) and, when an output directory is set, write the metrics CSV,
    quality curve, label log, shed records, model snapshots, and the manifest
    that allows an exact rerun."""
    prep = prepare_scenario(cfg, pool)
    result = prep.engine.run(until_ms=prep.horizon, stop_event=stop_event)
    return finish_scenario(prep, result)


def _write_outputs(out_dir: str, cfg: ScenarioConfig,
                   result: RunResult) -> None:
    def write(name: str, text: str) -> None:
        with open(os.path.join(out_dir, name), "w", encoding="utf-8",
                  newline="\n") as fh:
            fh.write(text)

    write("metrics.csv", export_metrics_csv([result.metrics]))
    curve = [QualityCheckpoint.CSV_HEADER] + \
        [c.csv_row() for c in result.log.checkpoints]
    write("quality_curve.csv", "\n".join(curve) + "\n")
    for behavior in result.behaviors.values():
        state = getattr(behavior, "state", None)
        if state is not None and getattr(state, "holdout_checkpoints", None):
            rows = [QualityCheckpoint.CSV_HEADER] + \
                [c.csv_row() for c in state.holdout_checkpoints]
            write("holdout_curve.csv", "\n".join(rows) + "\n")
    write("label_log.csv", export_label_csv(result.log.labels))
    write("shed.csv", export_shed_csv(result.log.shed_records))
    manifest = {
        "scenario": cfg.to_mapping(),
        "seed": cfg.seed,
        "version": __version__,
        "config_hash": config_hash(cfg),
    }
    write("manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def config_hash(cfg: ScenarioConfig) -> str:
    blob = json.dumps(cfg.to_mapping(), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def rerun_manifest(path: str) -> RunResult:
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = ScenarioConfig.from_mapping(manifest["scenario"])
    return run_scenario(cfg)


# --------------------------------------------------------------------------
# sweeps and capacity
# --------------------------------------------------------------------------


def measure_capacity(cfg: ScenarioConfig, probe_rate: float = 8000.0,
                     duration_ms: float = 1500.0) -> float:
    """Saturate the topology and read the plateau throughput."""
    probe = with_rate(cfg, probe_rate)
    probe.duration_ms = duration_ms
    probe.crowd = dict(probe.crowd)
    probe.crowd["enabled"] = False
    result = run_scenario(probe)
    return result.metrics.throughput


def sweep(cfg: ScenarioConfig, rates: Sequence[float],
          out_dir: Optional[str] = None) -> list[MetricsRecord]:
    """One fixed-seed run per offered rate; rows behind the load curves."""
    rows: list[MetricsRecord] = []
    for rate in rates:
        one = with_rate(cfg, rate)
        if out_dir:
            one.out = os.path.join(out_dir, f"rate_{rate:g}")
        result = run_scenario(one)
        rows.append(result.metrics)
        log.info("sweep rate=%.1f throughput=%.1f shed=%d",
                 rate, result.metrics.throughput, result.metrics.shed_count)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "sweep.csv"), "w", encoding="utf-8",
                  newline="\n") as fh:
            fh.write(export_metrics_csv(rows))
    return rows
