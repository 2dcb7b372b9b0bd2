"""Built-in PE behaviors and the name registry topology configs refer to.

The reference classification pipeline is assembled from these: extract
(features), classify (model holder fed by control signals), select_tasks
(bounded sampling buffer with optional de-duplication and active selection),
crowd_annotate (the crowd PE: task generation, assignment, label collection,
adaptive aggregation, trust and budget), learn (split/retrain cadence), and
collect (consumer sink).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Optional

from . import crowd as crowd_mod
from .channels import ShedRecord
from .core import Behavior, ControlSignal, DataItem, ProcessingElementSpec, StepContext
from .errors import CspflowError, EmptyAfterDedup
from .learning import (
    FeatureVector,
    LabeledExample,
    LearnerConfig,
    LearnerState,
    SampleBuffer,
    extract_features,
    near_duplicate,
    predict,
    select_for_labeling,
)

_REGISTRY: dict[str, type[Behavior]] = {}


def register_behavior(name: str):
    def wrap(cls: type[Behavior]) -> type[Behavior]:
        _REGISTRY[name] = cls
        return cls

    return wrap


def make_behavior(spec: ProcessingElementSpec) -> Behavior:
    cls = _REGISTRY.get(spec.behavior)
    if cls is None:
        raise CspflowError(
            f"unknown behavior {spec.behavior!r} (known: {sorted(_REGISTRY)})")
    return cls(spec.params)


def behavior_names() -> list[str]:
    return sorted(_REGISTRY)


@register_behavior("identity")
class IdentityBehavior(Behavior):
    def on_item(self, ctx: StepContext, item: DataItem, port: str) -> None:
        ctx.emit()


@register_behavior("replay")
class ReplayBehavior(Behavior):
    """Marker for source PEs; the engine drives the actual feed."""


@register_behavior("filter")
class FilterBehavior(Behavior):
    """Keeps items whose attribute matches; a callable `predicate` param
    overrides for programmatic use."""

    def on_item(self, ctx: StepContext, item: DataItem, port: str) -> None:
        predicate = self.params.get("predicate")
        if predicate is not None:
            keep = bool(predicate(item))
        else:
            attr = self.params.get("attr", "keep")
            keep = item.attributes.get(attr) == self.params.get("equals", True)
        if keep:
            ctx.emit()
        else:
            ctx.filtered(item)


@register_behavior("extract")
class ExtractBehavior(Behavior):
    def on_item(self, ctx: StepContext, item: DataItem, port: str) -> None:
        ctx.emit(attributes={"features": extract_features(item)})


@register_behavior("classify")
class ClassifyBehavior(Behavior):
    """Scores items with the latest model received over the control port;
    before any model exists items pass through tagged unclassified."""

    def __init__(self, params=None):
        super().__init__(params)
        self.model = None

    def on_signal(self, ctx: StepContext, signal: ControlSignal) -> None:
        if signal.kind.value == "model-update":
            self.model = signal.body

    def on_item(self, ctx: StepContext, item: DataItem, port: str) -> None:
        features: Optional[FeatureVector] = item.attributes.get("features")
        if features is None and isinstance(item.payload, str):
            features = extract_features(item)
        if self.model is None or features is None or features.empty:
            ctx.emit(attributes={"predicted": "unclassified"})
            return
        label, confidence = predict(self.model, features)
        ctx.emit(attributes={"predicted": label, "confidence": confidence})


@register_behavior("collect")
class CollectBehavior(Behavior):
    """Consumer sink: tallies per-class counts and keeps the output rows
    (capped via sample_cap when a run is not desk scale)."""

    def __init__(self, params=None):
        super().__init__(params)
        self.counts: dict[str, int] = {}
        self.rows: list[tuple[str, str]] = []
        self.sample_cap = self.params.get("sample_cap")

    def on_item(self, ctx: StepContext, item: DataItem, port: str) -> None:
        label = str(item.attributes.get("predicted",
                                        item.attributes.get("label", "")))
        self.counts[label] = self.counts.get(label, 0) + 1
        if self.sample_cap is None or len(self.rows) < self.sample_cap:
            self.rows.append((item.item_id, label))

    def collected(self) -> list[tuple[str, str]]:
        return self.rows

    def state_size(self) -> int:
        return len(self.rows)


@register_behavior("select_tasks")
class SelectTasksBehavior(Behavior):
    """Bounded sampling window feeding the crowd: every arriving item is
    screened for near-duplicates; each round the configured batch of
    candidates (passive random or lowest-confidence active) is emitted as
    labeling work."""

    def __init__(self, params=None):
        super().__init__(params)
        p = self.params
        self.enabled = bool(p.get("enabled", True))
        self.mode = p.get("mode", "passive")
        self.dedup = bool(p.get("dedup", False))
        self.threshold = float(p.get("dedup_threshold", 0.7))
        self.buffer = SampleBuffer(int(p.get("buffer_capacity", 1000)))
        self.round_ms = float(p.get("round_ms", 2000.0))
        self.batch = int(p.get("batch", 3))

    def setup(self, ctx: StepContext) -> None:
        if self.enabled:
            ctx.schedule(self.round_ms, "round")

    def on_item(self, ctx: StepContext, item: DataItem, port: str) -> None:
        if not self.enabled:
            return
        features = item.attributes.get("features")
        near_duplicate(item, self.buffer, self.threshold, features)

    def on_timer(self, ctx: StepContext, payload: Any) -> None:
        if payload != "round":
            return
        try:
            chosen = select_for_labeling(self.buffer, self.mode, self.dedup,
                                         self.batch, rng=ctx.rng)
        except EmptyAfterDedup:
            chosen = []
        for entry in chosen:
            ctx.emit(payload=entry.item.payload,
                     attributes=dict(entry.item.attributes),
                     lineage=entry.item.lineage)
        ctx.schedule(self.round_ms, "round")

    def state_size(self) -> int:
        return len(self.buffer)

    def residual_lineage(self) -> list[frozenset[str]]:
        return self.buffer.residual_lineages()


@dataclass
class _OpenTask:
    task: crowd_mod.CrowdTask
    item: DataItem
    labels: list[crowd_mod.LabelRecord] = field(default_factory=list)
    answered: set[str] = field(default_factory=set)
    requested: int = 0


@register_behavior("crowd_annotate")
class CrowdAnnotateBehavior(Behavior):
    """The crowd PE: turns items into tasks, routes them to simulated workers
    or the external task pool, aggregates labels adaptively, keeps worker
    trust, and enforces the label budget.

    Open tasks are bounded; when full, the lowest-priority (then oldest)
    unstarted task is expired, which is the prioritization form of shedding.
    """

    def __init__(self, params=None):
        super().__init__(params)
        p = self.params
        self.source = p.get("source", "simulated")
        self.assignment = p.get("assignment", "any")
        agg = p.get("aggregation", {})
        self.agg_cfg = crowd_mod.AggregationConfig(
            min_labels=int(agg.get("min_labels", 3)),
            agreement=float(agg.get("agreement", 0.6)),
            max_labels=int(agg.get("max_labels", 5)),
            trust_weighted=bool(agg.get("trust_weighted", False)),
        )
        b = p.get("budget", {})
        self.budget = crowd_mod.CrowdBudget(
            mode=crowd_mod.BudgetMode(b.get("mode", "per_task_cost")),
            k=int(b.get("k", 0)),
            unit_cost=float(b.get("unit_cost", 1.0)),
        )
        self.workers = _build_worker_pool(p.get("workers", {}))
        self.open_task_cap = int(p.get("open_task_cap", 64))
        self.task_ttl_ms = p.get("task_ttl_ms")
        tmpl = p.get("template", {})
        self.template = crowd_mod.TaskTemplate(
            task_kind=crowd_mod.TaskKind(tmpl.get("task_kind", "binary")),
            question=tmpl.get("question",
                              "Is this message informative? {text}"),
            options=list(tmpl.get("options",
                                  ["informative", "not_informative"])),
        )
        self.pool: Optional[crowd_mod.TaskPool] = p.get("pool")
        self.open: dict[str, _OpenTask] = {}
        self.pending: deque[str] = deque()
        self._task_seq = 0
        self._external_workers: dict[str, crowd_mod.WorkerModel] = {}

    # -- intake ------------------------------------------------------------------

    def on_item(self, ctx: StepContext, item: DataItem, port: str) -> None:
        if self.budget.exhausted():
            ctx.filtered(item, "budget exhausted")
            return
        if len(self.open) >= self.open_task_cap and not self._expire_one(ctx):
            ctx.filtered(item, "task pool saturated")
            return
        self._task_seq += 1
        task = crowd_mod.generate_task(
            item, self.template,
            task_id=f"{ctx.pe_id}.t{self._task_seq}",
            created_ts=ctx.clock,
            required_labels=self.agg_cfg.min_labels,
            priority=float(item.attributes.get("priority", 0.0)),
        )
        state = _OpenTask(task=task, item=item)
        self.open[task.task_id] = state
        if self.pool is not None:
            self.pool.offer(task)
        if self.source == "simulated":
            state.requested = self.agg_cfg.min_labels
            self.pending.extend([task.task_id] * state.requested)
            self._dispatch(ctx)
        if self.task_ttl_ms:
            ctx.schedule(float(self.task_ttl_ms), ("expire", task.task_id))

    def _expire_one(self, ctx: StepContext) -> bool:
        """Shed the least urgent unstarted open task to admit a new one."""
        candidates = [s for s in self.open.values() if not s.labels]
        if not candidates:
            return False
        victim = min(candidates,
                     key=lambda s: (s.task.priority, s.task.created_ts,
                                    s.task.task_id))
        self._close(victim, expired=True)
        record = ShedRecord(f"pe:{ctx.pe_id}", victim.item.item_id, ctx.clock,
                            "prioritization", victim.item.lineage)
        if ctx.recorder is not None:
            ctx.recorder.shed(record)
        return True

    # -- simulated dispatch ---------------------------------------------------------

    def _dispatch(self, ctx: StepContext) -> None:
        if self.source != "simulated":
            return
        progressed = True
        while progressed and self.pending:
            progressed = False
            for idx, task_id in enumerate(self.pending):
                state = self.open.get(task_id)
                if state is None:
                    del self.pending[idx]
                    progressed = True
                    break
                busy = {w.worker_id for w in self.workers
                        if w.busy_until > ctx.clock}
                try:
                    worker_id = crowd_mod.assign_task(
                        state.task,
                        [w for w in self.workers if w.worker_id not in busy],
                        self.assignment, rng=ctx.rng,
                        answered=state.answered | busy)
                except crowd_mod.NoEligibleWorker:
                    if not crowd_mod.eligible_workers(state.task, self.workers,
                                                      state.answered):
                        # nobody will ever take it: crowd exhausted
                        del self.pending[idx]
                        self._finalize(ctx, state, exhausted=True)
                        progressed = True
                        break
                    continue  # workers exist but are busy; retry on completion
                worker = next(w for w in self.workers
                              if w.worker_id == worker_id)
                try:
                    record = crowd_mod.simulate_label(
                        state.task, worker, state.task.gold, ctx.clock,
                        rng=ctx.rng, budget=self.budget)
                except crowd_mod.BudgetExhausted:
                    self.pending.clear()
                    return
                state.answered.add(worker_id)
                worker.busy_until = record.submitted_ts
                del self.pending[idx]
                ctx.schedule(record.submitted_ts - ctx.clock,
                             ("label", record))
                progressed = True
                break

    # -- label arrival ----------------------------------------------------------------

    def on_timer(self, ctx: StepContext, payload: Any) -> None:
        kind = payload[0] if isinstance(payload, tuple) else payload
        if kind == "label":
            self._apply_label(ctx, payload[1])
        elif kind == "submission":
            self._apply_submission(ctx, payload[1])
        elif kind == "expire":
            state = self.open.get(payload[1])
            if state is not None and not state.labels:
                self._expire_task(ctx, state)
        self._dispatch(ctx)

    def _apply_submission(self, ctx: StepContext, sub: dict[str, Any]) -> None:
        task_id = sub["task_id"]
        state = self.open.get(task_id)
        if state is None:
            return
        worker_id = sub["worker_id"]
        if worker_id not in self._external_workers:
            self._external_workers[worker_id] = crowd_mod.WorkerModel(
                worker_id=worker_id, max_labels=10 ** 9)
        record = crowd_mod.LabelRecord(
            task_id=task_id,
            worker_id=worker_id,
            answer=sub["answer"],
            submitted_ts=ctx.clock,
            latency_ms=float(sub.get("client_latency_ms", 0.0)),
            item_id=state.task.item_id,
        )
        self._external_workers[worker_id].labels_given += 1
        try:
            self.budget.charge()
        except crowd_mod.BudgetExhausted:
            return
        self._apply_label(ctx, record)

    def _apply_label(self, ctx: StepContext, record: crowd_mod.LabelRecord) -> None:
        if ctx.recorder is not None:
            ctx.recorder.labeled(record)
        if self.pool is not None:
            self.pool.update_stats(
                labels_total=self.pool.stats["labels_total"] + 1)
        state = self.open.get(record.task_id)
        if state is None:
            return  # task expired while the label was in flight
        state.labels.append(record)
        state.answered.add(record.worker_id)
        outcome = crowd_mod.aggregate(state.task, state.labels, self.agg_cfg,
                                      trust=self._trust_map())
        if outcome.status is crowd_mod.OutcomeStatus.NEEDS_MORE:
            if self.source == "simulated" and \
                    len(state.labels) >= state.requested and \
                    state.requested < self.agg_cfg.max_labels and \
                    not self.budget.exhausted():
                state.requested += 1
                self.pending.append(state.task.task_id)
            return
        self._emit_decided(ctx, state, outcome)

    def _emit_decided(self, ctx: StepContext, state: _OpenTask,
                      outcome: crowd_mod.AggregationOutcome) -> None:
        for record in state.labels:
            worker = self._worker_by_id(record.worker_id)
            if worker is not None:
                crowd_mod.update_trust(worker, outcome, record.answer,
                                       state.task.options)
        attributes = dict(state.item.attributes)
        attributes.update({
            "label": outcome.decided_label,
            "support": outcome.support,
            "labels_used": outcome.labels_used,
            "task_id": state.task.task_id,
            "decision": outcome.status.value,
        })
        ctx.emit(payload=state.item.payload, attributes=attributes,
                 lineage=state.item.lineage)
        self._close(state)

    def _finalize(self, ctx: StepContext, state: _OpenTask,
                  exhausted: bool) -> None:
        """Crowd exhausted for this task: decide with what exists or drop."""
        if state.labels:
            outcome = crowd_mod.aggregate(
                state.task, state.labels,
                crowd_mod.AggregationConfig(
                    min_labels=1, agreement=2.0,  # unreachable: force cap path
                    max_labels=len(state.labels),
                    trust_weighted=self.agg_cfg.trust_weighted),
                trust=self._trust_map())
            self._emit_decided(ctx, state, outcome)
        else:
            if ctx.recorder is not None:
                ctx.recorder.filtered(state.item.item_id, ctx.pe_id, ctx.clock,
                                      state.item.lineage)
            self._close(state)

    def _expire_task(self, ctx: StepContext, state: _OpenTask) -> None:
        self._close(state, expired=True)
        record = ShedRecord(f"pe:{ctx.pe_id}", state.item.item_id, ctx.clock,
                            "prioritization", state.item.lineage)
        if ctx.recorder is not None:
            ctx.recorder.shed(record)

    def _close(self, state: _OpenTask, expired: bool = False) -> None:
        self.open.pop(state.task.task_id, None)
        if self.pool is not None:
            self.pool.close(state.task.task_id, expired=expired)

    # -- helpers -------------------------------------------------------------------

    def _worker_by_id(self, worker_id: str) -> Optional[crowd_mod.WorkerModel]:
        for w in self.workers:
            if w.worker_id == worker_id:
                return w
        return self._external_workers.get(worker_id)

    def _trust_map(self) -> dict[str, float]:
        trust = {w.worker_id: w.trust for w in self.workers}
        trust.update({w.worker_id: w.trust
                      for w in self._external_workers.values()})
        return trust

    def state_size(self) -> int:
        return len(self.open) + len(self.pending)

    def residual_lineage(self) -> list[frozenset[str]]:
        return [s.item.lineage for s in self.open.values()]


@register_behavior("learn")
class LearnBehavior(Behavior):
    """Consumer of decided labels; splits deterministically, retrains at the
    cadence, pushes each new model to the classifier over the control flow."""

    def __init__(self, params=None):
        super().__init__(params)
        p = self.params
        self.state = LearnerState(LearnerConfig(
            classes=tuple(p.get("classes",
                                ("informative", "not_informative"))),
            positive_class=p.get("positive_class", "informative"),
            retrain_every=int(p.get("retrain_every", 50)),
            test_every=int(p.get("test_every", 5)),
            max_train=int(p.get("max_train", 5000)),
            mode=p.get("mode", "passive"),
            dedup=bool(p.get("dedup", False)),
            holdout=p.get("holdout"),
        ))
        self.pool: Optional[crowd_mod.TaskPool] = p.get("pool")
        self.snapshot_dir = p.get("snapshot_dir")

    def on_item(self, ctx: StepContext, item: DataItem, port: str) -> None:
        label = item.attributes.get("label")
        if label is None:
            ctx.filtered(item, "no decided label")
            return
        features = item.attributes.get("features")
        if features is None:
            features = extract_features(item)
        example = LabeledExample(item_id=item.item_id, features=features,
                                 label=str(label))
        new_model = self.state.ingest_label(example)
        if new_model is not None:
            ctx.emit_signal("model-update", new_model)
            if ctx.recorder is not None:
                ctx.recorder.checkpoint(self.state.checkpoints[-1])
            if self.pool is not None:
                auc = self.state.checkpoints[-1].auc
                self.pool.update_stats(model_version=new_model.version,
                                       auc_latest=auc)
            if self.snapshot_dir:
                import os
                path = os.path.join(self.snapshot_dir,
                                    f"model_v{new_model.version}.json")
                with open(path, "w", encoding="utf-8") as fh:
                    fh.write(new_model.to_json())

    def state_size(self) -> int:
        return len(self.state.train) + len(self.state.test)


def _build_worker_pool(cfg: Any) -> list[crowd_mod.WorkerModel]:
    if isinstance(cfg, list):
        return [crowd_mod.WorkerModel(
            worker_id=str(w["worker_id"]),
            accuracy=float(w.get("accuracy", 0.9)),
            speed_mean_ms=float(w.get("speed_mean_ms", 9000.0)),
            speed_jitter_ms=float(w.get("speed_jitter_ms", 2000.0)),
            skills=dict(w.get("skills", {})),
            max_labels=int(w.get("max_labels", 250)),
        ) for w in cfg]
    count = int(cfg.get("count", 0)) if isinstance(cfg, dict) else 0
    width = max(3, len(str(count)))
    return [crowd_mod.WorkerModel(
        worker_id=f"w{str(i + 1).zfill(width)}",
        accuracy=float(cfg.get("accuracy", 0.9)),
        speed_mean_ms=float(cfg.get("speed_mean_ms", 9000.0)),
        speed_jitter_ms=float(cfg.get("speed_jitter_ms", 2000.0)),
        skills=dict(cfg.get("skills", {})),
        max_labels=int(cfg.get("max_labels", 250)),
    ) for i in range(count)]
