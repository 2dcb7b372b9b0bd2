"""Crowd work primitives: tasks, workers, label aggregation, trust, budget.

Transport-free by design: the same task pool is driven either by simulated
workers inside the scheduler or by the harness HTTP annotator service. Both
enter labels through the identical aggregation path.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Optional, Sequence

from .core import DataItem
from .errors import (
    BudgetExhausted,
    ForeignLabel,
    NoEligibleWorker,
    TemplateMismatch,
)


class TaskKind(str, Enum):
    BINARY = "binary"
    N_ARY = "n_ary"
    DATA_ENTRY = "data_entry"


@dataclass
class TaskTemplate:
    task_kind: TaskKind
    question: str  # may contain a {text} placeholder
    options: list[str] = field(default_factory=list)


@dataclass
class CrowdTask:
    task_id: str
    item_id: str
    task_kind: TaskKind
    question: str
    options: list[str]
    created_ts: float
    required_labels: int
    assigned_worker: Optional[str] = None
    priority: float = 0.0
    # run-internal bookkeeping, not part of the wire shape
    lineage: frozenset[str] = frozenset()
    payload: Any = None
    gold: Optional[str] = None


@dataclass
class LabelRecord:
    task_id: str
    worker_id: str
    answer: Any  # option index for binary/n_ary, free text for data entry
    submitted_ts: float
    latency_ms: float
    item_id: str = ""

    CSV_HEADER = "task_id,item_id,worker_id,answer,submitted_ts,latency_ms"

    def csv_row(self) -> str:
        return (f"{self.task_id},{self.item_id},{self.worker_id},{self.answer},"
                f"{self.submitted_ts:g},{self.latency_ms:g}")


@dataclass
class WorkerModel:
    worker_id: str
    accuracy: float = 0.9
    speed_mean_ms: float = 9000.0
    speed_jitter_ms: float = 2000.0
    skills: dict[str, float] = field(default_factory=dict)
    trust: float = 0.5
    labels_given: int = 0
    max_labels: int = 250
    # agreement bookkeeping behind the trust score
    agreements: int = 0
    decided_labels: int = 0
    busy_until: float = 0.0

    def proficiency(self, key: str) -> float:
        return self.skills.get(key, 0.5)

    def can_take_more(self) -> bool:
        return self.labels_given < self.max_labels


class BudgetMode(str, Enum):
    FIXED_BUDGET = "fixed_budget"
    PER_TASK_COST = "per_task_cost"


@dataclass
class CrowdBudget:
    mode: BudgetMode = BudgetMode.PER_TASK_COST
    k: int = 0
    unit_cost: float = 1.0
    spent: int = 0

    def charge(self) -> None:
        if self.mode is BudgetMode.FIXED_BUDGET and self.spent >= self.k:
            raise BudgetExhausted(f"fixed budget of {self.k} labels spent")
        self.spent += 1

    def exhausted(self) -> bool:
        return self.mode is BudgetMode.FIXED_BUDGET and self.spent >= self.k

    @property
    def cost(self) -> float:
        return self.spent * self.unit_cost


class OutcomeStatus(str, Enum):
    DECIDED = "decided"
    NEEDS_MORE = "needs_more"
    EXHAUSTED = "exhausted"


@dataclass
class AggregationOutcome:
    task_id: str
    decided_label: Optional[str]
    support: float
    labels_used: int
    status: OutcomeStatus


@dataclass
class AggregationConfig:
    min_labels: int = 3
    agreement: float = 0.6
    max_labels: int = 5
    trust_weighted: bool = False


def generate_task(item: DataItem, template: TaskTemplate, *,
                  task_id: str, created_ts: float, required_labels: int,
                  priority: float = 0.0) -> CrowdTask:
    """Render one unit of human work for a stream item."""
    kind = TaskKind(template.task_kind)
    n = len(template.options)
    if kind is TaskKind.BINARY and n != 2:
        raise TemplateMismatch(f"binary template needs 2 options, got {n}")
    if kind is TaskKind.N_ARY and n < 2:
        raise TemplateMismatch(f"n_ary template needs >=2 options, got {n}")
    if kind is TaskKind.DATA_ENTRY and n:
        raise TemplateMismatch("data_entry template takes no options")
    text = item.payload if isinstance(item.payload, str) else repr(item.payload)
    question = template.question.format(text=text) if "{text}" in template.question \
        else f"{template.question} {text}"
    return CrowdTask(
        task_id=task_id,
        item_id=item.item_id,
        task_kind=kind,
        question=question,
        options=list(template.options),
        created_ts=created_ts,
        required_labels=required_labels,
        priority=priority,
        lineage=item.lineage,
        payload=item.payload,
        gold=item.attributes.get("gold"),
    )


def eligible_workers(task: CrowdTask, workers: Sequence[WorkerModel],
                     answered: Iterable[str]) -> list[WorkerModel]:
    done = set(answered)
    return [w for w in workers
            if w.can_take_more() and w.worker_id not in done]


def assign_task(task: CrowdTask, workers: Sequence[WorkerModel],
                policy: str = "any", *, rng=None,
                answered: Iterable[str] = ()) -> str:
    """Pick the worker for the next label on `task`.

    `any` draws uniformly from the eligible pool (seeded rng); `skill_based`
    takes the highest proficiency for the task kind, ties to lowest id.
    """
    pool = eligible_workers(task, workers, answered)
    if not pool:
        raise NoEligibleWorker(task.task_id)
    if policy == "skill_based":
        best = min(pool, key=lambda w: (-w.proficiency(task.task_kind.value),
                                        w.worker_id))
        task.assigned_worker = best.worker_id
        return best.worker_id
    if rng is None:
        import random
        rng = random.Random(0)
    chosen = pool[rng.randrange(len(pool))]
    task.assigned_worker = chosen.worker_id
    return chosen.worker_id


def simulate_label(task: CrowdTask, worker: WorkerModel, gold: Optional[str],
                   clock: float, *, rng, budget: Optional[CrowdBudget] = None
                   ) -> LabelRecord:
    """Stand-in for a human: answers the gold label with `worker.accuracy`,
    otherwise uniformly among the wrong options; latency is drawn from the
    worker's speed distribution."""
    if budget is not None:
        budget.charge()  # raises BudgetExhausted before any work happens
    correct = rng.random() < worker.accuracy
    if task.task_kind is TaskKind.DATA_ENTRY:
        answer: Any = gold if correct else f"{gold}?"
    else:
        gold_idx = task.options.index(gold) if gold in task.options else 0
        if correct:
            answer = gold_idx
        else:
            others = [i for i in range(len(task.options)) if i != gold_idx]
            answer = others[rng.randrange(len(others))] if others else gold_idx
    latency = max(1.0, rng.gauss(worker.speed_mean_ms, worker.speed_jitter_ms))
    worker.labels_given += 1
    return LabelRecord(
        task_id=task.task_id,
        worker_id=worker.worker_id,
        answer=answer,
        submitted_ts=clock + latency,
        latency_ms=latency,
        item_id=task.item_id,
    )


def aggregate(task: CrowdTask, labels: Sequence[LabelRecord],
              cfg: AggregationConfig,
              trust: Optional[dict[str, float]] = None) -> AggregationOutcome:
    """Resolve a task from the labels gathered so far.

    Below min_labels the loop asks for more. Once the top option's support
    clears the agreement threshold the task is decided; otherwise one more
    label is requested until the redundancy cap, after which the top option
    wins anyway (status exhausted). Ties break to the lowest option index.
    """
    for rec in labels:
        if rec.task_id != task.task_id:
            raise ForeignLabel(f"label for {rec.task_id} offered to {task.task_id}")
    count = len(labels)
    if count < cfg.min_labels:
        return AggregationOutcome(task.task_id, None, 0.0, count,
                                  OutcomeStatus.NEEDS_MORE)
    weights = [1.0 if not cfg.trust_weighted or trust is None
               else trust.get(rec.worker_id, 0.5) for rec in labels]
    per_option = [0.0] * len(task.options)
    total = 0.0
    for rec, w in zip(labels, weights):
        idx = rec.answer if isinstance(rec.answer, int) else \
            task.options.index(rec.answer)
        per_option[idx] += w
        total += w
    if total <= 0:
        return AggregationOutcome(task.task_id, None, 0.0, count,
                                  OutcomeStatus.NEEDS_MORE)
    top_idx = max(range(len(per_option)), key=lambda i: (per_option[i], -i))
    support = per_option[top_idx] / total
    if support >= cfg.agreement:
        return AggregationOutcome(task.task_id, task.options[top_idx], support,
                                  count, OutcomeStatus.DECIDED)
    if count < cfg.max_labels:
        return AggregationOutcome(task.task_id, None, support, count,
                                  OutcomeStatus.NEEDS_MORE)
    return AggregationOutcome(task.task_id, task.options[top_idx], support,
                              count, OutcomeStatus.EXHAUSTED)


def update_trust(worker: WorkerModel, outcome: AggregationOutcome,
                 own_answer: Any, options: Sequence[str]) -> float:
    """Laplace-smoothed agreement ratio with the decided labels a worker
    contributed to: (agreements + 1) / (decided + 2)."""
    if outcome.status is OutcomeStatus.NEEDS_MORE or outcome.decided_label is None:
        return worker.trust
    own = options[own_answer] if isinstance(own_answer, int) else own_answer
    worker.decided_labels += 1
    if own == outcome.decided_label:
        worker.agreements += 1
    worker.trust = (worker.agreements + 1) / (worker.decided_labels + 2)
    return worker.trust


def crowd_capacity(workers: int, seconds_per_label: float,
                   redundancy: int) -> int:
    """Items per hour a crowd can decide at the given per-label speed and
    redundancy."""
    if workers <= 0 or seconds_per_label <= 0 or redundancy <= 0:
        raise ValueError("crowd_capacity inputs must be positive")
    return math.floor(workers * 3600 / seconds_per_label / redundancy)


# --------------------------------------------------------------------------
# Shared task pool (the annotator service side of the CSPE)
# --------------------------------------------------------------------------


class TaskPoolStatus(str, Enum):
    OPEN = "open"
    DECIDED = "decided"
    EXPIRED = "expired"


@dataclass
class PooledTask:
    task: CrowdTask
    status: TaskPoolStatus = TaskPoolStatus.OPEN
    answered_by: set[str] = field(default_factory=set)
    handed_to: set[str] = field(default_factory=set)


class TaskPool:
    """Thread-safe open-task registry shared between a running scenario and
    the HTTP annotator service. Mutation of crowd state stays with the
    scheduler thread; the pool only stages tasks and queues submissions."""

    def __init__(self):
        self._lock = threading.Lock()
        self._tasks: dict[str, PooledTask] = {}
        self._order: list[str] = []
        self._submissions: list[dict[str, Any]] = []
        self.stats: dict[str, Any] = {
            "labels_total": 0,
            "tasks_open": 0,
            "auc_latest": None,
            "model_version": 0,
            "throughput_now": 0.0,
        }

    def offer(self, task: CrowdTask) -> None:
        with self._lock:
            self._tasks[task.task_id] = PooledTask(task)
            self._order.append(task.task_id)
            self._refresh_open()

    def next_for(self, worker_id: str) -> Optional[CrowdTask]:
        with self._lock:
            candidates = [self._tasks[t] for t in self._order
                          if self._tasks[t].status is TaskPoolStatus.OPEN
                          and worker_id not in self._tasks[t].answered_by]
            if not candidates:
                return None
            candidates.sort(key=lambda p: (-p.task.priority,
                                           p.task.created_ts,
                                           p.task.task_id))
            # prefer tasks this worker has not already been handed
            fresh = [p for p in candidates if worker_id not in p.handed_to]
            chosen = (fresh or candidates)[0]
            chosen.handed_to.add(worker_id)
            return chosen.task

    def submit(self, task_id: str, worker_id: str, answer: Any,
               client_latency_ms: float, submitted_ts: float) -> str:
        """Returns accepted | unknown | duplicate | closed."""
        with self._lock:
            pooled = self._tasks.get(task_id)
            if pooled is None:
                return "unknown"
            if pooled.status is not TaskPoolStatus.OPEN:
                return "closed"
            if worker_id in pooled.answered_by:
                return "duplicate"
            if not isinstance(answer, int):
                if answer in pooled.task.options:
                    answer = pooled.task.options.index(answer)
                elif pooled.task.task_kind is not TaskKind.DATA_ENTRY:
                    return "invalid"
            elif pooled.task.options and not (0 <= answer < len(pooled.task.options)):
                return "invalid"
            pooled.answered_by.add(worker_id)
            self._submissions.append({
                "task_id": task_id,
                "worker_id": worker_id,
                "answer": answer,
                "client_latency_ms": float(client_latency_ms),
                "submitted_ts": submitted_ts,
            })
            return "accepted"

    def drain_submissions(self) -> list[dict[str, Any]]:
        with self._lock:
            out, self._submissions = self._submissions, []
            return out

    def close(self, task_id: str, expired: bool = False) -> None:
        with self._lock:
            pooled = self._tasks.get(task_id)
            if pooled is not None and pooled.status is TaskPoolStatus.OPEN:
                pooled.status = (TaskPoolStatus.EXPIRED if expired
                                 else TaskPoolStatus.DECIDED)
                self._refresh_open()

    def status_of(self, task_id: str) -> Optional[TaskPoolStatus]:
        with self._lock:
            pooled = self._tasks.get(task_id)
            return pooled.status if pooled else None

    def open_count(self) -> int:
        with self._lock:
            return sum(1 for p in self._tasks.values()
                       if p.status is TaskPoolStatus.OPEN)

    def update_stats(self, **kv: Any) -> None:
        with self._lock:
            self.stats.update(kv)

    def stats_snapshot(self) -> dict[str, Any]:
        with self._lock:
            snap = dict(self.stats)
            snap["tasks_open"] = sum(1 for p in self._tasks.values()
                                     if p.status is TaskPoolStatus.OPEN)
            return snap

    def _refresh_open(self) -> None:
        self.stats["tasks_open"] = sum(1 for p in self._tasks.values()
                                       if p.status is TaskPoolStatus.OPEN)


def export_label_csv(records: Sequence[LabelRecord]) -> str:
    lines = [LabelRecord.CSV_HEADER]
    lines.extend(r.csv_row() for r in records)
    return "\n".join(lines) + "\n"
