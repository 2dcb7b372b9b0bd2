"""Run measurement: the event log every run feeds, and the latency /
throughput / load-adaptability / cost / quality summaries computed from it.

Latency uses the first-output rule: the latency of an input item is the time
until the first consumer-side record whose lineage contains it. Percentiles
are nearest-rank over the full sample (runs are desk scale).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Sequence

from .channels import ShedRecord
from .crowd import CrowdBudget, LabelRecord
from .errors import EmptyWindow, UnknownItem
from .learning import QualityCheckpoint

EVENT_KINDS = ("ingested", "emitted", "shed", "filtered", "labeled", "errored")


@dataclass
class EventRecord:
    item_id: str
    event: str  # one of EVENT_KINDS
    where: str  # pe_id or channel_id
    ts: float
    lineage: frozenset[str] = frozenset()


@dataclass
class MetricsRecord:
    window_start: float
    window_end: float
    input_rate: float
    throughput: float
    latency_mean_ms: Optional[float]
    latency_p50: Optional[float]
    latency_p95: Optional[float]
    shed_count: int
    labels_used: int
    cost: float
    auc: Optional[float]

    CSV_HEADER = "rate,throughput,latency_mean,latency_p50,latency_p95,shed,labels,auc"

    def csv_row(self) -> str:
        def num(v, fmt="{:.6f}"):
            return "" if v is None else fmt.format(v)

        return ",".join([
            f"{self.input_rate:.6f}",
            f"{self.throughput:.6f}",
            num(self.latency_mean_ms),
            num(self.latency_p50),
            num(self.latency_p95),
            str(self.shed_count),
            str(self.labels_used),
            num(self.auc),
        ])


class EventLog:
    """Single collector every engine component reports into."""

    def __init__(self, consumer_pes: Iterable[str] = ()):
        self.consumer_pes: set[str] = set(consumer_pes)
        self.records: list[EventRecord] = []
        self.labels: list[LabelRecord] = []
        self.checkpoints: list[QualityCheckpoint] = []
        self.shed_records: list[ShedRecord] = []
        self._ingest_ts: dict[str, float] = {}

    # -- recording ------------------------------------------------------------

    def ingested(self, item_id: str, ts: float) -> None:
        self.records.append(EventRecord(item_id, "ingested", "", ts,
                                        frozenset({item_id})))
        self._ingest_ts[item_id] = ts

    def emitted(self, item_id: str, pe_id: str, ts: float,
                lineage: frozenset[str]) -> None:
        self.records.append(EventRecord(item_id, "emitted", pe_id, ts, lineage))

    def shed(self, record: ShedRecord) -> None:
        self.shed_records.append(record)
        self.records.append(EventRecord(record.item_id, "shed",
                                        record.channel_id, record.shed_ts,
                                        record.lineage))

    def filtered(self, item_id: str, pe_id: str, ts: float,
                 lineage: frozenset[str]) -> None:
        self.records.append(EventRecord(item_id, "filtered", pe_id, ts, lineage))

    def errored(self, item_id: str, pe_id: str, ts: float,
                lineage: frozenset[str]) -> None:
        self.records.append(EventRecord(item_id, "errored", pe_id, ts, lineage))

    def labeled(self, record: LabelRecord) -> None:
        self.labels.append(record)
        self.records.append(EventRecord(record.item_id, "labeled",
                                        record.worker_id, record.submitted_ts))

    def checkpoint(self, point: QualityCheckpoint) -> None:
        self.checkpoints.append(point)

    # -- derived views ----------------------------------------------------------

    def ingested_ids(self) -> set[str]:
        return set(self._ingest_ts)

    def ingest_ts(self, item_id: str) -> float:
        if item_id not in self._ingest_ts:
            raise UnknownItem(item_id)
        return self._ingest_ts[item_id]

    def consumer_records(self) -> list[EventRecord]:
        return [r for r in self.records
                if r.event == "emitted" and r.where in self.consumer_pes]

    def latencies(self) -> dict[str, float]:
        """First-output latency for every input item that reached a consumer."""
        out: dict[str, float] = {}
        for rec in self.consumer_records():  # records are time ordered
            for origin in rec.lineage:
                if origin not in out and origin in self._ingest_ts:
                    out[origin] = rec.ts - self._ingest_ts[origin]
        return out


def item_latency(log: EventLog, input_item_id: str) -> Optional[float]:
    """ms from an input item's ingestion to the first consumer-side record
    containing it; None if the item never contributed to an output."""
    ingest = log.ingest_ts(input_item_id)  # raises UnknownItem
    best: Optional[float] = None
    for rec in log.consumer_records():
        if input_item_id in rec.lineage:
            if best is None or rec.ts < best:
                best = rec.ts
    return None if best is None else best - ingest


def throughput(log: EventLog, window: tuple[float, float]) -> float:
    start, end = window
    if end <= start:
        raise EmptyWindow(f"window ({start}, {end})")
    count = sum(1 for r in log.consumer_records() if start <= r.ts < end)
    return count / ((end - start) / 1000.0)


def nearest_rank(samples: Sequence[float], q: float) -> float:
    """Nearest-rank percentile (q in (0, 1]) over the full sample."""
    if not samples:
        raise EmptyWindow("no samples")
    ordered = sorted(samples)
    rank = max(1, math.ceil(q * len(ordered)))
    return ordered[rank - 1]


def summarize(log: EventLog, *, input_rate: float,
              window: Optional[tuple[float, float]] = None,
              budget: Optional[CrowdBudget] = None) -> MetricsRecord:
    if window is None:
        end = max((r.ts for r in log.records), default=0.0)
        window = (0.0, end if end > 0 else 1.0)
    lat = [v for k, v in log.latencies().items()
           if window[0] <= log.ingest_ts(k) < window[1]]
    auc_latest = next((c.auc for c in reversed(log.checkpoints)
                       if c.auc is not None), None)
    return MetricsRecord(
        window_start=window[0],
        window_end=window[1],
        input_rate=input_rate,
        throughput=throughput(log, window),
        latency_mean_ms=sum(lat) / len(lat) if lat else None,
        latency_p50=nearest_rank(lat, 0.50) if lat else None,
        latency_p95=nearest_rank(lat, 0.95) if lat else None,
        shed_count=len(log.shed_records),
        labels_used=len(log.labels),
        cost=budget.cost if budget else float(len(log.labels)),
        auc=auc_latest,
    )


# --------------------------------------------------------------------------
# flow conservation
# --------------------------------------------------------------------------


@dataclass
class ConservationReport:
    """Partition of the input items: every ingested item is attributed at a
    consumer, shed, filtered, errored, or verifiably still in flight."""

    ingested: set[str]
    attributed: set[str]
    shed: set[str]
    filtered: set[str]
    errored: set[str]
    in_flight: set[str]
    unaccounted: set[str] = field(default_factory=set)

    @property
    def exact(self) -> bool:
        return not self.unaccounted

    def counts(self) -> dict[str, int]:
        return {
            "ingested": len(self.ingested),
            "attributed": len(self.attributed),
            "shed": len(self.shed),
            "filtered": len(self.filtered),
            "errored": len(self.errored),
            "in_flight": len(self.in_flight),
            "unaccounted": len(self.unaccounted),
        }


def flow_conservation(log: EventLog,
                      residual_lineages: Iterable[frozenset[str]] = ()
                      ) -> ConservationReport:
    """Classify every input item by what happened to it (priority order:
    attributed, shed, filtered, errored, in flight). `residual_lineages` is
    the independent scan of everything still held at shutdown; an item is only
    accepted as in-flight if that scan actually contains it."""
    ingested = log.ingested_ids()
    attributed: set[str] = set()
    for rec in log.consumer_records():
        attributed |= rec.lineage & ingested
    remaining = ingested - attributed

    def gather(kind: str) -> set[str]:
        out: set[str] = set()
        for rec in log.records:
            if rec.event == kind:
                out |= rec.lineage & remaining
        return out

    shed = gather("shed") & remaining
    remaining -= shed
    filtered = gather("filtered") & remaining
    remaining -= filtered
    errored = gather("errored") & remaining
    remaining -= errored
    residual: set[str] = set()
    for lineage in residual_lineages:
        residual |= lineage
    in_flight = remaining & residual
    return ConservationReport(
        ingested=ingested,
        attributed=attributed,
        shed=shed,
        filtered=filtered,
        errored=errored,
        in_flight=in_flight,
        unaccounted=remaining - residual,
    )


def load_sweep(scenario: Any, rates: Sequence[float]) -> list[MetricsRecord]:
    """Run the scenario once per offered rate (fixed seed) and summarize each
    run; the rows behind the throughput/latency-vs-load curves."""
    from . import harness  # runtime import; harness builds on this module

    if list(rates) != sorted(rates):
        raise ValueError("rates must be sorted ascending")
    out: list[MetricsRecord] = []
    for rate in rates:
        result = harness.run_scenario(harness.with_rate(scenario, rate))
        out.append(result.metrics)
    return out


def cost_report(log: EventLog, budget: Optional[CrowdBudget] = None
                ) -> dict[str, Any]:
    labels_used = len(log.labels)
    outputs = len(log.consumer_records())
    curve = [(c.labels_used, c.auc) for c in log.checkpoints if c.auc is not None]
    return {
        "labels_used": labels_used,
        "cost": budget.cost if budget else float(labels_used),
        "labels_per_output": labels_used / outputs if outputs else 0.0,
        "quality_per_cost": curve,
    }


def export_metrics_csv(rows: Sequence[MetricsRecord]) -> str:
    lines = [MetricsRecord.CSV_HEADER]
    lines.extend(r.csv_row() for r in rows)
    return "\n".join(lines) + "\n"
