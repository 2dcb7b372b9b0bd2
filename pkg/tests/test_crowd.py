import itertools
import random
from collections import Counter

import pytest

from cspflow.core import DataItem
from cspflow.crowd import (
    AggregationConfig,
    BudgetMode,
    CrowdBudget,
    CrowdTask,
    LabelRecord,
    OutcomeStatus,
    TaskKind,
    TaskTemplate,
    WorkerModel,
    aggregate,
    assign_task,
    crowd_capacity,
    generate_task,
    simulate_label,
    update_trust,
)
from cspflow.errors import (
    BudgetExhausted,
    ForeignLabel,
    NoEligibleWorker,
    TemplateMismatch,
)

BINARY = TaskTemplate(TaskKind.BINARY, "Informative? {text}",
                      ["informative", "not_informative"])


def make_item(iid="m1", text="water needed in joplin", gold="informative"):
    return DataItem(item_id=iid, payload=text, ingest_ts=0.0,
                    lineage=frozenset({iid}), attributes={"gold": gold})


def make_task(options=("A", "B", "C"), kind=TaskKind.N_ARY, gold="A"):
    return CrowdTask(task_id="t1", item_id="m1", task_kind=kind,
                     question="q", options=list(options), created_ts=0.0,
                     required_labels=3, gold=gold)


def label(answer, worker="w1", task_id="t1"):
    return LabelRecord(task_id=task_id, worker_id=worker, answer=answer,
                       submitted_ts=0.0, latency_ms=0.0)


class TestGenerateTask:
    def test_binary_template(self):
        task = generate_task(make_item(), BINARY, task_id="t1",
                             created_ts=3.0, required_labels=3)
        assert task.task_kind is TaskKind.BINARY
        assert task.options == ["informative", "not_informative"]
        assert "water needed in joplin" in task.question
        assert task.required_labels == 3

    def test_nary_with_one_option_mismatch(self):
        template = TaskTemplate(TaskKind.N_ARY, "q", ["only"])
        with pytest.raises(TemplateMismatch):
            generate_task(make_item(), template, task_id="t", created_ts=0,
                          required_labels=3)

    def test_data_entry_has_no_options(self):
        template = TaskTemplate(TaskKind.DATA_ENTRY, "transcribe: {text}")
        task = generate_task(make_item(), template, task_id="t",
                             created_ts=0, required_labels=1)
        assert task.options == []


class TestAssignTask:
    def test_skill_based_argmax(self):
        workers = [WorkerModel("w1", skills={"n_ary": 0.9}),
                   WorkerModel("w2", skills={"n_ary": 0.4})]
        assert assign_task(make_task(), workers, "skill_based") == "w1"

    def test_skill_tie_breaks_to_lowest_id(self):
        workers = [WorkerModel("w2", skills={"n_ary": 0.7}),
                   WorkerModel("w1", skills={"n_ary": 0.7})]
        assert assign_task(make_task(), workers, "skill_based") == "w1"

    def test_already_labeled_leaves_no_one(self):
        workers = [WorkerModel("w1")]
        with pytest.raises(NoEligibleWorker):
            assign_task(make_task(), workers, "any", answered={"w1"})

    def test_capped_worker_not_eligible(self):
        workers = [WorkerModel("w1", max_labels=2)]
        workers[0].labels_given = 2
        with pytest.raises(NoEligibleWorker):
            assign_task(make_task(), workers, "any")

    def test_any_policy_covers_both_workers(self):
        rng = random.Random(42)
        workers = [WorkerModel("w1", max_labels=10 ** 6),
                   WorkerModel("w2", max_labels=10 ** 6)]
        counts = Counter(assign_task(make_task(), workers, "any", rng=rng)
                         for _ in range(100))
        assert counts["w1"] > 0 and counts["w2"] > 0

    def test_assignment_fairness_within_five_percent(self):
        rng = random.Random(7)
        workers = [WorkerModel(f"w{i}", max_labels=10 ** 9) for i in range(4)]
        counts = Counter(assign_task(make_task(), workers, "any", rng=rng)
                         for _ in range(10_000))
        for w in workers:
            assert abs(counts[w.worker_id] - 2500) < 0.05 * 10_000


class TestSimulateLabel:
    def test_perfect_accuracy_always_gold(self):
        rng = random.Random(1)
        worker = WorkerModel("w1", accuracy=1.0)
        task = make_task(gold="B")
        for _ in range(50):
            rec = simulate_label(task, worker, "B", 0.0, rng=rng)
            assert task.options[rec.answer] == "B"

    def test_zero_accuracy_binary_always_wrong(self):
        rng = random.Random(1)
        worker = WorkerModel("w1", accuracy=0.0, max_labels=10 ** 6)
        task = make_task(options=("yes", "no"), kind=TaskKind.BINARY,
                         gold="yes")
        for _ in range(50):
            rec = simulate_label(task, worker, "yes", 0.0, rng=rng)
            assert task.options[rec.answer] == "no"

    def test_mean_latency_matches_speed(self):
        rng = random.Random(5)
        worker = WorkerModel("w1", speed_mean_ms=9000.0,
                             speed_jitter_ms=2000.0, max_labels=10 ** 6)
        task = make_task()
        draws = [simulate_label(task, worker, "A", 0.0, rng=rng).latency_ms
                 for _ in range(1000)]
        assert abs(sum(draws) / len(draws) - 9000.0) < 500.0

    def test_budget_charged_and_enforced(self):
        rng = random.Random(1)
        budget = CrowdBudget(mode=BudgetMode.FIXED_BUDGET, k=2)
        worker = WorkerModel("w1", max_labels=10 ** 6)
        task = make_task()
        simulate_label(task, worker, "A", 0.0, rng=rng, budget=budget)
        simulate_label(task, worker, "A", 0.0, rng=rng, budget=budget)
        with pytest.raises(BudgetExhausted):
            simulate_label(task, worker, "A", 0.0, rng=rng, budget=budget)
        assert budget.spent == 2

    def test_accuracy_convergence(self):
        rng = random.Random(11)
        worker = WorkerModel("w1", accuracy=0.7, max_labels=10 ** 9)
        task = make_task(gold="A")
        hits = sum(task.options[simulate_label(task, worker, "A", 0.0,
                                               rng=rng).answer] == "A"
                   for _ in range(10_000))
        assert abs(hits / 10_000 - 0.7) < 0.02


def brute_force_plurality(answers, n_options):
    """Independent oracle: plurality with ties to the lowest option index."""
    counts = [0] * n_options
    for a in answers:
        counts[a] += 1
    best = max(counts)
    return counts.index(best)


class TestAggregate:
    def test_majority_decides(self):
        task = make_task(options=("A", "B"), kind=TaskKind.BINARY)
        labels = [label(0, "w1"), label(0, "w2"), label(1, "w3")]
        out = aggregate(task, labels, AggregationConfig(3, 0.6, 5))
        assert out.status is OutcomeStatus.DECIDED
        assert out.decided_label == "A"
        assert out.support == pytest.approx(2 / 3)

    def test_below_min_needs_more(self):
        task = make_task(options=("A", "B"), kind=TaskKind.BINARY)
        out = aggregate(task, [label(0, "w1"), label(1, "w2")],
                        AggregationConfig(3, 0.6, 5))
        assert out.status is OutcomeStatus.NEEDS_MORE
        assert out.decided_label is None

    def test_trust_weighted_hand_computed(self):
        # w1 trust 1.0 votes A; w2, w3 trust 0.2 vote B
        # support(A) = 1.0 / 1.4 which clears the 0.6 agreement bar
        task = make_task(options=("A", "B"), kind=TaskKind.BINARY)
        labels = [label(0, "w1"), label(1, "w2"), label(1, "w3")]
        trust = {"w1": 1.0, "w2": 0.2, "w3": 0.2}
        out = aggregate(task, labels,
                        AggregationConfig(3, 0.6, 5, trust_weighted=True),
                        trust=trust)
        assert out.status is OutcomeStatus.DECIDED
        assert out.decided_label == "A"
        assert out.support == pytest.approx(1.0 / 1.4)

    def test_exhausted_at_cap_takes_top(self):
        task = make_task(options=("A", "B", "C"))
        labels = [label(0, "w1"), label(1, "w2"), label(2, "w3"),
                  label(1, "w4"), label(0, "w5")]
        out = aggregate(task, labels, AggregationConfig(3, 0.9, 5))
        assert out.status is OutcomeStatus.EXHAUSTED
        assert out.decided_label == "A"  # 2-2-1 tie broken to lowest index

    def test_foreign_label(self):
        task = make_task()
        with pytest.raises(ForeignLabel):
            aggregate(task, [label(0, task_id="other")],
                      AggregationConfig(1, 0.5, 5))

    def test_exhaustive_plurality_oracle(self):
        # every label multiset of size <= 5 over 3 options
        task = make_task(options=("A", "B", "C"))
        cfg = AggregationConfig(min_labels=1, agreement=0.0, max_labels=5)
        checked = 0
        for size in range(1, 6):
            for combo in itertools.combinations_with_replacement(range(3),
                                                                 size):
                labels = [label(a, f"w{i}") for i, a in enumerate(combo)]
                out = aggregate(task, labels, cfg)
                expected = brute_force_plurality(combo, 3)
                assert out.decided_label == task.options[expected], combo
                checked += 1
        assert checked == 55


class TestUpdateTrust:
    def decided(self, winner="A"):
        from cspflow.crowd import AggregationOutcome
        return AggregationOutcome("t1", winner, 1.0, 3, OutcomeStatus.DECIDED)

    def test_one_agreement_two_thirds(self):
        worker = WorkerModel("w1")
        assert update_trust(worker, self.decided("A"), 0, ["A", "B"]) == \
            pytest.approx(2 / 3)

    def test_one_disagreement_one_third(self):
        worker = WorkerModel("w1")
        assert update_trust(worker, self.decided("A"), 1, ["A", "B"]) == \
            pytest.approx(1 / 3)

    def test_prior_is_half(self):
        assert WorkerModel("w1").trust == 0.5

    def test_sequence_matches_smoothed_ratio(self):
        worker = WorkerModel("w1")
        agree_pattern = [True, True, False, True, False, False, True]
        agreements = 0
        for i, agrees in enumerate(agree_pattern, start=1):
            answer = 0 if agrees else 1
            update_trust(worker, self.decided("A"), answer, ["A", "B"])
            agreements += agrees
            assert worker.trust == pytest.approx((agreements + 1) / (i + 2))


class TestCrowdCapacity:
    def test_single_worker_nine_seconds(self):
        assert crowd_capacity(1, 9, 1) == 400

    def test_three_thousand_workers(self):
        assert crowd_capacity(3000, 9, 3) == 400_000

    def test_five_hundred_workers(self):
        assert crowd_capacity(500, 9, 3) in (66_666, 66_667)

    def test_positive_inputs_required(self):
        with pytest.raises(ValueError):
            crowd_capacity(0, 9, 3)
