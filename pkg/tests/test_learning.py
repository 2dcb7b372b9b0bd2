import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from cspflow.core import DataItem
from cspflow.errors import (
    EmptyAfterDedup,
    NonTextPayload,
    SingleClassTestSet,
    UnknownClass,
    UntrainedModel,
)
from cspflow.learning import (
    ClassifierModel,
    FeatureVector,
    LabeledExample,
    LearnerConfig,
    LearnerState,
    SampleBuffer,
    auc,
    class_posteriors,
    extract_features,
    jaccard,
    near_duplicate,
    predict,
    select_for_labeling,
    train_model,
)


def item(iid, text, **attrs):
    return DataItem(item_id=iid, payload=text, ingest_ts=0.0,
                    lineage=frozenset({iid}), attributes=attrs)


def fv(iid, **terms):
    return FeatureVector(item_id=iid, terms=dict(terms))


class TestExtractFeatures:
    def test_unigrams_and_bigrams(self):
        out = extract_features(item("x", "Tornado hits Joplin"))
        assert out.terms == {"tornado": 1, "hits": 1, "joplin": 1,
                             "tornado_hits": 1, "hits_joplin": 1}

    def test_repeated_token(self):
        assert extract_features(item("x", "a a")).terms == {"a": 2, "a_a": 1}

    def test_punctuation_split_and_lowercase(self):
        out = extract_features(item("x", "Help! Water, water."))
        assert out.terms["water"] == 2
        assert "help_water" in out.terms

    def test_empty_payload_gives_empty_vector(self):
        out = extract_features(item("x", ""))
        assert out.empty

    def test_non_text_payload(self):
        with pytest.raises(NonTextPayload):
            extract_features(item("x", 123))


class TestNearDuplicate:
    def test_identical_text_jaccard_one(self):
        buf = SampleBuffer(10)
        a = item("a", "flood in the city")
        near_duplicate(a, buf, 0.7)
        assert near_duplicate(item("b", "flood in the city"), buf, 0.7)

    def test_disjoint_vocabulary(self):
        buf = SampleBuffer(10)
        near_duplicate(item("a", "alpha beta"), buf, 0.1)
        assert not near_duplicate(item("b", "gamma delta"), buf, 0.1)

    def test_hand_computed_overlap(self):
        # {a,b,c} vs {a,b,d}: |A∩B| / |A∪B| = 2/4 = 0.5, at threshold -> dup
        assert jaccard(frozenset("abc"), frozenset("abd")) == 0.5
        buf = SampleBuffer(10)
        near_duplicate(item("x", "a b c"), buf, 0.5)
        assert near_duplicate(item("y", "a b d"), buf, 0.5)

    def test_signature_evicted_with_buffer(self):
        buf = SampleBuffer(2)
        near_duplicate(item("a", "one two three"), buf, 0.7)
        near_duplicate(item("b", "four five six"), buf, 0.7)
        near_duplicate(item("c", "seven eight nine"), buf, 0.7)  # evicts a
        assert not near_duplicate(item("a2", "one two three"), buf, 0.7)

    def test_recall_while_signature_buffered(self):
        buf = SampleBuffer(100)
        near_duplicate(item("a", "water shortage downtown"), buf, 0.7)
        for i in range(20):
            assert near_duplicate(item(f"r{i}", "water shortage downtown"),
                                  buf, 0.7)


class TestSelectForLabeling:
    def fill(self, buf, n=5, conf=None):
        for i in range(n):
            it = item(f"i{i}", f"tok{i} toka{i} tokb{i}",
                      confidence=None if conf is None else conf[i])
            near_duplicate(it, buf, 0.7)

    def test_active_takes_lowest_confidence(self):
        buf = SampleBuffer(10)
        self.fill(buf, 3, conf=[0.51, 0.99, 0.60])
        chosen = select_for_labeling(buf, "active", False, 1)
        assert [e.item.item_id for e in chosen] == ["i0"]

    def test_active_tie_breaks_to_oldest(self):
        buf = SampleBuffer(10)
        self.fill(buf, 3, conf=[0.6, 0.6, 0.6])
        chosen = select_for_labeling(buf, "active", False, 2)
        assert [e.item.item_id for e in chosen] == ["i0", "i1"]

    def test_passive_full_buffer_is_seeded_shuffle(self):
        buf = SampleBuffer(10)
        self.fill(buf, 5)
        rng = random.Random(3)
        chosen = select_for_labeling(buf, "passive", False, 5, rng=rng)
        ids = [e.item.item_id for e in chosen]
        assert sorted(ids) == [f"i{i}" for i in range(5)]
        rng2 = random.Random(3)
        buf2 = SampleBuffer(10)
        self.fill(buf2, 5)
        assert [e.item.item_id
                for e in select_for_labeling(buf2, "passive", False, 5,
                                             rng=rng2)] == ids

    def test_selected_items_leave_candidacy(self):
        buf = SampleBuffer(10)
        self.fill(buf, 3, conf=[0.1, 0.2, 0.3])
        select_for_labeling(buf, "active", False, 1)
        second = select_for_labeling(buf, "active", False, 1)
        assert [e.item.item_id for e in second] == ["i1"]

    def test_dedup_shrinks_candidates(self):
        buf = SampleBuffer(20)
        texts = ["storm one reports", "storm two reports",
                 "flood three warning", "flood four warning"]
        for i, t in enumerate(texts):
            near_duplicate(item(f"o{i}", t), buf, 0.7)
        # four exact duplicates of earlier entries
        for i in range(4):
            near_duplicate(item(f"d{i}", texts[i]), buf, 0.7)
        candidates = buf.candidates(dedup=True)
        assert len(candidates) <= 6
        assert all(not e.duplicate for e in candidates)

    def test_empty_after_dedup(self):
        buf = SampleBuffer(10)
        near_duplicate(item("a", "same text here"), buf, 0.7)
        dup = select_for_labeling(buf, "passive", True, 1)  # first is unique
        assert dup
        near_duplicate(item("b", "same text here"), buf, 0.7)
        with pytest.raises(EmptyAfterDedup):
            select_for_labeling(buf, "passive", True, 1)


def brute_force_posteriors(train, classes, terms):
    """Independent naive Bayes oracle: direct probability products with
    add-one smoothing over the training vocabulary."""
    from fractions import Fraction

    vocab = sorted({t for ex in train for t in ex.features.terms})
    totals = {c: 0 for c in classes}
    counts = {c: {} for c in classes}
    n_class = {c: 0 for c in classes}
    for ex in train:
        n_class[ex.label] += 1
        for t, k in ex.features.terms.items():
            counts[ex.label][t] = counts[ex.label].get(t, 0) + k
            totals[ex.label] += k
    joint = {}
    for c in classes:
        p = Fraction(n_class[c] + 1, sum(n_class.values()) + len(classes))
        for t, k in terms.items():
            if t not in vocab:
                continue
            p *= Fraction(counts[c].get(t, 0) + 1,
                          totals[c] + len(vocab)) ** k
        joint[c] = p
    z = sum(joint.values())
    return {c: float(v / z) for c, v in joint.items()}


class TestClassifier:
    def toy_training(self):
        return [
            LabeledExample("a1", fv("a1", storm=2, wind=1), "weather"),
            LabeledExample("a2", fv("a2", rain=1, storm=1), "weather"),
            LabeledExample("a3", fv("a3", flood=2, rain=1), "weather"),
            LabeledExample("b1", fv("b1", game=2, goal=1), "sports"),
            LabeledExample("b2", fv("b2", team=1, game=1), "sports"),
            LabeledExample("b3", fv("b3", score=2, team=1), "sports"),
            LabeledExample("c1", fv("c1", vote=2, poll=1), "politics"),
            LabeledExample("c2", fv("c2", party=1, vote=1), "politics"),
            LabeledExample("c3", fv("c3", poll=2, party=1), "politics"),
        ]

    def test_separable_single_example_per_class(self):
        train = [LabeledExample("a", fv("a", sunny=3), "pos"),
                 LabeledExample("b", fv("b", gloomy=3), "neg")]
        model = train_model(train, ["pos", "neg"], version=1)
        label, conf = predict(model, fv("t", sunny=3))
        assert label == "pos"
        assert conf > 0.5

    def test_empty_vector_prior_only(self):
        train = [LabeledExample("a", fv("a", x=1), "pos")] * 3 + \
            [LabeledExample("b", fv("b", y=1), "neg")]
        model = train_model(train, ["pos", "neg"], version=1)
        label, conf = predict(model, fv("t"))
        assert label == "pos"
        assert conf == pytest.approx((3 + 1) / (4 + 2))

    def test_untrained_model_rejected(self):
        model = ClassifierModel(version=0, classes=("a", "b"),
                                class_counts={}, term_counts={},
                                term_totals={}, vocabulary=frozenset(),
                                trained_on=0)
        with pytest.raises(UntrainedModel):
            predict(model, fv("t", x=1))

    def test_against_brute_force_oracle(self):
        train = self.toy_training()
        classes = ["weather", "sports", "politics"]
        model = train_model(train, classes, version=1)
        probes = [
            {"storm": 1, "rain": 1},
            {"game": 1, "vote": 1},
            {"poll": 2, "team": 1, "flood": 1},
            {"unknownterm": 5, "storm": 1},
            {},
        ]
        for terms in probes:
            expected = brute_force_posteriors(train, classes, terms)
            got = class_posteriors(model, FeatureVector("t", dict(terms)))
            for c in classes:
                assert got[c] == pytest.approx(expected[c], abs=1e-9)

    def test_unknown_class_rejected(self):
        with pytest.raises(UnknownClass):
            train_model([LabeledExample("a", fv("a", x=1), "mystery")],
                        ["pos", "neg"], version=1)

    def test_snapshot_round_trip(self):
        model = train_model(self.toy_training(),
                            ["weather", "sports", "politics"], version=4)
        restored = ClassifierModel.from_json(model.to_json())
        probe = fv("t", storm=1, game=1)
        assert class_posteriors(restored, probe) == \
            class_posteriors(model, probe)
        assert restored.version == 4


class TestLearnerState:
    def run_labels(self, n, cfg=None):
        state = LearnerState(cfg or LearnerConfig(classes=("pos", "neg"),
                                                  positive_class="pos"))
        rng = random.Random(0)
        for i in range(n):
            label = "pos" if rng.random() < 0.5 else "neg"
            term = "good" if label == "pos" else "bad"
            state.ingest_label(LabeledExample(f"x{i}", fv(f"x{i}", **{term: 2}),
                                              label))
        return state

    def test_63_labels_split(self):
        state = self.run_labels(63)
        assert state.train_seen == 51
        assert state.test_seen == 12
        assert state.version == 1  # retrain fired at train count 50

    def test_49_labels_no_model(self):
        state = self.run_labels(49)
        assert state.version == 0
        assert state.model is None

    def test_100_train_labels_two_retrains(self):
        state = self.run_labels(125)  # 100 train / 25 test
        assert state.train_seen == 100
        assert state.version == 2
        assert [c.train_count for c in state.checkpoints] == [50, 100]

    def test_test_positions_are_multiples_of_five(self):
        state = LearnerState(LearnerConfig(classes=("pos", "neg")))
        test_positions = []
        for i in range(1, 101):
            ex = LabeledExample(f"x{i}", fv(f"x{i}", t=1), "pos")
            state.ingest_label(ex)
            if ex.split == "test":
                test_positions.append(i)
        assert test_positions == list(range(5, 101, 5))

    def test_retrain_count_invariant(self):
        state = LearnerState(LearnerConfig(classes=("pos", "neg")))
        for i in range(1, 400):
            state.ingest_label(LabeledExample(f"x{i}", fv(f"x{i}", t=1),
                                              "pos" if i % 2 else "neg"))
            assert state.version == state.train_seen // 50

    def test_unknown_class(self):
        state = LearnerState(LearnerConfig(classes=("pos", "neg")))
        with pytest.raises(UnknownClass):
            state.ingest_label(LabeledExample("x", fv("x", t=1), "other"))


def brute_force_auc(scored):
    """O(n^2) pairwise oracle: wins plus half-ties over all pos/neg pairs."""
    pos = [s for s, is_pos in scored if is_pos]
    neg = [s for s, is_pos in scored if not is_pos]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


class TestAuc:
    def test_perfect_separation(self):
        assert auc([(0.9, True), (0.1, False)]) == 1.0

    def test_all_scores_equal_is_half(self):
        assert auc([(0.5, True), (0.5, False), (0.5, True),
                    (0.5, False)]) == 0.5

    def test_six_point_mixed_set(self):
        scored = [(0.9, True), (0.8, False), (0.7, True), (0.7, False),
                  (0.3, True), (0.1, False)]
        assert auc(scored) == brute_force_auc(scored)

    def test_single_class_undefined(self):
        with pytest.raises(SingleClassTestSet):
            auc([(0.4, True), (0.6, True)])

    def test_thousand_random_sets_match_oracle_exactly(self):
        rng = random.Random(99)
        for trial in range(1000):
            n = rng.randint(2, 50)
            scored = [(rng.choice([rng.random(),
                                   round(rng.random(), 1)]),  # force ties
                       rng.random() < 0.5) for _ in range(n)]
            if not any(p for _, p in scored) or all(p for _, p in scored):
                continue
            assert auc(scored) == brute_force_auc(scored), (trial, scored)

    @given(st.lists(st.tuples(st.floats(0, 1, allow_nan=False),
                              st.booleans()), min_size=2, max_size=30))
    @settings(max_examples=200)
    def test_rank_invariance_under_monotone_transform(self, scored):
        if not any(p for _, p in scored) or all(p for _, p in scored):
            return
        base = auc(scored)
        # map scores onto squared ranks: strictly monotone and exact in
        # floats, unlike exp/affine transforms which can collapse tiny gaps
        ordered = {s: i for i, s in enumerate(sorted({s for s, _ in scored}))}
        ranked = [(float(ordered[s] ** 2), p) for s, p in scored]
        scaled = [(s * 8.0, p) for s, p in scored]
        assert auc(ranked) == pytest.approx(base, abs=1e-12)
        assert auc(scaled) == pytest.approx(base, abs=1e-12)
