import json
import os
import random

import pytest

from cspflow.errors import InvalidParams, ParseError
from cspflow.harness import (
    ScenarioConfig,
    generate_dataset,
    load_dataset,
    measure_capacity,
    replay_feed,
    rerun_manifest,
    run_scenario,
    sweep,
    write_dataset,
)
from cspflow.learning import FeatureVector, LabeledExample, auc, train_model, \
    class_posteriors, extract_features
from cspflow.core import DataItem


def small_quality_cfg(out=None, seed=5, n=600, dedup=False, mode="passive"):
    return ScenarioConfig(
        name="small",
        topology="aidr",
        dataset={"generate": {"n": n, "vocab_per_class": 300,
                              "shared_vocab": 200, "noise": 0.2,
                              "retweet_fraction": 1 / 3,
                              "near_dup_fraction": 0.2}},
        rate=20.0,
        seed=seed,
        crowd={"enabled": True, "source": "simulated",
               "workers": {"count": 30, "accuracy": 0.9},
               "aggregation": {"min_labels": 3, "agreement": 0.6,
                               "max_labels": 5}},
        learning={"mode": mode, "dedup": dedup, "retrain_every": 50,
                  "round_ms": 1000.0, "batch": 2},
        drain_ms=45_000.0,
        out=out,
    )


class TestGenerateDataset:
    def test_same_seed_byte_identical(self, tmp_path):
        params = {"n": 500, "seed": 11}
        p1, p2 = tmp_path / "d1.jsonl", tmp_path / "d2.jsonl"
        generate_dataset(params, str(p1))
        generate_dataset(params, str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_retweet_count_near_third(self):
        records = generate_dataset({"n": 3000, "retweet_fraction": 1 / 3,
                                    "seed": 2})
        retweets = sum(1 for r in records if r.is_retweet)
        assert abs(retweets - 1000) <= 50

    def test_retweets_are_prefixed_copies(self):
        records = generate_dataset({"n": 400, "seed": 3})
        by_text = {r.text: r for r in records if not r.is_retweet}
        for r in records:
            if r.is_retweet:
                base = r.text[3:]
                assert r.text.startswith("RT ")
                assert base in by_text
                assert by_text[base].gold_label == r.gold_label

    def test_noise_zero_trains_high_auc_classifier(self):
        records = generate_dataset({"n": 600, "noise": 0.0, "seed": 4,
                                    "retweet_fraction": 0.0,
                                    "near_dup_fraction": 0.0})
        classes = ["informative", "not_informative"]

        def example(r):
            item = DataItem(r.id, r.text, 0.0, frozenset({r.id}), {})
            return LabeledExample(r.id, extract_features(item), r.gold_label)

        train = [example(r) for r in records[:100]]
        test = [example(r) for r in records[100:400]]
        model = train_model(train, classes, version=1)
        scored = [(class_posteriors(model, ex.features)["informative"],
                   ex.label == "informative") for ex in test]
        assert auc(scored) > 0.95

    def test_invalid_params(self):
        with pytest.raises(InvalidParams):
            generate_dataset({"n": 0})
        with pytest.raises(InvalidParams):
            generate_dataset({"n": 10, "noise": 1.5})
        with pytest.raises(InvalidParams):
            generate_dataset({"n": 10, "retweet_fraction": 0.6,
                              "near_dup_fraction": 0.6})

    def test_ids_unique_and_ts_monotone(self):
        records = generate_dataset({"n": 1000, "seed": 6})
        ids = [r.id for r in records]
        assert len(set(ids)) == len(ids)
        ts = [r.ts_ms for r in records]
        assert ts == sorted(ts)


class TestLoadDataset:
    def test_round_trip(self, tmp_path):
        records = generate_dataset({"n": 50, "seed": 7})
        path = tmp_path / "d.jsonl"
        write_dataset(records, str(path))
        loaded = load_dataset(str(path))
        assert [(r.id, r.text) for r in loaded] == \
            [(r.id, r.text) for r in records]

    def test_parse_error_carries_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        lines = [json.dumps({"id": f"t{i}", "text": "x", "ts_ms": i,
                             "gold_label": None, "is_retweet": False})
                 for i in range(10)]
        lines[6] = "{not json"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError) as err:
            load_dataset(str(path))
        assert err.value.line_no == 7


class TestReplay:
    def test_rate_ten_hundred_items_spans_ten_seconds(self):
        records = generate_dataset({"n": 100, "seed": 1})
        feed = replay_feed(records, 10.0)
        assert feed.plan == [(10.0, 100)]
        assert feed.gap_after(0) == 100.0
        # emission k at k * 100ms: the last lands at 9.9s, the run spans 10s
        total = sum(feed.gap_after(i) for i in range(100))
        assert total == pytest.approx(10_000.0)

    def test_sandy_peak_rate_as_plan_point(self):
        records = generate_dataset({"n": 540, "seed": 1})
        feed = replay_feed(records, [(270.0, 540)])
        assert feed.gap_after(0) == pytest.approx(1000.0 / 270.0)


class TestRunScenario:
    def test_outputs_written_and_quality_rows(self, tmp_path):
        out = tmp_path / "run1"
        result = run_scenario(small_quality_cfg(out=str(out)))
        assert result.conservation.exact
        for name in ("metrics.csv", "quality_curve.csv", "label_log.csv",
                     "shed.csv", "manifest.json"):
            assert (out / name).exists(), name
        curve = (out / "quality_curve.csv").read_text().strip().splitlines()
        assert curve[0] == "labels_used,train_count,test_count,auc,mode,dedup"
        assert len(curve) >= 2  # at least one retrain checkpoint
        models = list((out / "models").glob("model_v*.json"))
        assert models

    def test_manifest_rerun_byte_identical(self, tmp_path):
        out1 = tmp_path / "a"
        run_scenario(small_quality_cfg(out=str(out1)))
        manifest = json.loads((out1 / "manifest.json").read_text())
        manifest["scenario"]["out"] = str(tmp_path / "b")
        (out1 / "manifest.json").write_text(json.dumps(manifest))
        rerun_manifest(str(out1 / "manifest.json"))
        for name in ("metrics.csv", "quality_curve.csv", "label_log.csv",
                     "shed.csv"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes(), name

    def test_unknown_scenario_key_rejected(self):
        with pytest.raises(InvalidParams):
            ScenarioConfig.from_mapping({"bogus": 1})


class TestSweep:
    def test_capacity_and_underload_overload(self, tmp_path):
        cfg = ScenarioConfig(
            name="sweeptest",
            topology="aidr",
            dataset={"generate": {"n": 4000, "vocab_per_class": 150,
                                  "shared_vocab": 100}},
            rate=100.0,
            seed=1,
            crowd={"enabled": False},
            learning={},
            duration_ms=2000.0,
        )
        capacity = measure_capacity(cfg, probe_rate=4000.0,
                                    duration_ms=1000.0)
        assert capacity == pytest.approx(500.0, rel=0.05)
        rows = sweep(cfg, [capacity * 0.5, capacity * 2.0],
                     out_dir=str(tmp_path / "sw"))
        under, over = rows
        assert under.shed_count == 0
        assert under.throughput == pytest.approx(capacity * 0.5, rel=0.05)
        assert over.shed_count > 0
        assert over.throughput == pytest.approx(capacity, rel=0.1)
        assert (tmp_path / "sw" / "sweep.csv").exists()
