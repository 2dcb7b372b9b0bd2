import json
import threading
import time
import urllib.error
import urllib.request

import pytest

from cspflow.crowd import TaskPool
from cspflow.harness import ScenarioConfig, prepare_scenario, finish_scenario
from cspflow.service import AnnotatorService


def api(url, method="GET", body=None):
    data = None if body is None else json.dumps(body).encode()
    req = urllib.request.Request(url, data=data, method=method,
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=5) as resp:
            return resp.status, json.loads(resp.read() or b"{}")
    except urllib.error.HTTPError as err:
        return err.code, json.loads(err.read() or b"{}")


def wall_scenario():
    return ScenarioConfig(
        name="service-test",
        topology="aidr",
        dataset={"generate": {"n": 2000, "vocab_per_class": 150,
                              "shared_vocab": 100}},
        rate=100.0,
        seed=1,
        mode="wall",
        crowd={"enabled": True, "source": "http", "open_task_cap": 128,
               "aggregation": {"min_labels": 2, "agreement": 0.5,
                               "max_labels": 3}},
        learning={"mode": "passive", "dedup": False, "retrain_every": 5,
                  "test_every": 5, "round_ms": 100.0, "batch": 4},
    )


@pytest.fixture()
def live_service():
    pool = TaskPool()
    prep = prepare_scenario(wall_scenario(), pool)
    stop = threading.Event()
    service = AnnotatorService(pool, prep.engine,
                               annotator_pe=prep.annotator_pe(),
                               port=0).start()
    runner = threading.Thread(
        target=lambda: prep.engine.run(until_ms=None, stop_event=stop),
        daemon=True)
    runner.start()
    try:
        yield service
    finally:
        stop.set()
        runner.join(timeout=10)
        service.stop()


def wait_for_task(url, worker, timeout=15.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        status, body = api(f"{url}/api/tasks/next?worker_id={worker}")
        if status == 200:
            return body
        assert status == 429
        assert body["retry_after_ms"] > 0
        time.sleep(0.1)
    raise AssertionError("no task became available")


class TestAnnotatorService:
    def test_health(self, live_service):
        status, body = api(f"{live_service.url}/api/health")
        assert status == 200 and body["status"] == "ok"

    def test_429_before_tasks_exist(self):
        pool = TaskPool()
        service = AnnotatorService(pool, None, port=0).start()
        try:
            status, body = api(f"{service.url}/api/tasks/next?worker_id=w1")
            assert status == 429
            assert "retry_after_ms" in body
        finally:
            service.stop()

    def test_label_flow_two_workers_aggregate(self, live_service):
        url = live_service.url
        task = wait_for_task(url, "alice")
        assert set(task) >= {"task_id", "item_id", "question", "options",
                             "priority"}
        tid = task["task_id"]

        status, _ = api(f"{url}/api/tasks/{tid}/label", "POST",
                        {"worker_id": "alice", "answer": 0,
                         "client_latency_ms": 1200})
        assert status == 200

        # same worker again: duplicate
        status, _ = api(f"{url}/api/tasks/{tid}/label", "POST",
                        {"worker_id": "alice", "answer": 1})
        assert status == 409

        # second worker decides it (min_labels=2, agreement 0.5)
        status, _ = api(f"{url}/api/tasks/{tid}/label", "POST",
                        {"worker_id": "bob", "answer": 0})
        assert status == 200

        deadline = time.time() + 10
        while time.time() < deadline:
            if live_service.pool.status_of(tid).value != "open":
                break
            time.sleep(0.05)
        status, _ = api(f"{url}/api/tasks/{tid}/label", "POST",
                        {"worker_id": "carol", "answer": 0})
        assert status == 410

        engine = live_service.engine
        assert any(r.task_id == tid for r in engine.recorder.labels)

    def test_unknown_task_404(self, live_service):
        status, _ = api(f"{live_service.url}/api/tasks/nope/label", "POST",
                        {"worker_id": "w", "answer": 0})
        assert status == 404

    def test_stats_shape(self, live_service):
        status, body = api(f"{live_service.url}/api/stats")
        assert status == 200
        assert set(body) >= {"labels_total", "tasks_open", "auc_latest",
                             "model_version", "throughput_now"}

    def test_option_string_answers_accepted(self, live_service):
        url = live_service.url
        task = wait_for_task(url, "dana")
        status, _ = api(f"{url}/api/tasks/{task['task_id']}/label", "POST",
                        {"worker_id": "dana", "answer": task["options"][0]})
        assert status == 200

    def test_model_version_moves_with_labels(self, live_service):
        url = live_service.url
        for i in range(30):
            worker = f"labeler{i % 3}"
            status, body = api(f"{url}/api/tasks/next?worker_id={worker}")
            if status != 200:
                time.sleep(0.15)
                continue
            api(f"{url}/api/tasks/{body['task_id']}/label", "POST",
                {"worker_id": worker, "answer": 0})
        deadline = time.time() + 20
        version = 0
        while time.time() < deadline:
            _, stats = api(f"{url}/api/stats")
            version = stats["model_version"]
            if version >= 1:
                break
            # keep labeling until the retrain cadence fires
            status, body = api(f"{url}/api/tasks/next?worker_id=more")
            if status == 200:
                api(f"{url}/api/tasks/{body['task_id']}/label", "POST",
                    {"worker_id": "more", "answer": 0})
            time.sleep(0.05)
        assert version >= 1
