"""Command line entry points: generate, run, sweep, check, serve, plot."""

from __future__ import annotations

import glob as globlib
import json
import logging
import os
import sys
import threading

import click

from . import __version__
from .harness import (
    ScenarioConfig,
    generate_dataset,
    prepare_scenario,
    finish_scenario,
    measure_capacity,
    run_scenario,
    sweep as run_sweep,
)
from .crowd import TaskPool
from .patterns import (
    Pattern,
    check_human_mandatory,
    check_human_optional,
    classify_composition,
)
from .harness import resolve_topology


def _setup_logging() -> None:
    level = os.environ.get("CSPFLOW_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s")


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Crowd-augmented stream processing runner."""
    _setup_logging()


@main.command()
@click.option("--n", default=3000, show_default=True)
@click.option("--noise", default=0.2, show_default=True)
@click.option("--vocab-per-class", default=600, show_default=True)
@click.option("--retweet-fraction", default=1 / 3, show_default=True)
@click.option("--near-dup-fraction", default=0.25, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def generate(n, noise, vocab_per_class, retweet_fraction, near_dup_fraction,
             seed, out) -> None:
    """Write a synthetic labeled message stream as JSON lines."""
    records = generate_dataset({
        "n": n, "noise": noise, "vocab_per_class": vocab_per_class,
        "retweet_fraction": retweet_fraction,
        "near_dup_fraction": near_dup_fraction, "seed": seed,
    }, path=out)
    retweets = sum(1 for r in records if r.is_retweet)
    click.echo(f"wrote {len(records)} records ({retweets} retweets) to {out}")


def _load_scenario(config, seed, rate, mode, out) -> ScenarioConfig:
    cfg = ScenarioConfig.from_yaml(config)
    if seed is not None:
        cfg.seed = seed
    if rate is not None:
        cfg.rate = rate
    if mode is not None:
        cfg.mode = mode
    if out is not None:
        cfg.out = out
    return cfg


@main.command()
@click.option("--config", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--rate", type=float, default=None)
@click.option("--mode", type=click.Choice(["virtual", "wall"]), default=None)
@click.option("--out", type=click.Path(), default=None)
def run(config, seed, rate, mode, out) -> None:
    """Run one scenario and print its metrics row."""
    cfg = _load_scenario(config, seed, rate, mode, out)
    result = run_scenario(cfg)
    m = result.metrics
    click.echo(f"rate={m.input_rate:.1f}/s throughput={m.throughput:.1f}/s "
               f"p50={m.latency_p50 or 0:.1f}ms p95={m.latency_p95 or 0:.1f}ms "
               f"shed={m.shed_count} labels={m.labels_used} "
               f"auc={'n/a' if m.auc is None else f'{m.auc:.3f}'}")
    if not result.conservation.exact:
        click.echo("warning: flow conservation not exact "
                   f"{result.conservation.counts()}", err=True)
        sys.exit(2)


@main.command()
@click.option("--config", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), required=True)
@click.option("--multipliers", default="0.25,0.5,1,2,4", show_default=True,
              help="Rates as multiples of measured capacity.")
def sweep(config, seed, out, multipliers) -> None:
    """Measure capacity, then run the load sweep across rate multiples."""
    cfg = _load_scenario(config, seed, None, None, None)
    cfg.crowd = dict(cfg.crowd)
    cfg.crowd["enabled"] = False
    capacity = measure_capacity(cfg)
    click.echo(f"measured capacity: {capacity:.1f} items/s")
    rates = [capacity * float(m) for m in multipliers.split(",")]
    rows = run_sweep(cfg, rates, out_dir=out)
    for row in rows:
        click.echo(f"  rate={row.input_rate:8.1f}/s -> "
                   f"throughput={row.throughput:8.1f}/s "
                   f"p95={row.latency_p95 or 0:7.1f}ms shed={row.shed_count}")
    click.echo(f"sweep written to {out}/sweep.csv")


@main.command()
@click.option("--pattern", "pattern_name", required=True,
              type=click.Choice(["human_optional", "human_mandatory",
                                 "composition"]))
@click.argument("topology_path")
def check(pattern_name, topology_path) -> None:
    """Check a structural property of a topology; exit 0 when it holds."""
    topology = resolve_topology(topology_path)
    if pattern_name == "composition":
        click.echo(classify_composition(topology).value)
        return
    checker = (check_human_optional if pattern_name == "human_optional"
               else check_human_mandatory)
    holds, path = checker(topology)
    if holds:
        click.echo(f"{pattern_name}: holds")
        if path:
            click.echo("witness: " + " -> ".join(path))
        sys.exit(0)
    click.echo(f"{pattern_name}: violated")
    if path:
        click.echo("counterexample: " + " -> ".join(path))
    sys.exit(1)


@main.command()
@click.option("--config", required=True, type=click.Path(exists=True))
@click.option("--serve-addr", default="127.0.0.1:8808", show_default=True)
@click.option("--static-dir", type=click.Path(), default=None,
              help="Directory of labeling UI assets (frontend/dist).")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
def serve(config, serve_addr, static_dir, seed, out) -> None:
    """Run a wall-clock scenario with the annotator HTTP service attached."""
    from .service import AnnotatorService

    cfg = _load_scenario(config, seed, None, "wall", out)
    pool = TaskPool()
    prep = prepare_scenario(cfg, pool)
    annotator = prep.annotator_pe()
    if annotator is None:
        raise click.ClickException("topology has no crowd_annotate PE")
    host, _, port = serve_addr.partition(":")
    service = AnnotatorService(pool, prep.engine, annotator_pe=annotator,
                               static_dir=static_dir, bind=host or "127.0.0.1",
                               port=int(port or 8808)).start()
    click.echo(f"annotator service: {service.url}  (Ctrl-C stops)")
    stop = threading.Event()
    try:
        result = prep.engine.run(until_ms=None, stop_event=stop)
    except KeyboardInterrupt:
        stop.set()
        result = None
        click.echo("stopping...")
    finally:
        service.stop()
    if result is not None:
        finish_scenario(prep, result)
        click.echo(f"labels collected: {len(result.log.labels)}")


@main.command()
@click.option("--sweep-csv", "sweep_csv", type=click.Path(exists=True),
              default=None, help="sweep.csv from the sweep command.")
@click.option("--quality-glob", default=None,
              help="Glob of quality_curve.csv files.")
@click.option("--out", type=click.Path(), required=True)
def plot(sweep_csv, quality_glob, out) -> None:
    """Render the load-response and quality-vs-labels figures as SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import csv

    os.makedirs(out, exist_ok=True)
    made = []
    if sweep_csv:
        rates, tps, p50s, p95s = [], [], [], []
        with open(sweep_csv, encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                rates.append(float(row["rate"]))
                tps.append(float(row["throughput"]))
                p50s.append(float(row["latency_p50"] or 0))
                p95s.append(float(row["latency_p95"] or 0))
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(rates, tps, marker="o")
        ax.set_xlabel("offered load (items/s)")
        ax.set_ylabel("throughput (items/s)")
        ax.set_title("Throughput vs offered load")
        fig.savefig(os.path.join(out, "throughput_vs_load.svg"))
        plt.close(fig)
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(rates, p50s, marker="o", label="p50")
        ax.plot(rates, p95s, marker="s", label="p95")
        ax.set_xlabel("offered load (items/s)")
        ax.set_ylabel("latency (ms)")
        ax.set_title("Latency vs offered load")
        ax.legend()
        fig.savefig(os.path.join(out, "latency_vs_load.svg"))
        plt.close(fig)
        made += ["throughput_vs_load.svg", "latency_vs_load.svg"]
    if quality_glob:
        fig, ax = plt.subplots(figsize=(6, 4))
        for path in sorted(globlib.glob(quality_glob)):
            xs, ys, label = [], [], os.path.basename(os.path.dirname(path))
            with open(path, encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    if row["auc"]:
                        xs.append(int(row["labels_used"]))
                        ys.append(float(row["auc"]))
            if xs:
                ax.plot(xs, ys, marker=".", label=label or path)
        ax.set_xlabel("training labels used")
        ax.set_ylabel("test AUC")
        ax.set_ylim(0.4, 1.0)
        ax.set_title("Classification quality vs labeling cost")
        ax.legend(fontsize=7)
        fig.savefig(os.path.join(out, "quality_vs_labels.svg"))
        plt.close(fig)
        made.append("quality_vs_labels.svg")
    click.echo(f"wrote {', '.join(made) or 'nothing'} to {out}")


if __name__ == "__main__":
    main()
