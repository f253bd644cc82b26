"""Experiment orchestration: config -> partition -> fingerprints -> strategies
-> evaluation -> report files.

Stages are wrapped so any failure surfaces as a StageError naming the stage,
and partially written outputs are removed. Suites expand a config grid,
derive a distinct child seed per run, and record per-run failures without
aborting the remaining runs.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .config import ConfigError, DatasetSpec, ExperimentConfig, SuiteConfig
from .data import (Dataset, DatasetPair, FeatureExtractor, GaussianClusterSpec,
                   glyph_pair, load_mnist_like, subsample_per_class, synth_clusters)
from .federation import (OptimizerState, StrategyConfig, TrainedOutcome, child_seed,
                         evaluate, run_strategy)
from .heterogeneity import (ClientShard, class_blocks, paired_covariate_sets,
                            partition_combined, partition_concept_permutation,
                            partition_concept_semantic, partition_covariate_rotation,
                            partition_covariate_subclass, partition_domain_shift,
                            partition_label_shift, rule_from_name)
from .metrics import compute_ari
from .nn import Architecture, cnn_architecture, mlp_architecture
from .report import (PROVENANCE, RunReport, StrategyResult, aggregate_reports,
                     build_identifier, emit_report)
from .stats import fingerprint_all


class StageError(RuntimeError):
    """An experiment stage failed; the stage name is part of the message."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


# --------------------------------------------------------------------------
# dataset / partition construction
# --------------------------------------------------------------------------

def load_dataset_pair(spec: DatasetSpec, seed: int) -> DatasetPair:
    if spec.kind == "idx":
        pair = load_mnist_like(spec.resolved_root(), name=spec.name)
    elif spec.kind == "glyphs":
        pair = glyph_pair(spec.train_per_class, spec.test_per_class,
                          child_seed(seed, 0xDA7A), invert=spec.invert,
                          name=spec.name)
    elif spec.kind == "synthetic":
        pair = _synthetic_blob_pair(spec, seed)
    else:
        raise ConfigError(f"unknown dataset kind {spec.kind!r}")
    if spec.per_class_cap is not None:
        pair = DatasetPair(
            train=subsample_per_class(pair.train, spec.per_class_cap,
                                      child_seed(seed, 0xCA9, 0)),
            test=subsample_per_class(pair.test, spec.per_class_cap,
                                     child_seed(seed, 0xCA9, 1)),
        )
    return pair


def _synthetic_blob_pair(spec: DatasetSpec, seed: int) -> DatasetPair:
    """Small Gaussian-blob classification task, one blob per class."""
    classes, dim = 4, 16
    rng = np.random.default_rng(child_seed(seed, 0xB70B))
    means = rng.uniform(-1.5, 1.5, size=(classes, dim))
    specs = [GaussianClusterSpec(tuple(means[c]), 0.25, lambda x, c=c: c)
             for c in range(classes)]

    def make(n, s):
        ds, _ = synth_clusters(specs, n, s, class_count=classes, name=spec.name)
        return ds

    return DatasetPair(train=make(spec.train_per_class, child_seed(seed, 0xB70B, 0)),
                       test=make(spec.test_per_class, child_seed(seed, 0xB70B, 1)))


def build_partition(config: ExperimentConfig,
                    pair: DatasetPair) -> list[ClientShard]:
    het = config.heterogeneity
    cpc = het.effective_clients_per_cluster()
    seed = config.seed
    C = pair.train.class_count
    family = het.family
    if family == "E1":
        return partition_label_shift(pair, het.K, cpc, seed)
    if family == "E2a":
        superclass = rule_from_name(het.superclass, C)
        sets = het.subclass_sets or class_blocks(C, het.K)
        return partition_covariate_subclass(pair, superclass, sets, cpc, seed)
    if family == "E2b":
        return partition_covariate_rotation(pair, het.K, cpc, seed)
    if family == "E3a":
        rules = [rule_from_name(r, C) for r in het.rules]
        return partition_concept_semantic(pair, rules, cpc, seed)
    if family == "E3b":
        return partition_concept_permutation(pair, het.K, cpc, seed)
    if family == "E4a":
        pair_b = load_dataset_pair(het.dataset_b, child_seed(seed, 0xB))
        return partition_domain_shift(pair, pair_b, cpc, seed)
    if family == "E4b":
        rules = [rule_from_name(r, C) for r in het.rules]
        sets = het.covariate_sets or paired_covariate_sets(C, het.covariate_clusters)
        return partition_combined(pair, rules, sets, cpc, seed)
    raise ConfigError(f"unknown family {family!r}")


def build_architectures(config: ExperimentConfig,
                        shards: list[ClientShard]) -> tuple[Architecture, Architecture]:
    """(plain backbone, conditional backbone) for the partition's label space."""
    class_count = shards[0].train.class_count
    tr = config.training
    if tr.architecture == "mnist_cnn":
        base = cnn_architecture(class_count, tr.hidden_dim)
        cond = cnn_architecture(class_count, tr.hidden_dim, stats_dim=config.stats.l)
    else:
        input_size = shards[0].train.X.shape[1]
        base = mlp_architecture(input_size, class_count, tr.hidden_dim)
        cond = mlp_architecture(input_size, class_count, tr.hidden_dim,
                                stats_dim=config.stats.l)
    return base, cond


def strategy_config(entry: dict, training) -> StrategyConfig:
    """Per-strategy config: training-spec defaults plus per-entry overrides.

    Every federated baseline defaults to `epochs` rounds of one local epoch,
    so all methods see the same number of passes over local data; IFCA spends
    the same budget as 5 refinement rounds.
    """
    entry = dict(entry)
    kind = entry.pop("kind")
    defaults = dict(
        epochs=training.epochs,
        rounds=training.epochs,
        local_epochs_per_round=1,
        lr_schedule=training.lr_schedule,
    )
    if kind == "ifca":
        refinement = int(entry.get("ifca_refinement_rounds", 5))
        defaults["ifca_refinement_rounds"] = refinement
        defaults["local_epochs_per_round"] = max(1, round(training.epochs / refinement))
    defaults.update(entry)
    return StrategyConfig(kind=kind, **defaults)


# --------------------------------------------------------------------------
# single run
# --------------------------------------------------------------------------

def run_experiment(config: ExperimentConfig, out_dir=None,
                   formats=("json", "csv")) -> RunReport:
    t0 = time.time()
    config.validate()
    out = Path(out_dir or config.out_dir or Path("runs") / config.name)
    created: list[Path] = []
    try:
        with _stage("dataset"):
            pair = load_dataset_pair(config.dataset, config.seed)
        with _stage("partition"):
            shards = build_partition(config, pair)
            base_arch, cond_arch = build_architectures(config, shards)
        with _stage("fingerprint"):
            extractor = FeatureExtractor().for_dataset(shards[0].train)
            fingerprints = fingerprint_all(shards, extractor,
                                           shards[0].train.class_count,
                                           l=config.stats.l,
                                           method=config.stats.method)

        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.jsonl"
        opt = OptimizerState(config.training.learning_rate, config.training.momentum,
                             config.training.batch_size)
        true_ids = [s.cluster_id for s in shards]
        k_total = len(set(true_ids))
        results: list[StrategyResult] = []
        with open(log_path, "w") as log_f:
            created.append(log_path)

            def sink(record: dict):
                log_f.write(json.dumps(record) + "\n")

            for entry in config.strategies:
                cfg = strategy_config(entry, config.training)
                if cfg.kind == "ifca" and cfg.k_hypotheses is None:
                    cfg.k_hypotheses = k_total  # true cluster count provided
                arch = cond_arch if cfg.kind == "conditional" else base_arch
                with _stage(f"train:{cfg.kind}"):
                    outcome = run_strategy(shards, arch, opt, cfg, config.seed,
                                           log_sink=sink)
                with _stage(f"evaluate:{cfg.kind}"):
                    accs, mean_acc = evaluate(outcome, shards)
                results.append(_strategy_result(outcome, shards, accs, mean_acc,
                                                true_ids))

        report = RunReport(
            run_id=config.name,
            config=config.to_dict(),
            provenance=dict(PROVENANCE,
                            round_budget=f"{config.training.epochs}x1",
                            lr_schedule=config.training.lr_schedule),
            dataset=config.dataset.name,
            family=config.heterogeneity.family,
            cluster_count=k_total,
            sparsity=config.heterogeneity.sparsity,
            client_ids=[s.client_id for s in shards],
            true_clusters=[int(c) for c in true_ids],
            fingerprints=[[float(v) for v in row] for row in fingerprints],
            results=results,
            wall_clock_sec=time.time() - t0,
            build=build_identifier(),
        )
        with _stage("report"):
            created.extend(emit_report(report, out, formats=formats))
        return report
    except BaseException:
        for p in created:
            Path(p).unlink(missing_ok=True)
        raise


def _strategy_result(outcome: TrainedOutcome, shards, accs, mean_acc,
                     true_ids) -> StrategyResult:
    assignments = None
    ari = None
    if outcome.assignments is not None:
        assignments = [int(outcome.assignments[s.client_id]) for s in shards]
        ari = compute_ari(true_ids, assignments)
    return StrategyResult(
        strategy=outcome.strategy,
        per_client_accuracy=[accs[s.client_id] for s in shards],
        mean_accuracy=mean_acc,
        ari=ari,
        assignments=assignments,
        train_log=outcome.log,
    )


def fingerprint_only(config: ExperimentConfig, out_dir=None) -> Path:
    """Partition and fingerprint, then write fingerprints.json (stats only)."""
    config.validate()
    out = Path(out_dir or config.out_dir or Path("runs") / config.name)
    with _stage("dataset"):
        pair = load_dataset_pair(config.dataset, config.seed)
    with _stage("partition"):
        shards = build_partition(config, pair)
    with _stage("fingerprint"):
        extractor = FeatureExtractor().for_dataset(shards[0].train)
        fingerprints = fingerprint_all(shards, extractor,
                                       shards[0].train.class_count,
                                       l=config.stats.l, method=config.stats.method)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "fingerprints.json"
    doc = {
        "run_id": config.name,
        "l": config.stats.l,
        "clients": [
            {"client_id": int(s.client_id), "cluster_id": int(s.cluster_id),
             "fingerprint": [float(v) for v in row]}
            for s, row in zip(shards, fingerprints)
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
    return path


# --------------------------------------------------------------------------
# suites
# --------------------------------------------------------------------------

def run_suite(suite: SuiteConfig, out_root, formats=("json", "csv"),
              threads: int = 1) -> dict:
    """Run every grid point with its own child seed and output directory.

    Individual failures are recorded and do not abort the suite; the returned
    summary lists per-run status.
    """
    out_root = Path(out_root)
    docs = suite.expand()
    runs = []
    for i, doc in enumerate(docs):
        doc = dict(doc)
        doc["seed"] = child_seed(suite.seed, i)
        runs.append((i, doc))

    def one(item):
        i, doc = item
        run_dir = out_root / "runs" / doc["name"]
        try:
            cfg = ExperimentConfig.from_dict(doc)
            report = run_experiment(cfg, out_dir=run_dir, formats=formats)
            return {"index": i, "run_id": doc["name"], "seed": doc["seed"],
                    "status": "ok", "dir": str(run_dir),
                    "report": str(run_dir / "report.json"),
                    "mean_accuracy": {r.strategy: r.mean_accuracy
                                      for r in report.results}}
        except Exception as exc:
            return {"index": i, "run_id": doc["name"], "seed": doc["seed"],
                    "status": "error", "dir": str(run_dir), "error": str(exc)}

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            statuses = list(pool.map(one, runs))
    else:
        statuses = [one(item) for item in runs]
    statuses.sort(key=lambda s: s["index"])

    out_root.mkdir(parents=True, exist_ok=True)
    summary = {"suite": suite.name, "seed": suite.seed, "runs": statuses,
               "failed": sum(1 for s in statuses if s["status"] != "ok")}
    with open(out_root / "suite.json", "w") as f:
        json.dump(summary, f, indent=2)
        f.write("\n")
    ok_reports = [Path(s["report"]) for s in statuses if s["status"] == "ok"]
    if ok_reports:
        aggregate_reports(ok_reports, out_root / "suite_summary.csv")
    return summary


def reaggregate(directory, out_path=None) -> Path:
    """Rebuild the aggregate summary CSV from report.json files under `directory`."""
    directory = Path(directory)
    reports = sorted(directory.rglob("report.json"))
    if not reports:
        raise FileNotFoundError(f"no report.json files under {directory}")
    return aggregate_reports(reports, Path(out_path or directory / "suite_summary.csv"))
