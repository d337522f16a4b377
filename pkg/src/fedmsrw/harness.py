"""Experiment runner: folds, baseline rows, strategy comparison, artifacts."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .federation import StrategyConfig, preset, run_federation
from .model import ModelConfig, OptimizerConfig, ParamSet, build_model, save_checkpoint
from .objectives import MetricsReport, aggregate_metrics, confusion
from .synth import ClientConfig, PatchSampler, generate_client, lesion_ratio, save_dataset

log = logging.getLogger(__name__)

METRICS = ("c_dice", "v_dice", "v_tpr", "v_fpr")
BASELINES = ("Single", "Central")


@dataclass
class ExperimentConfig:
    scenario: str = "default"
    clients: list = field(default_factory=list)
    strategies: list = field(default_factory=lambda: ["FedAvg", "FedBN", "FedMSRW"])
    rounds: int = 10
    iters_per_round: int = 100
    batch_size: int = 8
    patch_size: int = 32
    folds: int = 2
    seed: int = 0
    workers: int = 1
    lesion_centered_prob: float = 0.0
    patches_per_case: Optional[int] = None
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.clients = [c if isinstance(c, ClientConfig) else ClientConfig(**c) for c in self.clients]
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if not self.clients:
            raise ValueError("at least one client is required")
        for c in self.clients:
            if c.n_cases < self.folds:
                raise ValueError(f"client {c.client_id} has {c.n_cases} cases, "
                                 f"fewer than folds={self.folds}")
        if len({c.client_id for c in self.clients}) != len(self.clients):
            raise ValueError("client ids must be unique")

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls(**json.loads(Path(path).read_text()))

    def strategy(self, entry) -> tuple[str, Optional[StrategyConfig]]:
        """Resolve a strategy entry (name or ``{"preset": name, ...}``)."""
        if isinstance(entry, str):
            entry = {"preset": entry}
        entry = dict(entry)
        name = entry.pop("preset")
        label = entry.pop("label", name)
        if name in BASELINES:
            return label, None
        return label, preset(name, **entry)


# ---------------------------------------------------------------------------
# data and folds
# ---------------------------------------------------------------------------

def generate_all(config: ExperimentConfig) -> dict:
    return {c.client_id: generate_client(c) for c in config.clients}


def kfold_split(case_counts: Sequence[int], k: int, seed: int = 0):
    """Shuffled k-fold partitions per client; ``out[fold][client] = (train, test)``.

    Fold sizes differ by at most one, larger folds first. Fold index ``f``
    is the test fold for every client at once.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    per_client = []
    for c, n in enumerate(case_counts):
        if n < k:
            raise ValueError(f"client {c} has {n} cases, fewer than k={k}")
        order = np.random.default_rng([seed, c]).permutation(n)
        sizes = [n // k + (1 if f < n % k else 0) for f in range(k)]
        bounds = np.cumsum([0] + sizes)
        tests = [sorted(order[bounds[f]:bounds[f + 1]].tolist()) for f in range(k)]
        per_client.append([(sorted(set(range(n)) - set(t)), t) for t in tests])
    return [[per_client[c][f] for c in range(len(case_counts))] for f in range(k)]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict(net, params: ParamSet, image: np.ndarray) -> np.ndarray:
    pred, _ = net(params, image[None], False)
    return pred[0]


def evaluate(net, params: ParamSet, samples) -> MetricsReport:
    return aggregate_metrics([confusion(predict(net, params, s.image), s.label) for s in samples])


# ---------------------------------------------------------------------------
# single runs
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    name: str
    fold: int
    metrics: dict                  # client_id -> MetricsReport
    params: dict                   # client_id -> ParamSet
    reports: list                  # RoundReports (Single: one list per client, flattened)
    round_records: list = field(default_factory=list)


def _samplers(config: ExperimentConfig, cases_per_client):
    return [PatchSampler(cases, config.batch_size, config.patch_size,
                         lesion_centered_prob=config.lesion_centered_prob,
                         patches_per_case=config.patches_per_case)
            for cases in cases_per_client]


def _split(data: dict, fold_split):
    train, test = {}, {}
    for (cid, cases), (tr, te) in zip(data.items(), fold_split):
        train[cid] = [cases[i] for i in tr]
        test[cid] = [cases[i] for i in te]
    return train, test


def _client_seeds(config: ExperimentConfig, fold: int) -> list[int]:
    return [int(np.random.SeedSequence([config.seed, fold, i]).generate_state(1)[0])
            for i in range(len(config.clients))]


def run_strategy(config: ExperimentConfig, data: dict, fold_split, strategy: StrategyConfig,
                 fold: int = 0, name: Optional[str] = None) -> RunResult:
    net, init = build_model(config.model, config.seed)
    train, test = _split(data, fold_split)
    ids = list(data)
    records = []
    params, reports = run_federation(
        _samplers(config, [train[c] for c in ids]), strategy, config.rounds,
        config.iters_per_round, net, init, config.optimizer, client_ids=ids,
        client_seeds=_client_seeds(config, fold), workers=config.workers,
        on_round=records.append)
    metrics = {cid: evaluate(net, p, test[cid]) for cid, p in zip(ids, params)}
    return RunResult(name or strategy.name, fold, metrics, dict(zip(ids, params)), reports, records)


def run_single(config: ExperimentConfig, data: dict, fold_split, fold: int = 0) -> RunResult:
    """Each client trains alone on its own training cases."""
    net, init = build_model(config.model, config.seed)
    train, test = _split(data, fold_split)
    seeds = _client_seeds(config, fold)
    solo = StrategyConfig(name="Single")
    metrics, params, reports = {}, {}, []
    for i, cid in enumerate(data):
        (p,), reps = run_federation(
            _samplers(config, [train[cid]]), solo, config.rounds, config.iters_per_round,
            net, init, config.optimizer, client_ids=[cid], client_seeds=[seeds[i]])
        metrics[cid] = evaluate(net, p, test[cid])
        params[cid] = p
        reports.extend(reps)
    return RunResult("Single", fold, metrics, params, reports, list(reports))


def run_central(config: ExperimentConfig, data: dict, fold_split, fold: int = 0) -> RunResult:
    """One model trained on every client's training cases pooled together."""
    net, init = build_model(config.model, config.seed)
    train, test = _split(data, fold_split)
    pooled = [s for cid in data for s in train[cid]]
    seed = int(np.random.SeedSequence([config.seed, fold, 10_000]).generate_state(1)[0])
    (p,), reps = run_federation(
        _samplers(config, [pooled]), StrategyConfig(name="Central"), config.rounds,
        config.iters_per_round, net, init, config.optimizer, client_ids=["central"],
        client_seeds=[seed])
    metrics = {cid: evaluate(net, p, test[cid]) for cid in data}
    return RunResult("Central", fold, metrics, {"central": p}, reps, list(reps))


def run_named(config: ExperimentConfig, data: dict, fold_split, entry, fold: int) -> RunResult:
    label, strategy = config.strategy(entry)
    if strategy is None:
        base = entry if isinstance(entry, str) else entry["preset"]
        res = run_single(config, data, fold_split, fold) if base == "Single" \
            else run_central(config, data, fold_split, fold)
        res.name = label
        return res
    return run_strategy(config, data, fold_split, strategy, fold, label)


# ---------------------------------------------------------------------------
# comparison tables
# ---------------------------------------------------------------------------

@dataclass
class ComparisonTable:
    clients: list
    rows: dict = field(default_factory=dict)     # name -> {client|"avg": {metric: value}}
    errors: dict = field(default_factory=dict)   # name -> message

    def add(self, name: str, per_fold: list) -> None:
        cells = {}
        for cid in self.clients:
            cells[cid] = {m: float(np.mean([getattr(r.metrics[cid], m) for r in per_fold]))
                          for m in METRICS}
        cells["avg"] = {m: float(np.mean([cells[c][m] for c in self.clients])) for m in METRICS}
        self.rows[name] = cells

    def columns(self) -> list[tuple[str, str]]:
        return [(m, c) for m in METRICS for c in [*self.clients, "avg"]]

    def cell(self, name: str, metric: str, client: str) -> str:
        if name in self.errors:
            return "ERR"
        return f"{100.0 * self.rows[name][client][metric]:.2f}"

    def names(self) -> list[str]:
        return [*self.rows, *[n for n in self.errors if n not in self.rows]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", *[f"{m}:{c}" for m, c in self.columns()]])
        for name in self.names():
            w.writerow([name, *[self.cell(name, m, c) for m, c in self.columns()]])
        return buf.getvalue()

    def to_text(self) -> str:
        header = ["strategy", *[f"{m}:{c}" for m, c in self.columns()]]
        body = [[n, *[self.cell(n, m, c) for m, c in self.columns()]] for n in self.names()]
        widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
        lines = ["  ".join(v.rjust(wd) for v, wd in zip(r, widths)) for r in [header, *body]]
        for n, msg in self.errors.items():
            lines.append(f"# {n} failed: {msg}")
        return "\n".join(lines) + "\n"


class RunWriter:
    """Single writer for one output directory."""

    def __init__(self, out_dir):
        self.root = Path(out_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self._rounds = open(self.root / "rounds.jsonl", "w")
        self._metrics = open(self.root / "metrics.jsonl", "w")

    def write_run(self, res: RunResult, model: ModelConfig) -> None:
        for rep in res.round_records:
            self._rounds.write(rep.to_json(strategy=res.name, fold=res.fold) + "\n")
        self._rounds.flush()
        for cid, m in res.metrics.items():
            self._metrics.write(json.dumps({
                "strategy": res.name, "fold": res.fold, "client": cid, **m.as_dict(),
                "case_dice": m.case_dice, "counts": asdict(m.counts)}, sort_keys=True) + "\n")
        self._metrics.flush()
        for cid, p in res.params.items():
            save_checkpoint(self.root / "checkpoints" / res.name / f"fold{res.fold}" / f"{cid}.fseg",
                            p, model)

    def close(self) -> None:
        self._rounds.close()
        self._metrics.close()


def write_ratios(data: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "case_id", "lesion_ratio"])
        for cid, cases in data.items():
            for s in cases:
                w.writerow([cid, s.case_id, repr(lesion_ratio(s))])


def prepare(config: ExperimentConfig, out_dir):
    """Generate data, persist it with fold assignments, return (data, folds)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_all(config)
    save_dataset([s for cases in data.values() for s in cases], out / "data",
                 config_digest=",".join(c.digest() for c in config.clients))
    write_ratios(data, out / "ratios.csv")
    folds = kfold_split([len(v) for v in data.values()], config.folds, config.seed)
    (out / "folds.json").write_text(json.dumps(
        [{cid: {"train": tr, "test": te} for cid, (tr, te) in zip(data, f)} for f in folds],
        sort_keys=True))
    return data, folds


def compare(config: ExperimentConfig, out_dir=None, strategies=None) -> ComparisonTable:
    """Run every strategy on identical folds and seeds and persist the artifacts."""
    out = Path(out_dir or config.output_dir)
    strategies = list(strategies if strategies is not None else config.strategies)
    if not strategies:
        raise ValueError("compare needs at least one strategy")
    data, folds = prepare(config, out)
    table = ComparisonTable(list(data))
    writer = RunWriter(out)
    try:
        for entry in strategies:
            label = entry if isinstance(entry, str) else entry.get("label", entry.get("preset"))
            try:
                results = []
                for f, split in enumerate(folds):
                    res = run_named(config, data, split, entry, f)
                    writer.write_run(res, config.model)
                    results.append(res)
                table.add(label, results)
            except Exception as exc:  # one failed row must not sink the others
                log.exception("strategy %s failed", label)
                table.errors[label] = f"{type(exc).__name__}: {exc}"
    finally:
        writer.close()
    (out / "table.csv").write_text(table.to_csv())
    (out / "table.txt").write_text(table.to_text())
    return table
