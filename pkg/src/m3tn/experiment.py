"""Training loop, seeded multi-run protocol, random search, complexity report and expert sweep."""

from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    DatasetSchema,
    Standardizer,
    SyntheticSpec,
    generate_synthetic,
    load_csv,
    split,
)
from .errors import ConfigError, TrainingError, UpliftError
from .metrics import EvaluationReport, evaluate
from .models import ModelConfig, ModelKind, UpliftModel, build_model, predict_uplift
from .nn import Adam

log = logging.getLogger(__name__)

OBJECTIVES = ("mQini", "mKendall")
SEARCHABLE = (
    "num_experts", "expert_hidden", "head_hidden", "l2_lambda", "mmd_alpha",
    "learning_rate", "batch_size", "epochs", "patience",
)


def _from_dict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"{where}: unknown fields {sorted(extra)}")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


@dataclass
class ArchitectureConfig:
    kind: str = "M3TN"
    num_experts: int = 4
    expert_hidden: list[int] = field(default_factory=lambda: [64, 32])
    head_hidden: list[int] = field(default_factory=lambda: [16])
    l2_lambda: float = 1e-4
    l2_squared: bool = True
    mmd_alpha: float = 0.1

    def __post_init__(self):
        self.kind = ModelKind.parse(self.kind).value


@dataclass
class TrainingConfig:
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 1e-3
    patience: int = 5
    objective: str = "mQini"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"training.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"training.batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"training.learning_rate must be >= 0, got {self.learning_rate}")
        if self.patience < 1:
            raise ConfigError(f"training.patience must be >= 1, got {self.patience}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"training.objective must be one of {OBJECTIVES}, got {self.objective!r}")


@dataclass
class MetricConfig:
    grid_size: int = 100
    num_bins: int = 10


@dataclass
class SearchConfig:
    space: dict[str, list] = field(default_factory=dict)
    budget: int = 10
    seed: int = 0

    def __post_init__(self):
        bad = set(self.space) - set(SEARCHABLE)
        if bad:
            raise ConfigError(f"search.space: unsupported hyperparameters {sorted(bad)}")
        if self.budget < 1:
            raise ConfigError(f"search.budget must be >= 1, got {self.budget}")


@dataclass
class DataConfig:
    csv: str | None = None
    schema: list[dict] | None = None
    synthetic: dict | None = None

    def parsed_schema(self) -> DatasetSchema:
        if self.schema is None:
            raise ConfigError("data.schema is required to read a CSV")
        return DatasetSchema.from_list(self.schema)


@dataclass
class ExperimentConfig:
    model: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    data: DataConfig = field(default_factory=DataConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    split: list[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])
    split_seed: int = 0

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        parts = {
            "model": ArchitectureConfig, "training": TrainingConfig, "metrics": MetricConfig,
            "data": DataConfig, "search": SearchConfig,
        }
        for key, sub in parts.items():
            if key in d:
                d[key] = _from_dict(sub, d[key], key)
        return _from_dict(cls, d, "config")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = {g.name: getattr(v, g.name) for g in fields(v)} if hasattr(v, "__dataclass_fields__") else v
        return out

    def with_params(self, params: dict) -> "ExperimentConfig":
        """Copy with searchable hyperparameters overridden."""
        cfg = copy.deepcopy(self)
        arch_keys = {f.name for f in fields(ArchitectureConfig)}
        for k, v in params.items():
            target = cfg.model if k in arch_keys else cfg.training
            setattr(target, k, v)
        cfg.model.__post_init__()
        cfg.training.__post_init__()
        return cfg


def load_dataset(config: ExperimentConfig, csv_path: str | Path | None = None) -> Dataset:
    path = csv_path or config.data.csv
    if path is not None:
        return load_csv(path, config.data.parsed_schema())
    if config.data.synthetic is not None:
        return generate_synthetic(SyntheticSpec.from_dict(config.data.synthetic))
    raise ConfigError("data: give either a csv path or a synthetic spec")


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset
    standardizer: Standardizer

    def preprocessing(self) -> dict:
        return {
            "schema": self.train.schema.to_list(),
            "categories": self.train.categories,
            "num_treatments": self.train.num_treatments,
            "standardizer": self.standardizer.to_dict(),
        }


def prepare_splits(config: ExperimentConfig, dataset: Dataset) -> Splits:
    train, val, test = split(dataset, tuple(config.split), config.split_seed)
    std = Standardizer.fit(train)
    return Splits(std.transform(train), std.transform(val), std.transform(test), std)


def model_config(config: ExperimentConfig, dataset: Dataset, seed: int) -> ModelConfig:
    a = config.model
    return ModelConfig(
        kind=a.kind, num_treatments=dataset.num_treatments, features=dataset.features,
        num_experts=a.num_experts, expert_hidden=tuple(a.expert_hidden),
        head_hidden=tuple(a.head_hidden), l2_lambda=a.l2_lambda, l2_squared=a.l2_squared,
        mmd_alpha=a.mmd_alpha, seed=seed,
    )


@dataclass
class RunResult:
    seed: int
    report: EvaluationReport | None
    loss_trace: list[float]
    train_seconds: float
    param_count: int
    best_epoch: int
    best_validation: float | None

    def to_dict(self) -> dict:
        # wall-clock is left out so reports are reproducible byte for byte
        return {
            "seed": self.seed,
            "test": None if self.report is None else self.report.to_dict(),
            "loss_trace": self.loss_trace,
            "param_count": self.param_count,
            "best_epoch": self.best_epoch,
            "best_validation": self.best_validation,
        }


def validation_score(model: UpliftModel, data: Dataset, config: ExperimentConfig) -> float:
    pred = predict_uplift(model, data)
    rep = evaluate(pred, data.t, data.y, config.metrics.grid_size, config.metrics.num_bins)
    return rep.mQini if config.training.objective == "mQini" else rep.mKendall


def train(
    config: ExperimentConfig,
    splits: Splits,
    seed: int,
    *,
    validate: bool = True,
    evaluate_test: bool = True,
) -> tuple[UpliftModel, RunResult]:
    """Mini-batch Adam on the masked joint loss with early stopping on validation.

    With ``validate=False`` the loop runs for exactly ``training.epochs``
    epochs with no early stopping.
    """
    tc = config.training
    init_seed, batch_seed = np.random.SeedSequence(seed).generate_state(2)
    model = build_model(model_config(config, splits.train, int(init_seed)))
    opt = Adam(model.parameters(), lr=tc.learning_rate)
    rng = np.random.default_rng(int(batch_seed))
    tr = splits.train
    n = len(tr)

    trace: list[float] = []
    best_score, best_epoch, best_state, stale = -np.inf, 0, None, 0
    seconds = 0.0
    for epoch in range(1, tc.epochs + 1):
        start = time.perf_counter()
        perm = rng.permutation(n)
        total = 0.0
        for b in range(0, n, tc.batch_size):
            idx = perm[b : b + tc.batch_size]
            # divergence is reported below, not through numpy warnings
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = model.loss_and_grad(tr.x[idx], tr.t[idx], tr.y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss became non-finite at epoch {epoch}")
            opt.step(grads)
            total += loss * len(idx)
        seconds += time.perf_counter() - start
        trace.append(total / n)
        if not validate:
            continue
        score = validation_score(model, splits.val, config)
        if score > best_score:
            best_score, best_epoch, best_state, stale = score, epoch, model.state_dict(), 0
        else:
            stale += 1
            if stale >= tc.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = len(trace)
    if not all(np.all(np.isfinite(p)) for _, p in model.named_parameters()):
        raise TrainingError(f"parameters became non-finite by epoch {len(trace)}")

    report = None
    if evaluate_test and len(splits.test):
        pred = predict_uplift(model, splits.test)
        report = evaluate(pred, splits.test.t, splits.test.y,
                          config.metrics.grid_size, config.metrics.num_bins)
    result = RunResult(
        seed=seed, report=report, loss_trace=trace, train_seconds=max(seconds, 1e-9),
        param_count=model.param_count(), best_epoch=best_epoch,
        best_validation=float(best_score) if validate else None,
    )
    return model, result


AGGREGATE_KEYS = ("mQini", "sdQini", "mKendall", "sdKendall")


def aggregate(reports: list[EvaluationReport]) -> dict[str, dict[str, float]]:
    """Mean and sample std (0 for a single run) of every scalar across runs."""
    dicts = [r.to_dict() for r in reports]
    out = {}
    for key in dicts[0]:
        vals = np.array([d[key] for d in dicts], dtype=np.float64)
        out[key] = {
            "mean": float(vals.mean()),
            "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
        }
    return out


@dataclass
class ProtocolResult:
    runs: list[RunResult]
    models: list[UpliftModel]
    aggregate: dict[str, dict[str, float]]

    def to_dict(self, config: ExperimentConfig | None = None) -> dict:
        d = {}
        if config is not None:
            d["config"] = config.to_dict()
        d["aggregate"] = self.aggregate
        d["runs"] = [r.to_dict() for r in self.runs]
        return d


def _train_seed(args):
    config, splits, seed, evaluate_test = args
    try:
        return train(config, splits, seed, evaluate_test=evaluate_test)
    except UpliftError as e:
        raise type(e)(f"seed {seed}: {e}") from e


def _map(fn, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(a) for a in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def run_protocol(
    config: ExperimentConfig, dataset: Dataset, jobs: int = 1, splits: Splits | None = None
) -> ProtocolResult:
    """Independent train + test evaluation for every seed, then mean/std aggregates."""
    splits = splits or prepare_splits(config, dataset)
    out = _map(_train_seed, [(config, splits, s, True) for s in config.seeds], jobs)
    models = [m for m, _ in out]
    runs = [r for _, r in out]
    return ProtocolResult(runs, models, aggregate([r.report for r in runs]))


@dataclass
class SearchResult:
    best_params: dict
    best_config: ExperimentConfig
    trials: list[dict]


def _space_points(space: dict[str, list]) -> list[dict]:
    keys = sorted(space)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(space[k] for k in keys))]


def hyper_search(
    config: ExperimentConfig, dataset: Dataset, jobs: int = 1, splits: Splits | None = None
) -> SearchResult:
    """Seeded random search without replacement, maximizing mean validation objective.

    Trials only see the train and validation slices.
    """
    sc = config.search
    if not sc.space or any(len(v) == 0 for v in sc.space.values()):
        raise ConfigError("search.space is empty")
    points = _space_points(sc.space)
    rng = np.random.default_rng(sc.seed)
    chosen = rng.choice(len(points), size=min(sc.budget, len(points)), replace=False)
    splits = splits or prepare_splits(config, dataset)
    no_test = replace(splits, test=splits.test.subset(np.zeros(0, dtype=np.int64)))

    trials = []
    best = None
    for trial, i in enumerate(chosen):
        params = points[int(i)]
        cfg = config.with_params(params)
        out = _map(_train_seed, [(cfg, no_test, s, False) for s in cfg.seeds], jobs)
        score = float(np.mean([r.best_validation for _, r in out]))
        trials.append({"trial": trial, **params, "objective": score})
        log.info("trial %d %s -> %.6f", trial, params, score)
        if best is None or score > best[0]:
            best = (score, params, cfg)
    return SearchResult(best[1], best[2], trials)


def complexity_report(
    config: ExperimentConfig,
    dataset: Dataset,
    kinds: list[str],
    epochs: int = 20,
    splits: Splits | None = None,
) -> list[dict]:
    """Parameter count and training wall-clock for a fixed epoch budget, per model kind.

    All kinds share the config's representation and head widths. Evaluation
    is neither run nor timed.
    """
    splits = splits or prepare_splits(config, dataset)
    rows = []
    for kind in kinds:
        cfg = copy.deepcopy(config)
        cfg.model.kind = ModelKind.parse(kind).value
        cfg.training.epochs = epochs
        _, res = train(cfg, splits, cfg.seeds[0], validate=False, evaluate_test=False)
        rows.append({"kind": cfg.model.kind, "param_count": res.param_count,
                     "train_seconds": res.train_seconds, "epochs": epochs})
    return rows


def expert_sweep(
    config: ExperimentConfig, dataset: Dataset, counts: list[int], jobs: int = 1,
    splits: Splits | None = None,
) -> list[dict]:
    """Run the protocol once per expert count, everything else fixed."""
    if any(c < 1 for c in counts):
        raise ConfigError(f"expert counts must be >= 1, got {counts}")
    splits = splits or prepare_splits(config, dataset)
    rows = []
    for n in counts:
        cfg = config.with_params({"num_experts": n})
        res = run_protocol(cfg, dataset, jobs, splits)
        row = {"num_experts": n}
        for key in AGGREGATE_KEYS:
            row[f"{key}_mean"] = res.aggregate[key]["mean"]
            row[f"{key}_std"] = res.aggregate[key]["std"]
        rows.append(row)
    return rows


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def write_rows_csv(path: str | Path, rows: list[dict]) -> None:
    keys: list[str] = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([_cell(r.get(k)) for k in keys])


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple, dict)):
        return json.dumps(v)
    return str(v)
