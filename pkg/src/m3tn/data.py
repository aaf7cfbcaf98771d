"""Dataset schema, CSV ingestion, splitting, standardization and a synthetic RCT generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

COLUMN_KINDS = ("numeric", "categorical", "treatment", "response")
UPLIFT_FAMILIES = ("LinearSigmoid", "Piecewise")


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    cardinality: int | None = None
    embedding_dim: int | None = None

    def __post_init__(self):
        if self.kind not in COLUMN_KINDS:
            raise ConfigError(f"column {self.name!r}: unknown kind {self.kind!r}")

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.cardinality is not None:
            d["cardinality"] = self.cardinality
        if self.embedding_dim is not None:
            d["embedding_dim"] = self.embedding_dim
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnSpec":
        try:
            return cls(d["name"], d["kind"], d.get("cardinality"), d.get("embedding_dim"))
        except KeyError as e:
            raise ConfigError(f"schema column is missing field {e.args[0]!r}") from None


@dataclass(frozen=True)
class DatasetSchema:
    """Ordered column specs with exactly one treatment and one response column."""

    columns: tuple[ColumnSpec, ...]

    def __post_init__(self):
        kinds = [c.kind for c in self.columns]
        if kinds.count("treatment") != 1 or kinds.count("response") != 1:
            raise ConfigError("schema needs exactly one treatment and one response column")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ConfigError("schema column names must be unique")

    @property
    def features(self) -> tuple[ColumnSpec, ...]:
        return tuple(c for c in self.columns if c.kind in ("numeric", "categorical"))

    @property
    def treatment(self) -> str:
        return next(c.name for c in self.columns if c.kind == "treatment")

    @property
    def response(self) -> str:
        return next(c.name for c in self.columns if c.kind == "response")

    def to_list(self) -> list[dict]:
        return [c.to_dict() for c in self.columns]

    @classmethod
    def from_list(cls, cols: list[dict]) -> "DatasetSchema":
        return cls(tuple(ColumnSpec.from_dict(c) for c in cols))


@dataclass
class Dataset:
    """Feature rows in schema order; categorical columns hold integer category indices.

    ``categories`` maps each categorical column to its values in index order,
    so the mapping travels with the data (and with checkpoints).
    """

    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    schema: DatasetSchema
    categories: dict[str, list[str]] = field(default_factory=dict)
    tau: np.ndarray | None = None
    num_treatments: int | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim == 1 or self.x.size == 0:
            self.x = self.x.reshape(len(self.t), len(self.schema.features))
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.num_treatments is None:
            self.num_treatments = int(self.t.max()) if len(self.t) else 0
        if len(self.t) and (self.t.min() < 0 or self.t.max() > self.num_treatments):
            raise DataError(f"treatment labels must lie in 0..{self.num_treatments}")
        if not np.all(np.isfinite(self.x)) or not np.all(np.isfinite(self.y)):
            raise DataError("features and responses must be finite")
        if self.tau is not None:
            self.tau = np.asarray(self.tau, dtype=np.float64)
            if self.tau.shape != (len(self.t), self.num_treatments):
                raise DataError(
                    f"ground-truth shape {self.tau.shape} != ({len(self.t)}, {self.num_treatments})"
                )
        if self.x.shape[1] != len(self.schema.features):
            raise DataError(
                f"dataset has {self.x.shape[1]} feature columns, schema declares {len(self.schema.features)}"
            )

    def __len__(self) -> int:
        return len(self.t)

    @property
    def features(self) -> tuple[ColumnSpec, ...]:
        """Feature columns with cardinalities filled in from the category maps."""
        out = []
        for c in self.schema.features:
            if c.is_categorical and c.cardinality is None:
                c = replace(c, cardinality=len(self.categories.get(c.name, [])))
            out.append(c)
        return tuple(out)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(
            self.x[idx], self.t[idx], self.y[idx], self.schema, self.categories,
            None if self.tau is None else self.tau[idx], self.num_treatments,
        )

    def has_all_arms(self) -> bool:
        return len(np.unique(self.t)) == self.num_treatments + 1


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(v):
        raise DataError(f"row {row}, column {col!r}: non-finite value {cell!r}")
    return v


def load_csv(
    path: str | Path,
    schema: DatasetSchema,
    categories: dict[str, list[str]] | None = None,
    num_treatments: int | None = None,
    strict: bool = False,
) -> Dataset:
    """Read a CSV laid out per ``schema``.

    Without ``categories`` the category maps are built in first-seen order.
    With them (inference time) an unseen category is a ``DataError``.
    ``strict`` also rejects header columns the schema does not declare.
    """
    frozen = categories is not None
    cats = {c.name: list((categories or {}).get(c.name, [])) for c in schema.features if c.is_categorical}
    lookup = {name: {v: i for i, v in enumerate(vals)} for name, vals in cats.items()}
    feats = schema.features
    rows_x, rows_t, rows_y = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [c.name for c in schema.columns if c.name not in header]
        if missing:
            raise DataError(f"{path}: columns {missing} declared in schema but absent from header")
        if strict:
            extra = [h for h in header if h not in {c.name for c in schema.columns}]
            if extra:
                raise DataError(f"{path}: columns {extra} are not part of the expected schema")
        pos = {name: header.index(name) for name in (c.name for c in schema.columns)}
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"row {r}: expected {len(header)} cells, found {len(row)}")
            feat_vals = []
            for c in feats:
                cell = row[pos[c.name]]
                if c.is_categorical:
                    table = lookup[c.name]
                    if cell not in table:
                        if frozen:
                            raise DataError(f"row {r}, column {c.name!r}: unseen category {cell!r}")
                        table[cell] = len(table)
                        cats[c.name].append(cell)
                    idx = table[cell]
                    if c.cardinality is not None and idx >= c.cardinality:
                        raise DataError(
                            f"row {r}, column {c.name!r}: category index {idx} exceeds cardinality {c.cardinality}"
                        )
                    feat_vals.append(float(idx))
                else:
                    feat_vals.append(_parse_float(cell, r, c.name))
            t = _parse_float(row[pos[schema.treatment]], r, schema.treatment)
            if t != int(t) or t < 0:
                raise DataError(f"row {r}, column {schema.treatment!r}: treatment must be a non-negative integer")
            rows_x.append(feat_vals)
            rows_t.append(int(t))
            rows_y.append(_parse_float(row[pos[schema.response]], r, schema.response))
    x = np.array(rows_x, dtype=np.float64).reshape(len(rows_t), len(feats))
    return Dataset(x, np.array(rows_t, dtype=np.int64), np.array(rows_y), schema, cats,
                   num_treatments=num_treatments)


def save_csv(dataset: Dataset, path: str | Path) -> None:
    """Write ``dataset`` in schema column order; floats are written round-trip exact."""
    schema = dataset.schema
    feat_pos = {c.name: j for j, c in enumerate(schema.features)}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([c.name for c in schema.columns])
        for i in range(len(dataset)):
            row = []
            for c in schema.columns:
                if c.kind == "treatment":
                    row.append(str(int(dataset.t[i])))
                elif c.kind == "response":
                    row.append(repr(float(dataset.y[i])))
                elif c.is_categorical:
                    row.append(dataset.categories[c.name][int(dataset.x[i, feat_pos[c.name]])])
                else:
                    row.append(repr(float(dataset.x[i, feat_pos[c.name]])))
            w.writerow(row)


def save_truth_csv(dataset: Dataset, path: str | Path) -> None:
    if dataset.tau is None:
        raise DataError("dataset carries no ground-truth uplift")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"tau_{k}" for k in range(1, dataset.num_treatments + 1)])
        for row in dataset.tau:
            w.writerow([repr(float(v)) for v in row])


@dataclass
class SyntheticSpec:
    n: int = 10_000
    d: int = 10
    num_treatments: int = 3
    propensities: list[float] | None = None
    noise_std: float = 0.5
    seed: int = 0
    family: str = "LinearSigmoid"

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ConfigError("synthetic spec: n and d must be positive")
        if self.num_treatments < 1:
            raise ConfigError("synthetic spec: num_treatments must be >= 1")
        if self.propensities is None:
            k1 = self.num_treatments + 1
            self.propensities = [1.0 / k1] * k1
        p = np.asarray(self.propensities, dtype=np.float64)
        if len(p) != self.num_treatments + 1:
            raise ConfigError(
                f"synthetic spec: {len(p)} propensities for {self.num_treatments + 1} arms"
            )
        if np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ConfigError("synthetic spec: propensities must be positive and sum to 1")
        if self.noise_std < 0:
            raise ConfigError("synthetic spec: noise_std must be non-negative")
        if self.family not in UPLIFT_FAMILIES:
            raise ConfigError(f"synthetic spec: unknown family {self.family!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {"n", "d", "num_treatments", "propensities", "noise_std", "seed", "family"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"synthetic spec: unknown fields {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "n": self.n, "d": self.d, "num_treatments": self.num_treatments,
            "propensities": list(self.propensities), "noise_std": self.noise_std,
            "seed": self.seed, "family": self.family,
        }


def synthetic_schema(d: int) -> DatasetSchema:
    cols = [ColumnSpec(f"x{j}", "numeric") for j in range(1, d + 1)]
    return DatasetSchema(tuple(cols + [ColumnSpec("t", "treatment"), ColumnSpec("y", "response")]))


class ResponseSurface:
    """Potential-outcome functions drawn from a synthetic spec's seed.

    ``base(x)`` is the control response; ``uplift(x)`` returns one column per arm.
    """

    def __init__(self, spec: SyntheticSpec, rng: np.random.Generator):
        d, k = spec.d, spec.num_treatments
        self.family = spec.family
        # scales keep var(base) near 1 and the uplift logits spread over the sigmoid's slope
        self.w0 = rng.normal(0.0, 1.0 / np.sqrt(d), size=d)
        self.w = rng.normal(0.0, 2.0 / np.sqrt(d), size=(k, d))
        self.arm_scale = np.arange(1, k + 1, dtype=np.float64)

    def base(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w0

    def uplift(self, x: np.ndarray) -> np.ndarray:
        logits = x @ self.w.T
        if self.family == "LinearSigmoid":
            shape = 1.0 / (1.0 + np.exp(-logits))
        else:
            shape = 0.2 + 0.6 * (logits > 0)
        return self.arm_scale * shape

    def outcome(self, x: np.ndarray, arm: int) -> np.ndarray:
        """Noise-free potential outcome ``y(arm)``."""
        out = self.base(x)
        if arm > 0:
            out = out + self.uplift(x)[:, arm - 1]
        return out


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Randomized experiment: treatment drawn independently of features."""
    rng = np.random.default_rng(spec.seed)
    surface = ResponseSurface(spec, rng)
    x = rng.standard_normal((spec.n, spec.d))
    t = rng.choice(spec.num_treatments + 1, size=spec.n, p=spec.propensities)
    noise = rng.normal(0.0, 1.0, size=spec.n) * spec.noise_std
    tau = surface.uplift(x)
    padded = np.concatenate([np.zeros((spec.n, 1)), tau], axis=1)
    y = surface.base(x) + padded[np.arange(spec.n), t] + noise
    return Dataset(x, t, y, synthetic_schema(spec.d), tau=tau, num_treatments=spec.num_treatments)


def response_surface(spec: SyntheticSpec) -> ResponseSurface:
    """Regenerate the surface ``generate_synthetic(spec)`` sampled from."""
    return ResponseSurface(spec, np.random.default_rng(spec.seed))


def split(
    dataset: Dataset, fractions: tuple[float, float, float], seed: int, max_tries: int = 100
) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle then contiguous train/val/test slices.

    Sizes are floored and the remainder goes to train. Every non-empty slice
    must contain every arm; the shuffle is redrawn up to ``max_tries`` times.
    """
    f = np.asarray(fractions, dtype=np.float64)
    if len(f) != 3 or np.any(f < 0) or abs(f.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(dataset)
    sizes = [int(math.floor(fi * n + 1e-9)) for fi in f]
    sizes[0] += n - sum(sizes)
    bounds = np.cumsum([0] + sizes)
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        perm = rng.permutation(n)
        parts = [dataset.subset(perm[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
        if all(len(p) == 0 or p.has_all_arms() for p in parts):
            return parts[0], parts[1], parts[2]
    raise DataError(f"could not draw a split with every arm in every slice after {max_tries} shuffles")


@dataclass
class Standardizer:
    """Per-numeric-column mean/std fitted on a training slice."""

    mean: np.ndarray
    std: np.ndarray
    numeric: np.ndarray

    @classmethod
    def fit(cls, dataset: Dataset) -> "Standardizer":
        numeric = np.array([not c.is_categorical for c in dataset.schema.features], dtype=bool)
        if len(dataset) == 0:
            raise DataError("cannot fit standardization on an empty slice")
        return cls(dataset.x.mean(axis=0), dataset.x.std(axis=0), numeric)

    def transform(self, dataset: Dataset) -> Dataset:
        x = dataset.x.copy()
        cols = self.numeric & (self.std > 0)
        x[:, cols] = (x[:, cols] - self.mean[cols]) / self.std[cols]
        out = dataset.subset(np.arange(len(dataset)))
        out.x = x
        return out

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "numeric": self.numeric.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64),
                   np.array(d["numeric"], dtype=bool))
