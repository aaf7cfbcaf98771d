"""M3TN, its two ablations, and the baseline zoo behind one prediction interface.

Every model maps encoded features to K+1 head outputs. Models with the
reparameterization module read head 0 as the control response and heads
1..K as uplifts; the others read every head as a response and report uplift
as a difference against head 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path

import numpy as np

from .data import ColumnSpec, Dataset
from .errors import ConfigError, DataError, StateError
from .nn import Dense, Embedding, GradientSet, Mlp, mse_loss


class ModelKind(str, Enum):
    M3TN = "M3TN"
    M3TN_NoMMoE = "M3TN_NoMMoE"
    M3TN_NoRM = "M3TN_NoRM"
    SLearner = "SLearner"
    TLearner = "TLearner"
    SharedBottomMultiHead = "SharedBottomMultiHead"
    SharedBottomMultiHead_MMD = "SharedBottomMultiHead_MMD"

    @classmethod
    def parse(cls, value) -> "ModelKind":
        try:
            return cls(value)
        except ValueError:
            raise ConfigError(
                f"unknown model kind {value!r}; expected one of {[k.value for k in cls]}"
            ) from None


@dataclass
class ModelConfig:
    kind: ModelKind = ModelKind.M3TN
    num_treatments: int = 2
    features: tuple[ColumnSpec, ...] = ()
    num_experts: int = 4
    expert_hidden: tuple[int, ...] = (64, 32)
    head_hidden: tuple[int, ...] = (16,)
    l2_lambda: float = 1e-4
    # False switches the penalty to the unsquared norm lambda * ||theta||_2
    l2_squared: bool = True
    mmd_alpha: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.kind = ModelKind.parse(self.kind)
        self.expert_hidden = tuple(int(w) for w in self.expert_hidden)
        self.head_hidden = tuple(int(w) for w in self.head_hidden)
        self.features = tuple(
            f if isinstance(f, ColumnSpec) else ColumnSpec.from_dict(f) for f in self.features
        )
        if self.num_treatments < 2:
            raise ConfigError(f"num_treatments must be >= 2, got {self.num_treatments}")
        if self.num_experts < 1:
            raise ConfigError(f"num_experts must be >= 1, got {self.num_experts}")
        if not self.expert_hidden:
            raise ConfigError("expert_hidden needs at least one width")
        if any(w < 1 for w in self.expert_hidden + self.head_hidden):
            raise ConfigError("layer widths must be positive")
        if self.l2_lambda < 0:
            raise ConfigError(f"l2_lambda must be non-negative, got {self.l2_lambda}")
        if self.mmd_alpha < 0:
            raise ConfigError(f"mmd_alpha must be non-negative, got {self.mmd_alpha}")
        if not self.features:
            raise ConfigError("model needs at least one feature column")
        for f in self.features:
            if f.is_categorical and not f.cardinality:
                raise ConfigError(f"categorical feature {f.name!r} needs a cardinality")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["features"] = [f.to_dict() for f in self.features]
        d["expert_hidden"] = list(self.expert_hidden)
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"model config: unknown fields {sorted(extra)}")
        return cls(**d)


@dataclass
class UpliftPrediction:
    """Control response ``mu0`` (n,) and per-arm uplift ``tau`` (n, K)."""

    mu0: np.ndarray
    tau: np.ndarray

    def mu(self, k: int) -> np.ndarray:
        """Response under arm ``k``; for k >= 1 this is ``mu0 + tau[:, k-1]``."""
        if k == 0:
            return self.mu0
        return self.mu0 + self.tau[:, k - 1]

    @property
    def num_treatments(self) -> int:
        return self.tau.shape[1]

    def __len__(self) -> int:
        return len(self.mu0)


def default_embedding_dim(cardinality: int) -> int:
    return min(8, math.ceil(cardinality / 2))


class FeatureEncoder:
    """Passes numeric columns through and swaps categoricals for embeddings, in column order."""

    def __init__(self, features: tuple[ColumnSpec, ...], rng: np.random.Generator):
        self.features = features
        self.tables: dict[int, Embedding] = {}
        dim = 0
        for j, f in enumerate(features):
            if f.is_categorical:
                e_dim = f.embedding_dim or default_embedding_dim(f.cardinality)
                self.tables[j] = Embedding(f.cardinality, e_dim, name=f"embeddings.{f.name}", rng=rng)
                dim += e_dim
            else:
                dim += 1
        self.out_dim = dim

    def named_parameters(self):
        for table in self.tables.values():
            yield from table.named_parameters()

    def _indices(self, x: np.ndarray, j: int) -> np.ndarray:
        col = x[:, j]
        idx = col.astype(np.int64)
        card = self.tables[j].cardinality
        bad = (idx != col) | (idx < 0) | (idx >= card)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise DataError(
                f"column {self.features[j].name!r}: category index {col[i]!r} outside [0, {card})"
            )
        return idx

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        if x.ndim != 2 or x.shape[1] != len(self.features):
            raise DataError(f"expected {len(self.features)} feature columns, got shape {x.shape}")
        if not self.tables:
            return x, {}
        blocks, cache = [], {}
        for j in range(len(self.features)):
            if j in self.tables:
                idx = self._indices(x, j)
                emb, _ = self.tables[j].forward(idx)
                blocks.append(emb)
                cache[j] = idx
            else:
                blocks.append(x[:, j : j + 1])
        return np.concatenate(blocks, axis=1), cache

    def backward(self, cache: dict, grad_xe: np.ndarray, grads: GradientSet) -> None:
        if not self.tables:
            return
        offset = 0
        for j in range(len(self.features)):
            if j in self.tables:
                table = self.tables[j]
                table.backward(cache[j], grad_xe[:, offset : offset + table.dim], grads)
                offset += table.dim
            else:
                offset += 1


class MMoE:
    """N ReLU expert MLPs shared by K+1 softmax gates (linear, bias-free)."""

    def __init__(self, in_dim: int, num_experts: int, hidden: tuple[int, ...], num_heads: int,
                 rng: np.random.Generator):
        self.experts = [
            Mlp([in_dim, *hidden], output_activation="relu", name=f"experts.{n}", rng=rng)
            for n in range(num_experts)
        ]
        self.gates = [
            Dense(in_dim, num_experts, "softmax", bias=False, name=f"gates.{k}", rng=rng)
            for k in range(num_heads)
        ]
        self.out_dim = hidden[-1]

    def named_parameters(self):
        for e in self.experts:
            yield from e.named_parameters()
        for g in self.gates:
            yield from g.named_parameters()

    def gate_weights(self, xe: np.ndarray) -> list[np.ndarray]:
        return [g.forward(xe)[0] for g in self.gates]

    def forward(self, xe: np.ndarray):
        outs, e_caches = zip(*(e.forward(xe) for e in self.experts))
        stacked = np.stack(outs, axis=1)  # (n, N, width)
        gates, g_caches = zip(*(g.forward(xe) for g in self.gates))
        phis = [np.einsum("nj,njw->nw", g, stacked) for g in gates]
        return phis, (stacked, e_caches, gates, g_caches)

    def backward(self, cache, grad_phis: list[np.ndarray], grads: GradientSet) -> np.ndarray:
        stacked, e_caches, gates, g_caches = cache
        grad_stacked = np.zeros_like(stacked)
        grad_xe = 0.0
        for gate, g, gc, gphi in zip(self.gates, gates, g_caches, grad_phis):
            grad_stacked += g[:, :, None] * gphi[:, None, :]
            grad_g = np.einsum("nw,njw->nj", gphi, stacked)
            grad_xe = grad_xe + gate.backward(gc, grad_g, grads)
        for n, (expert, ec) in enumerate(zip(self.experts, e_caches)):
            grad_xe = grad_xe + expert.backward(ec, grad_stacked[:, n, :], grads)
        return grad_xe


class SharedBottom:
    """One ReLU MLP whose output feeds every head."""

    def __init__(self, in_dim: int, hidden: tuple[int, ...], num_heads: int, rng: np.random.Generator):
        self.bottom = Mlp([in_dim, *hidden], output_activation="relu", name="bottom", rng=rng)
        self.num_heads = num_heads
        self.out_dim = hidden[-1]

    def named_parameters(self):
        yield from self.bottom.named_parameters()

    def forward(self, xe: np.ndarray):
        phi, cache = self.bottom.forward(xe)
        return [phi] * self.num_heads, cache

    def backward(self, cache, grad_phis: list[np.ndarray], grads: GradientSet) -> np.ndarray:
        return self.bottom.backward(cache, sum(grad_phis), grads)


class SeparateBottoms:
    """One private ReLU MLP per head (T-Learner style)."""

    def __init__(self, in_dim: int, hidden: tuple[int, ...], num_heads: int, rng: np.random.Generator):
        self.bottoms = [
            Mlp([in_dim, *hidden], output_activation="relu", name=f"bottoms.{k}", rng=rng)
            for k in range(num_heads)
        ]
        self.out_dim = hidden[-1]

    def named_parameters(self):
        for b in self.bottoms:
            yield from b.named_parameters()

    def forward(self, xe: np.ndarray):
        outs, caches = zip(*(b.forward(xe) for b in self.bottoms))
        return list(outs), caches

    def backward(self, cache, grad_phis: list[np.ndarray], grads: GradientSet) -> np.ndarray:
        return sum(b.backward(c, g, grads) for b, c, g in zip(self.bottoms, cache, grad_phis))


def linear_mmd2(a: np.ndarray, b: np.ndarray) -> float:
    """Squared MMD with a linear kernel: squared distance between sample means."""
    diff = a.mean(axis=0) - b.mean(axis=0)
    return float(diff @ diff)


def factual_mse(pred: np.ndarray, y: np.ndarray, t: np.ndarray, num_treatments: int):
    """Sum over arms of the MSE on that arm's own samples; empty arms contribute 0."""
    loss = 0.0
    grad = np.zeros_like(pred)
    for k in range(num_treatments + 1):
        mask = t == k
        if not mask.any():
            continue
        l, g = mse_loss(pred[mask], y[mask])
        loss += l
        grad[mask] = g
    return loss, grad


class UpliftModel:
    """Common training/prediction machinery; subclasses supply the factual forward pass."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.kind = config.kind
        self.num_treatments = config.num_treatments
        rng = np.random.default_rng(config.seed)
        self.encoder = FeatureEncoder(config.features, rng)
        self._build(rng)
        self._tape = None

    def _build(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def _parts(self) -> list:
        raise NotImplementedError

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        out = list(self.encoder.named_parameters())
        for part in self._parts():
            out.extend(part.named_parameters())
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    @property
    def input_dim(self) -> int:
        return len(self.config.features)

    def _check_t(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if t.size and (t.min() < 0 or t.max() > self.num_treatments):
            bad = t[(t < 0) | (t > self.num_treatments)][0]
            raise DataError(f"treatment label {bad} outside 0..{self.num_treatments}")
        return t

    def predict(self, x: np.ndarray) -> UpliftPrediction:
        xe, _ = self.encoder.forward(np.asarray(x, dtype=np.float64))
        mu0, tau = self._predict_encoded(xe)
        return UpliftPrediction(mu0, tau)

    def _regularizer(self) -> tuple[float, float]:
        """Penalty value and the scale c such that d(penalty)/d(theta) = c * theta."""
        lam = self.config.l2_lambda
        if lam == 0:
            return 0.0, 0.0
        sq = sum(float(np.sum(p * p)) for _, p in self.named_parameters())
        if self.config.l2_squared:
            return lam * sq, 2.0 * lam
        norm = math.sqrt(sq)
        return lam * norm, (lam / norm if norm > 0 else 0.0)

    def forward_loss(self, x: np.ndarray, t: np.ndarray, y: np.ndarray) -> float:
        """Masked joint loss on a batch; caches what ``backward`` needs."""
        t = self._check_t(t)
        y = np.asarray(y, dtype=np.float64)
        if len(t) == 0:
            raise DataError("empty batch")
        xe, enc_cache = self.encoder.forward(np.asarray(x, dtype=np.float64))
        pred, cache, extra = self._factual(xe, t)
        data_loss, grad_pred = factual_mse(pred, y, t, self.num_treatments)
        reg, reg_scale = self._regularizer()
        self._tape = (enc_cache, cache, grad_pred, reg_scale)
        return data_loss + extra + reg

    def backward(self) -> GradientSet:
        if self._tape is None:
            raise StateError("backward() called without a preceding forward_loss()")
        enc_cache, cache, grad_pred, reg_scale = self._tape
        self._tape = None
        grads: GradientSet = {}
        grad_xe = self._factual_backward(cache, grad_pred, grads)
        self.encoder.backward(enc_cache, grad_xe, grads)
        for name, p in self.named_parameters():
            g = grads.get(name)
            if g is None:
                g = grads[name] = np.zeros_like(p)
            if reg_scale:
                g += reg_scale * p
        return grads

    def loss_and_grad(self, x, t, y) -> tuple[float, GradientSet]:
        loss = self.forward_loss(x, t, y)
        return loss, self.backward()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(params) != set(state):
            missing = sorted(set(params) ^ set(state))
            raise ConfigError(f"state dict keys do not match model parameters: {missing[:5]}")
        for k, p in params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.size != p.size:
                raise ConfigError(f"parameter {k}: expected {p.size} values, got {v.size}")
            p[...] = v.reshape(p.shape)


class HeadsModel(UpliftModel):
    """Representation module plus K+1 MLP heads.

    With ``reparameterized`` head 0 predicts the control response and head k
    predicts the uplift of arm k, so ``mu_k = mu0 + tau_k``. Without it every
    head predicts a response directly.
    """

    representation_cls = MMoE
    reparameterized = True

    def _build(self, rng):
        cfg = self.config
        k1 = cfg.num_treatments + 1
        d = self.encoder.out_dim
        if self.representation_cls is MMoE:
            self.representation = MMoE(d, cfg.num_experts, cfg.expert_hidden, k1, rng)
        else:
            self.representation = self.representation_cls(d, cfg.expert_hidden, k1, rng)
        width = self.representation.out_dim
        self.heads = [
            Mlp([width, *cfg.head_hidden, 1], name=f"heads.{k}", rng=rng) for k in range(k1)
        ]
        self.mmd_alpha = cfg.mmd_alpha if self.kind is ModelKind.SharedBottomMultiHead_MMD else 0.0

    def _parts(self):
        return [self.representation, *self.heads]

    def _heads_forward(self, xe):
        phis, rep_cache = self.representation.forward(xe)
        outs, head_caches = zip(*(h.forward(phi) for h, phi in zip(self.heads, phis)))
        return np.concatenate(outs, axis=1), phis, (rep_cache, head_caches)

    def _predict_encoded(self, xe):
        out, _, _ = self._heads_forward(xe)
        mu0 = out[:, 0]
        if self.reparameterized:
            return mu0, out[:, 1:]
        return mu0, out[:, 1:] - mu0[:, None]

    def _mmd(self, phi: np.ndarray, t: np.ndarray):
        value = 0.0
        grad = np.zeros_like(phi)
        control = t == 0
        if not control.any():
            return value, grad
        c_mean = phi[control].mean(axis=0)
        for k in range(1, self.num_treatments + 1):
            arm = t == k
            if not arm.any():
                continue
            diff = phi[arm].mean(axis=0) - c_mean
            value += self.mmd_alpha * float(diff @ diff)
            grad[arm] += 2.0 * self.mmd_alpha * diff / arm.sum()
            grad[control] -= 2.0 * self.mmd_alpha * diff / control.sum()
        return value, grad

    def _factual(self, xe, t):
        out, phis, caches = self._heads_forward(xe)
        rows = np.arange(len(t))
        if self.reparameterized:
            pred = out[:, 0] + np.where(t > 0, out[rows, t], 0.0)
        else:
            pred = out[rows, t]
        extra, grad_phi_extra = 0.0, None
        if self.mmd_alpha > 0:
            extra, grad_phi_extra = self._mmd(phis[0], t)
        return pred, (out.shape, t, caches, grad_phi_extra), extra

    def _factual_backward(self, cache, grad_pred, grads):
        shape, t, (rep_cache, head_caches), grad_phi_extra = cache
        rows = np.arange(len(t))
        grad_out = np.zeros(shape)
        if self.reparameterized:
            grad_out[:, 0] = grad_pred
            treated = t > 0
            grad_out[rows[treated], t[treated]] += grad_pred[treated]
        else:
            grad_out[rows, t] = grad_pred
        grad_phis = [
            h.backward(c, grad_out[:, k : k + 1], grads)
            for k, (h, c) in enumerate(zip(self.heads, head_caches))
        ]
        if grad_phi_extra is not None:
            grad_phis[0] = grad_phis[0] + grad_phi_extra
        return self.representation.backward(rep_cache, grad_phis, grads)


class M3TN(HeadsModel):
    representation_cls = MMoE
    reparameterized = True


class M3TNNoMMoE(HeadsModel):
    representation_cls = SharedBottom
    reparameterized = True


class M3TNNoRM(HeadsModel):
    representation_cls = MMoE
    reparameterized = False


class SharedBottomMultiHead(HeadsModel):
    representation_cls = SharedBottom
    reparameterized = False


class TLearner(HeadsModel):
    representation_cls = SeparateBottoms
    reparameterized = False


class SLearner(UpliftModel):
    """One MLP over features concatenated with a one-hot treatment indicator."""

    def _build(self, rng):
        cfg = self.config
        dims = [self.encoder.out_dim + cfg.num_treatments + 1, *cfg.expert_hidden, *cfg.head_hidden, 1]
        self.net = Mlp(dims, name="net", rng=rng)

    def _parts(self):
        return [self.net]

    def _with_arm(self, xe, t):
        onehot = np.zeros((len(xe), self.num_treatments + 1))
        onehot[np.arange(len(xe)), t] = 1.0
        return np.concatenate([xe, onehot], axis=1)

    def _predict_encoded(self, xe):
        outs = [
            self.net.forward(self._with_arm(xe, np.full(len(xe), k)))[0][:, 0]
            for k in range(self.num_treatments + 1)
        ]
        mu0 = outs[0]
        return mu0, np.stack([o - mu0 for o in outs[1:]], axis=1)

    def _factual(self, xe, t):
        out, cache = self.net.forward(self._with_arm(xe, t))
        return out[:, 0], (cache, xe.shape[1]), 0.0

    def _factual_backward(self, cache, grad_pred, grads):
        net_cache, d = cache
        grad_in = self.net.backward(net_cache, grad_pred[:, None], grads)
        return grad_in[:, :d]


MODEL_CLASSES = {
    ModelKind.M3TN: M3TN,
    ModelKind.M3TN_NoMMoE: M3TNNoMMoE,
    ModelKind.M3TN_NoRM: M3TNNoRM,
    ModelKind.SLearner: SLearner,
    ModelKind.TLearner: TLearner,
    ModelKind.SharedBottomMultiHead: SharedBottomMultiHead,
    ModelKind.SharedBottomMultiHead_MMD: SharedBottomMultiHead,
}


def build_model(config: ModelConfig) -> UpliftModel:
    try:
        cls = MODEL_CLASSES[ModelKind.parse(config.kind)]
    except KeyError:
        raise ConfigError(f"no model registered for kind {config.kind!r}") from None
    return cls(config)


def predict_uplift(model: UpliftModel, dataset: Dataset, batch_size: int = 8192) -> UpliftPrediction:
    """Batched inference over a dataset; never mutates the model."""
    if dataset.x.shape[1] != model.input_dim:
        raise DataError(
            f"dataset has {dataset.x.shape[1]} feature columns, model was built for {model.input_dim}"
        )
    if dataset.num_treatments > model.num_treatments:
        raise DataError(
            f"dataset has {dataset.num_treatments} treatment arms, model was built for {model.num_treatments}"
        )
    if len(dataset) == 0:
        return UpliftPrediction(np.zeros(0), np.zeros((0, model.num_treatments)))
    parts = [model.predict(dataset.x[i : i + batch_size]) for i in range(0, len(dataset), batch_size)]
    return UpliftPrediction(
        np.concatenate([p.mu0 for p in parts]), np.concatenate([p.tau for p in parts])
    )


CHECKPOINT_FORMAT = "m3tn-checkpoint/1"


def save_checkpoint(path: str | Path, model: UpliftModel, preprocessing: dict | None = None) -> None:
    """JSON checkpoint: config, flat parameter arrays and the feature-encoding spec.

    Floats go through ``repr`` so save -> load is bit-exact.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "shapes": {k: list(v.shape) for k, v in model.named_parameters()},
        "params": {k: v.ravel().tolist() for k, v in model.named_parameters()},
        "preprocessing": preprocessing or {},
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[UpliftModel, dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a checkpoint (format {doc.get('format')!r})")
    model = build_model(ModelConfig.from_dict(doc["config"]))
    model.load_state_dict({k: np.array(v, dtype=np.float64) for k, v in doc["params"].items()})
    return model, doc.get("preprocessing", {})
