"""Minibatch training loop: batching, Adam, and the joint-objective
gradient partition.

For the joint objective the two terms touch disjoint parameter sets by
construction: the weighted-alignment term (propensities detached) updates
only the embedding tables, and the relation-space term (base embeddings
frozen) updates only the projection matrices. Setting
propensity_grad_through lets the weighted alignment also reach the
projection matrices through the propensity estimates.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import evaluation, losses, propensity
from .data import InteractionSet, SplitBundle, SyntheticWorld
from .embedding import (
    EmbeddingTable,
    ProjectionPair,
    init_model,
    normalize_rows_full,
)
from .errors import ConfigError, DataError, NumericalError
from .util import debug_enabled, rng_from, sigmoid

log = logging.getLogger(__name__)

OBJECTIVES = ("directau", "uctrl", "ipw_align_oracle", "ipw_align_pop")

#: Validation ranking cutoff used for model selection.
SELECTION_K = 20


@dataclass
class TrainConfig:
    objective: str = "directau"
    d: int = 64
    gamma: float = 1.0
    lambda_rel: float = 1.0
    mu: float = 0.1
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 1024
    epochs: int = 100
    seed: int = 0
    eval_every: int = 10
    scoring: str = "dot"
    propensity_grad_through: bool = False
    init_scale: float = 0.01
    pop_exponent: float = 0.5
    # Alternate the joint objective across steps (odd steps update
    # embeddings, even steps projections) instead of the default
    # single-pass update of both per batch.
    alternating: bool = False
    # Diagnostic only: run the joint objective with all alignment weights
    # forced to 1 (the embedding path then matches the biased objective).
    force_unit_weights: bool = False

    def validate(self) -> "TrainConfig":
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.d < 1:
            raise ConfigError("d must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.gamma < 0 or self.lambda_rel < 0:
            raise ConfigError("gamma and lambda_rel must be >= 0")
        if not 0 < self.mu < 1:
            raise ConfigError("mu must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.scoring not in ("dot", "cosine"):
            raise ConfigError(f"unknown scoring rule {self.scoring!r}")
        if self.init_scale < 0:
            raise ConfigError("init_scale must be >= 0")
        if self.pop_exponent < 0:
            raise ConfigError("pop_exponent must be >= 0")
        return self


class Adam:
    """Plain Adam with bias correction and decoupled weight decay.

    Moments live in float64 keyed by tensor name; one shared step counter
    advances per batch.
    """

    def __init__(
        self,
        shapes: dict[str, tuple[int, ...]],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros(s, dtype=np.float64) for k, s in shapes.items()}
        self.v = {k: np.zeros(s, dtype=np.float64) for k, s in shapes.items()}

    def step(
        self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]
    ) -> dict[str, np.ndarray]:
        """One update over the tensors named in grads; returns new values."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        out = {}
        for name, g in grads.items():
            p = params[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            out[name] = p - self.lr * update - self.lr * self.weight_decay * p
        return out


@dataclass
class TrainState:
    model: EmbeddingTable
    projections: ProjectionPair
    opt: Adam
    step: int = 0
    seed: int = 0


@dataclass
class StepTerms:
    main: losses.LossTerms
    relation: losses.LossTerms | None
    total: float


@dataclass
class TrainResult:
    state: TrainState
    best_model: EmbeddingTable
    best_projections: ProjectionPair
    best_epoch: int | None
    best_val_ndcg: float | None
    history: list[dict] = field(default_factory=list)


def make_batches(
    train: InteractionSet, batch_size: int, seed: int, epoch: int
) -> list[np.ndarray]:
    """Seeded permutation of all clicked pairs chunked into batches. A
    trailing single-pair batch is merged into the previous one."""
    if len(train) == 0:
        raise DataError("cannot batch an empty training set")
    rng = rng_from(seed, 51, epoch)
    perm = rng.permutation(len(train))
    pairs = train.pairs[perm]
    chunks = [pairs[i : i + batch_size] for i in range(0, len(pairs), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def init_state(m: int, n: int, config: TrainConfig) -> TrainState:
    model, projections = init_model(m, n, config.d, config.seed, config.init_scale)
    shapes = {
        "user_vecs": (m, config.d),
        "item_vecs": (n, config.d),
        "m_user": (config.d, config.d),
        "m_item": (config.d, config.d),
    }
    opt = Adam(shapes, lr=config.lr, weight_decay=config.weight_decay)
    return TrainState(model, projections, opt, step=0, seed=config.seed)


def _check_finite_grads(grads: dict[str, np.ndarray], step: int) -> None:
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(
                f"non-finite gradient in tensor {name!r} at step {step}"
            )


def _batch_weights(
    objective: str,
    pairs: np.ndarray,
    config: TrainConfig,
    world: SyntheticWorld | None,
    pop_table: np.ndarray | None,
) -> np.ndarray | None:
    """Weights for the non-learned sources; None means compute learned."""
    b = len(pairs)
    if objective == "directau" or config.force_unit_weights:
        return np.ones(b, dtype=np.float64)
    if objective == "ipw_align_oracle":
        if world is None:
            raise ConfigError("objective ipw_align_oracle requires a synthetic world")
        return propensity.estimate_oracle(world, pairs, config.mu).weights()
    if objective == "ipw_align_pop":
        if pop_table is None:
            raise ConfigError("objective ipw_align_pop requires popularity weights")
        return 1.0 / pop_table[pairs[:, 1]]
    return None  # learned, computed from the relation projections


def train_step(
    state: TrainState,
    pairs: np.ndarray,
    config: TrainConfig,
    world: SyntheticWorld | None = None,
    pop_table: np.ndarray | None = None,
) -> StepTerms:
    """One optimizer step on one batch of positive pairs. Mutates state."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    model, proj = state.model, state.projections
    uids, u_inv = np.unique(pairs[:, 0], return_inverse=True)
    iids, i_inv = np.unique(pairs[:, 1], return_inverse=True)
    user_rows = model.user_vecs[uids].astype(np.float64)
    item_rows = model.item_vecs[iids].astype(np.float64)

    relation_terms = None
    grads: dict[str, np.ndarray] = {}
    weights = _batch_weights(config.objective, pairs, config, world, pop_table)

    if config.objective == "uctrl":
        base_u_norm, _, _ = normalize_rows_full(user_rows)
        base_i_norm, _, _ = normalize_rows_full(item_rows)
        relation_terms, g_mu, g_mi, forward = losses.relation_param_grads(
            base_u_norm,
            base_i_norm,
            u_inv,
            i_inv,
            proj.m_user.astype(np.float64),
            proj.m_item.astype(np.float64),
            config.lambda_rel,
        )
        if weights is None:
            dots = np.einsum(
                "bd,bd->b",
                forward.proj_user_norm[u_inv],
                forward.proj_item_norm[i_inv],
            )
            omega_raw = sigmoid(dots)
            omega = propensity.clip(omega_raw, config.mu)
            weights = 1.0 / omega
        else:
            omega_raw = None

        main_terms, g_user, g_item = losses.dau_param_grads(
            user_rows, item_rows, u_inv, i_inv, weights, config.gamma
        )
        if config.propensity_grad_through and omega_raw is not None:
            d2 = losses.pair_sq_dists(base_u_norm[u_inv], base_i_norm[i_inv])
            extra_mu, extra_mi = losses.ipw_through_projection_grads(
                forward,
                base_u_norm,
                base_i_norm,
                u_inv,
                i_inv,
                omega_raw,
                clip_active=omega_raw <= config.mu,
                base_sq_dists=d2,
            )
            g_mu = g_mu + extra_mu
            g_mi = g_mi + extra_mi
        grads["m_user"] = g_mu
        grads["m_item"] = g_mi
    else:
        main_terms, g_user, g_item = losses.dau_param_grads(
            user_rows, item_rows, u_inv, i_inv, weights, config.gamma
        )

    # Dense gradients: rows outside the batch carry zero gradient but still
    # see momentum decay, the standard dense-Adam semantics.
    g_user_full = np.zeros((model.m, model.d), dtype=np.float64)
    g_user_full[uids] = g_user
    g_item_full = np.zeros((model.n, model.d), dtype=np.float64)
    g_item_full[iids] = g_item
    grads["user_vecs"] = g_user_full
    grads["item_vecs"] = g_item_full

    if config.objective == "uctrl" and config.alternating:
        if (state.opt.t + 1) % 2 == 1:  # odd steps train the embeddings
            grads.pop("m_user", None)
            grads.pop("m_item", None)
        else:  # even steps train the projections
            grads.pop("user_vecs")
            grads.pop("item_vecs")
    _check_finite_grads(grads, state.step + 1)

    params = {
        "user_vecs": model.user_vecs.astype(np.float64),
        "item_vecs": model.item_vecs.astype(np.float64),
        "m_user": proj.m_user.astype(np.float64),
        "m_item": proj.m_item.astype(np.float64),
    }
    new = state.opt.step(params, grads)
    state.step = state.opt.t
    if "user_vecs" in new:
        model.user_vecs = new["user_vecs"].astype(np.float32)
        model.item_vecs = new["item_vecs"].astype(np.float32)
    if "m_user" in new:
        proj.m_user = new["m_user"].astype(np.float32)
        proj.m_item = new["m_item"].astype(np.float32)
    if debug_enabled():
        model.check_finite()
        proj.check_finite()

    total = main_terms.total + (relation_terms.total if relation_terms else 0.0)
    return StepTerms(main_terms, relation_terms, total)


def _default_eval(model, train, validation, scoring):
    report = evaluation.evaluate_topk(
        model, train, validation, k=SELECTION_K, scoring=scoring
    )
    return report.recall_at_k, report.ndcg_at_k


def train(
    data: SplitBundle,
    config: TrainConfig,
    world: SyntheticWorld | None = None,
    eval_fn=None,
    quiet: bool = True,
) -> TrainResult:
    """Run the full loop and keep the checkpoint with the best validation
    ranking quality.

    eval_fn(model, projections, epoch) -> (recall, ndcg) may be injected
    for tests; the default ranks the validation set with the training items
    masked. History records one JSON-ready dict per epoch.
    """
    config.validate()
    train_set = data.train
    if len(train_set) == 0:
        raise DataError("training set is empty")
    if config.objective == "ipw_align_oracle" and world is None:
        raise ConfigError("objective ipw_align_oracle requires a synthetic world")

    pop_table = None
    if config.objective == "ipw_align_pop":
        pop_table = propensity.item_popularity_weights(
            train_set, config.pop_exponent, config.mu
        )

    state = init_state(train_set.m, train_set.n, config)
    can_eval = eval_fn is not None or len(data.validation) > 0
    if eval_fn is None and can_eval:
        eval_fn = lambda model, proj, epoch: _default_eval(  # noqa: E731
            model, train_set, data.validation, config.scoring
        )

    best_metric = None
    best_epoch = None
    best_model = state.model.copy()
    best_proj = state.projections.copy()
    history: list[dict] = []

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        sums = {
            "align": 0.0,
            "uniform_user": 0.0,
            "uniform_item": 0.0,
            "relation_align": 0.0,
            "relation_uniform": 0.0,
            "total": 0.0,
        }
        batches = make_batches(train_set, config.batch_size, config.seed, epoch)
        for batch_pairs in batches:
            terms = train_step(state, batch_pairs, config, world, pop_table)
            sums["align"] += terms.main.align
            sums["uniform_user"] += terms.main.uniform_user
            sums["uniform_item"] += terms.main.uniform_item
            if terms.relation is not None:
                sums["relation_align"] += terms.relation.align
                sums["relation_uniform"] += (
                    terms.relation.uniform_user + terms.relation.uniform_item
                ) / 2.0
            sums["total"] += terms.total
        record = {k: v / len(batches) for k, v in sums.items()}
        record["epoch"] = epoch

        val_recall = val_ndcg = None
        if can_eval and (epoch % config.eval_every == 0 or epoch == config.epochs):
            val_recall, val_ndcg = eval_fn(state.model, state.projections, epoch)
            if val_ndcg is not None and (
                best_metric is None or val_ndcg > best_metric
            ):
                best_metric = val_ndcg
                best_epoch = epoch
                best_model = state.model.copy()
                best_proj = state.projections.copy()
        record["val_recall20"] = val_recall
        record["val_ndcg20"] = val_ndcg
        record["wall_ms"] = (time.perf_counter() - t0) * 1000.0
        history.append(record)
        if not quiet:
            log.info(
                "epoch %d: total=%.5f align=%.5f val_ndcg20=%s",
                epoch,
                record["total"],
                record["align"],
                "n/a" if val_ndcg is None else f"{val_ndcg:.4f}",
            )

    if best_metric is None:
        best_model = state.model.copy()
        best_proj = state.projections.copy()
    return TrainResult(state, best_model, best_proj, best_epoch, best_metric, history)


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)
