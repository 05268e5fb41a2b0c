"""Stochastic training: batch objectives, sparse Adagrad, the epoch loop with
early stopping, corrupted-rate tracing and grid search."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import kernels, scorers
from .dataset import DatasetBundle, TrainBatch, check_sampleable, sample_batch
from .evaluation import evaluate
from .losses import (LossSpec, effective_pair_stats, pairwise_bpr_loss, pointwise_ce_loss,
                     sml_loss, sml_uib_loss, uib_loss)
from .presets import MAX_EPOCHS, METHODS, preset

_log = logging.getLogger(__name__)

ADAGRAD_EPS = 1e-10


class NumericalError(RuntimeError):
    """Non-finite loss or gradient."""


class TrainingDiverged(NumericalError):
    def __init__(self, msg: str, state=None, history=None):
        super().__init__(msg)
        self.state = state
        self.history = history or []


@dataclass
class TrainConfig:
    method: str = "bpr-uib"
    d: int = 32
    batch_size: int = 1024
    m_neg: int | None = None
    epochs: int = 500
    lr: float = 1.0
    tau: float = 0.0
    upsilon: float = 0.0
    alpha: float = 1.0
    lam: float = 0.0
    gamma: float = 0.0
    seed: int = 0
    patience: int = 20
    eval_every: int = 1
    n_layers: int = scorers.DEFAULT_K
    mlp_layers: tuple[int, ...] = scorers.DEFAULT_LAYERS
    eps: float = ADAGRAD_EPS

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {sorted(METHODS)}")
        self.mlp_layers = tuple(int(w) for w in self.mlp_layers)
        for name in ("lr", "tau", "upsilon", "lam", "gamma", "eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ValueError("batch_size, epochs and eval_every must be >= 1")
        self.loss_spec()  # validates alpha/lam/gamma for the family

    @classmethod
    def from_preset(cls, method: str, dataset: str, **overrides) -> TrainConfig:
        kw = preset(method, dataset)
        kw.setdefault("epochs", MAX_EPOCHS[dataset])
        kw.update(overrides)
        return cls(method=method, **kw)

    @property
    def kind(self) -> str:
        return METHODS[self.method][0]

    @property
    def family(self) -> str:
        return METHODS[self.method][1]

    def loss_spec(self) -> LossSpec:
        return LossSpec(self.family, self.alpha, self.lam, self.gamma)

    @property
    def negatives(self) -> int:
        """Negatives per positive: 32 for UIB losses, 4 for cross-entropy,
        1 for the pairwise baselines."""
        if self.m_neg is not None:
            return int(self.m_neg)
        if self.loss_spec().is_uib:
            return 32
        return 4 if self.family == "pointwise-ce" else 1

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mlp_layers"] = list(self.mlp_layers)
        return out

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# -- batch objective -------------------------------------------------------


@dataclass
class Corrupted:
    """Misordered comparisons split by side.

    Boundary and pointwise losses compare positives and negatives against a
    threshold separately (``pos_*`` / ``neg_*``); pairwise losses only fill
    the ``neg_*`` side with (positive, negative) pairs.
    """

    pos_bad: int = 0
    pos_n: int = 0
    neg_bad: int = 0
    neg_n: int = 0

    def __add__(self, other: Corrupted) -> Corrupted:
        return Corrupted(self.pos_bad + other.pos_bad, self.pos_n + other.pos_n,
                         self.neg_bad + other.neg_bad, self.neg_n + other.neg_n)

    @property
    def per_comparison(self) -> float:
        """Corrupted comparisons over all comparisons."""
        return (self.pos_bad + self.neg_bad) / max(self.pos_n + self.neg_n, 1)

    @property
    def balanced(self) -> float:
        """Mean of the per-side rates, i.e. the rate at equal class counts."""
        sides = [b / n for b, n in ((self.pos_bad, self.pos_n), (self.neg_bad, self.neg_n)) if n]
        return float(np.mean(sides)) if sides else 0.0


@dataclass
class BatchResult:
    total: float
    terms: dict[str, float]
    grads: scorers.Grads
    corrupted: Corrupted


def corrupted_counts(family: str, s_p, s_n, b=None) -> Corrupted:
    """Count misordered comparisons in a batch: ``s_p`` is (B,), ``s_n`` is
    (B, M), ``b`` the (B,) boundaries for boundary losses.  Ties count as
    corrupted."""
    s_p = np.asarray(s_p, dtype=np.float64)
    s_n = np.asarray(s_n, dtype=np.float64).reshape(s_p.size, -1)
    if family in ("uib-lnsig", "sml-uib", "pointwise-ce"):
        if family == "pointwise-ce":
            thr_p = thr_n = 0.0
        else:
            thr_p = np.asarray(b, dtype=np.float64)
            thr_n = thr_p[:, None]
        return Corrupted(int(np.count_nonzero(s_p <= thr_p)), int(s_p.size),
                         int(np.count_nonzero(s_n >= thr_n)), int(s_n.size))
    return Corrupted(0, 0, int(kernels.count_ge(s_p, s_n).sum()), int(s_n.size))


def batch_objective(state: scorers.ModelState, spec: LossSpec, batch: TrainBatch,
                    grads: scorers.Grads | None = None) -> BatchResult:
    """Summed loss of one batch and its parameter gradients."""
    grads = scorers.Grads(state) if grads is None else grads
    B, M = batch.negatives.shape
    users = batch.users
    fw = scorers.forward(state, np.concatenate([users, np.repeat(users, M)]),
                         np.concatenate([batch.positives, batch.negatives.reshape(-1)]))
    s_p, s_n = fw.scores[:B], fw.scores[B:].reshape(B, M)
    b = scorers.boundary_scores(state, users) if spec.is_uib else None
    fam = spec.family
    if fam == "pairwise-lnsig":
        lv = pairwise_bpr_loss(s_p[:, None], s_n)
        g_p, g_n = lv.grads["s_p"].sum(axis=1), lv.grads["s_n"]
    elif fam == "uib-lnsig":
        lv = uib_loss(b, s_p, s_n, spec.alpha)
        g_p, g_n = lv.grads["s_p"], lv.grads["s_n"]
        scorers.boundary_backward(state, users, lv.grads["b_u"], grads)
    elif fam == "pointwise-ce":
        lp = pointwise_ce_loss(s_p, 1.0)
        ln_ = pointwise_ce_loss(s_n, 0.0)
        lv = type(lp)(lp.total + ln_.total, {"L_pos": lp.total, "L_neg": ln_.total})
        g_p, g_n = lp.grads["s"], ln_.grads["s"]
    elif fam in ("sml", "sml-uib"):
        neg_flat = batch.negatives.reshape(-1)
        pos_rep = np.repeat(batch.positives, M)
        s_np = scorers.item_metric(state, neg_flat, pos_rep).reshape(B, M)
        mg = state.params["margins"][users]
        m_u, n_u = mg[:, :1], mg[:, 1:]
        if fam == "sml":
            lv = sml_loss(s_p[:, None], s_n, s_np, m_u, n_u, spec.lam, spec.gamma)
        else:
            lv = sml_uib_loss(s_p[:, None], s_n, b[:, None], s_np, m_u, n_u,
                              spec.alpha, spec.lam, spec.gamma)
            scorers.boundary_backward(state, users, lv.grads["b_u"].sum(axis=1), grads)
        g_p, g_n = lv.grads["s_up"].sum(axis=1), lv.grads["s_un"]
        scorers.item_metric_backward(state, neg_flat, pos_rep, lv.grads["s_np"].reshape(-1), grads)
        grads.add_rows("margins", users,
                       np.stack([lv.grads["m_u"].sum(axis=1), lv.grads["n_u"].sum(axis=1)], axis=1))
    else:
        raise ValueError(fam)
    scorers.backward(state, fw, np.concatenate([g_p, np.asarray(g_n).reshape(-1)]), grads)
    return BatchResult(lv.total, lv.terms, grads, corrupted_counts(fam, s_p, s_n, b))


def corrupted_rate(state: scorers.ModelState, spec: LossSpec, batch: TrainBatch,
                   balanced: bool = True) -> float:
    """Share of the batch's comparisons the current model gets wrong.

    ``balanced`` averages the positive-side and negative-side rates so that
    the negative sampling ratio does not dilute the positive side."""
    B, M = batch.negatives.shape
    s_p = scorers.score_pairs(state, batch.users, batch.positives)
    s_n = scorers.score_pairs(state, np.repeat(batch.users, M), batch.negatives.reshape(-1)).reshape(B, M)
    b = scorers.boundary_scores(state, batch.users) if spec.is_uib else None
    c = corrupted_counts(spec.family, s_p, s_n, b)
    return c.balanced if balanced else c.per_comparison


def pooled_corrupted_rate(pos_scores, neg_scores, b_u=None) -> float:
    """Single-user corrupted rate via :func:`effective_pair_stats`."""
    kind = "uib" if b_u is not None else "pairwise"
    pair, uib = effective_pair_stats(pos_scores, neg_scores, b_u, kind)
    return uib if b_u is not None else pair


# -- Adagrad ---------------------------------------------------------------


def adagrad_update(theta, acc, g, lr: float, tau: float = 0.0, eps: float = ADAGRAD_EPS):
    """One dense Adagrad step in place; ``tau * theta`` is added to ``g``."""
    g = np.asarray(g, dtype=np.float64) + tau * theta
    acc += g * g
    theta -= lr * g / (np.sqrt(acc) + eps)
    return theta, acc


@dataclass
class AdagradState:
    acc: dict[str, np.ndarray]
    eps: float = ADAGRAD_EPS

    @classmethod
    def zeros_like(cls, state: scorers.ModelState, eps: float = ADAGRAD_EPS) -> AdagradState:
        return cls({k: np.zeros_like(v) for k, v in state.params.items()}, eps)


def adagrad_step(state: scorers.ModelState, opt: AdagradState, grads: scorers.Grads,
                 lr: float, tau: float = 0.0, reg_rows: dict | None = None) -> None:
    """Apply accumulated gradients.

    Row-sparse tables update only the rows present in ``grads``; the L2 term
    ``tau * theta`` applies to the rows listed in ``reg_rows`` (defaults to
    every touched row of ``P`` and ``Q``).  Margins are clamped afterwards.
    """
    for name in grads.sparse_names():
        rows, g = grads.rows(name)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name}")
        param = state.params[name]
        if tau and name in ("P", "Q"):
            sel = rows if reg_rows is None else reg_rows.get(name)
            if sel is not None and sel.size:
                mask = np.isin(rows, sel, assume_unique=True)
                g[mask] += tau * param[rows[mask]]
        kernels.adagrad_rows(param, opt.acc[name], rows, g, lr, opt.eps)
    for name, g in grads.dense.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name}")
        adagrad_update(state.params[name], opt.acc[name], g, lr, 0.0, opt.eps)
    if "margins" in state.params:
        np.clip(state.params["margins"], 0.0, scorers.MARGIN_MAX, out=state.params["margins"])


# -- training loop ---------------------------------------------------------


@dataclass
class EfficiencyTrace:
    epochs: list[int] = field(default_factory=list)
    rates: list[float] = field(default_factory=list)
    per_comparison: list[float] = field(default_factory=list)
    samples: list[int] = field(default_factory=list)

    def tail_mean(self, fraction: float = 0.25, per_comparison: bool = False) -> float:
        """Mean rate over the final ``fraction`` of recorded epochs."""
        vals = self.per_comparison if per_comparison else self.rates
        n = max(1, int(math.ceil(len(vals) * fraction)))
        return float(np.mean(vals[-n:]))


@dataclass
class TrainResult:
    state: scorers.ModelState
    history: list[dict]
    best_epoch: int
    best_val_ndcg10: float
    trace: EfficiencyTrace
    final_state: scorers.ModelState | None = None


def init_model(config: TrainConfig, bundle: DatasetBundle) -> scorers.ModelState:
    graph = None
    if config.kind == "gcn":
        graph = scorers.GraphEncoder.from_interactions(bundle.train, config.n_layers)
    return scorers.init_state(config.kind, bundle.n_users, bundle.n_items, config.d, config.seed,
                              boundary=config.loss_spec().is_uib,
                              margins=config.loss_spec().is_sml,
                              layers=config.mlp_layers, graph=graph)


def batches_per_epoch(n_train: int, batch_size: int) -> int:
    return int(math.ceil(n_train / batch_size))


def train(config: TrainConfig, bundle: DatasetBundle, *, history_path=None, checkpoint_path=None,
          keep_final: bool = False) -> TrainResult:
    """Train with early stopping on validation NDCG@10.

    Returns the best-validation state.  ``history_path`` receives one JSON
    line per epoch; ``checkpoint_path`` is rewritten on every improvement.
    """
    spec = config.loss_spec()
    check_sampleable(bundle.train)
    state = init_model(config, bundle)
    opt = AdagradState.zeros_like(state, config.eps)
    rng = np.random.default_rng([config.seed, 0x5A4D])
    n_batches = batches_per_epoch(bundle.train.n_interactions, config.batch_size)
    M = config.negatives
    reg = config.tau + config.upsilon
    history: list[dict] = []
    trace = EfficiencyTrace()
    best_state, best_ndcg, best_epoch, since_best = state.copy(), -1.0, 0, 0
    hist_fh = open(history_path, "w") if history_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            tot: dict[str, float] = {"total": 0.0}
            cor = Corrupted()
            for _ in range(n_batches):
                batch = sample_batch(bundle.train, config.batch_size, M, rng)
                res = batch_objective(state, spec, batch)
                if not math.isfinite(res.total):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}", best_state, history)
                reg_rows = None
                if reg and config.kind == "gcn":
                    reg_rows = {"P": np.unique(batch.users),
                                "Q": np.unique(np.concatenate([batch.positives, batch.negatives.ravel()]))}
                try:
                    adagrad_step(state, opt, res.grads, config.lr, reg, reg_rows)
                except NumericalError as exc:
                    raise TrainingDiverged(f"epoch {epoch}: {exc}", best_state, history) from exc
                tot["total"] += res.total
                for k, v in res.terms.items():
                    tot[k] = tot.get(k, 0.0) + v
                cor = cor + res.corrupted
            trace.epochs.append(epoch)
            trace.rates.append(cor.balanced)
            trace.per_comparison.append(cor.per_comparison)
            trace.samples.append(cor.pos_n + cor.neg_n)
            row = {
                "epoch": epoch,
                "loss_total": tot["total"],
                "loss_pos": tot.get("L_p", tot.get("L_pos", tot.get("L_A", tot.get("pair", 0.0)))),
                "loss_neg": tot.get("L_n", tot.get("L_neg", tot.get("L_B", 0.0))),
                "corrupted_rate": cor.balanced,
                "corrupted_rate_per_comparison": cor.per_comparison,
            }
            if epoch % config.eval_every == 0 or epoch == config.epochs:
                rep = evaluate(state, bundle.cand_valid)
                row.update(val_hit1=rep.mean["hit@1"], val_hit10=rep.mean["hit@10"],
                           val_ndcg10=rep.mean["ndcg@10"], val_mrr10=rep.mean["mrr@10"])
                if rep.mean["ndcg@10"] > best_ndcg:
                    best_ndcg, best_epoch, since_best = rep.mean["ndcg@10"], epoch, 0
                    best_state = state.copy()
                    if checkpoint_path:
                        scorers.save_checkpoint(best_state, checkpoint_path)
                else:
                    since_best += 1
            history.append(row)
            if hist_fh:
                hist_fh.write(json.dumps(row) + "\n")
                hist_fh.flush()
            _log.debug("epoch %d %s", epoch, row)
            if since_best >= config.patience:
                _log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    finally:
        if hist_fh:
            hist_fh.close()
    return TrainResult(best_state, history, best_epoch, best_ndcg, trace,
                       state if keep_final else None)


# -- grid search -----------------------------------------------------------


def grid_configs(template: TrainConfig, grids: dict[str, list]) -> list[TrainConfig]:
    if not grids:
        raise ValueError("grid must name at least one hyperparameter")
    names = list(grids)
    for n in names:
        if n not in TrainConfig.field_names():
            raise ValueError(f"unknown hyperparameter {n!r}")
        if not grids[n]:
            raise ValueError(f"empty grid for {n!r}")
    return [replace(template, **dict(zip(names, combo)))
            for combo in itertools.product(*(grids[n] for n in names))]


def grid_search(template: TrainConfig, grids: dict[str, list], bundle: DatasetBundle,
                report_path=None) -> tuple[TrainConfig, list[dict]]:
    """Exhaustive search; the winner maximizes validation NDCG@10 (first wins
    ties).  The full table goes to ``report_path`` as CSV when given."""
    configs = grid_configs(template, grids)
    report = []
    for i, cfg in enumerate(configs):
        res = train(cfg, bundle)
        test = evaluate(res.state, bundle.cand_test)
        row = {"run": i, **{k: getattr(cfg, k) for k in grids},
               "best_epoch": res.best_epoch, "val_ndcg10": res.best_val_ndcg10,
               **{f"test_{k.replace('@', '')}": v for k, v in test.mean.items()}}
        report.append(row)
        _log.info("grid run %d/%d %s", i + 1, len(configs), row)
    best = max(range(len(report)), key=lambda i: (report[i]["val_ndcg10"], -i))
    if report_path:
        with open(report_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(report[0]))
            w.writeheader()
            w.writerows(report)
    return configs[best], report
