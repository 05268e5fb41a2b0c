"""Loss functions over scores, with gradients w.r.t. every input score.

All functions accept scalars or equally shaped arrays and reduce by
summation.  Conventions:

* ``lnsig(x) = -ln sigmoid(x)``, applied to an *ordered* difference
  (positive minus negative).
* A penalty ``phi`` is applied to a *violation* ``delta`` (how far a sample
  sits on the wrong side): ``phi_lnsig(delta) = lnsig(-delta)`` and
  ``phi_hinge(delta, m) = max(0, delta + m)``.
* Hinge subgradients are 0 at the kink.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FAMILIES = ("pointwise-ce", "pairwise-lnsig", "uib-lnsig", "sml", "sml-uib")
UIB_FAMILIES = ("uib-lnsig", "sml-uib")


@dataclass(frozen=True)
class LossSpec:
    family: str
    alpha: float = 1.0
    lam: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown loss family {self.family!r}; expected one of {FAMILIES}")
        if self.is_uib and not self.alpha > 0:
            raise ValueError("alpha must be > 0 for UIB losses")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lambda and gamma must be >= 0")

    @property
    def is_uib(self) -> bool:
        return self.family in UIB_FAMILIES

    @property
    def is_sml(self) -> bool:
        return self.family in ("sml", "sml-uib")


@dataclass
class LossValue:
    total: float
    terms: dict[str, float] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def lnsig(x):
    """``-ln sigmoid(x)`` without overflow."""
    return np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def phi_lnsig(delta):
    return lnsig(-np.asarray(delta, dtype=np.float64))


def phi_lnsig_grad(delta):
    return sigmoid(delta)


def hinge(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def hinge_grad(x):
    return (np.asarray(x, dtype=np.float64) > 0.0).astype(np.float64)


def _sum(x) -> float:
    return float(np.sum(x))


def pairwise_bpr_loss(s_p, s_n) -> LossValue:
    s_p = np.asarray(s_p, dtype=np.float64)
    s_n = np.asarray(s_n, dtype=np.float64)
    val = lnsig(s_p - s_n)
    w = sigmoid(s_n - s_p)
    total = _sum(val)
    return LossValue(total, {"pair": total}, {"s_p": -w, "s_n": w})


def uib_loss(b_u, pos_scores, neg_scores, alpha: float, phi: str = "lnsig",
             margin: float = 0.0) -> LossValue:
    """Boundary loss ``sum_p phi(b - s_p) + alpha * sum_n phi(s_n - b)``.

    ``b_u`` is a scalar (one user) or broadcastable against both score
    arrays; its gradient has the shape of ``b_u``.
    """
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    b = np.asarray(b_u, dtype=np.float64)
    sp = np.asarray(pos_scores, dtype=np.float64)
    sn = np.asarray(neg_scores, dtype=np.float64)
    dp = b - sp if sp.ndim <= b.ndim else b[..., None] - sp
    dn = sn - b if sn.ndim <= b.ndim else sn - b[..., None]
    if phi == "lnsig":
        lp, ln_ = phi_lnsig(dp), phi_lnsig(dn)
        gp, gn = phi_lnsig_grad(dp), phi_lnsig_grad(dn)
    elif phi == "hinge":
        lp, ln_ = hinge(dp + margin), hinge(dn + margin)
        gp, gn = hinge_grad(dp + margin), hinge_grad(dn + margin)
    else:
        raise ValueError(f"unknown phi {phi!r}")
    L_p, L_n = _sum(lp), _sum(ln_)
    gb = _reduce_to(gp, b.shape) - alpha * _reduce_to(gn, b.shape)
    return LossValue(L_p + alpha * L_n, {"L_p": L_p, "L_n": L_n},
                     {"s_p": -gp, "s_n": alpha * gn, "b_u": gb})


def _reduce_to(g, shape):
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=-1)
    return g


def pointwise_ce_loss(raw_score, label) -> LossValue:
    """Binary cross-entropy on a logit."""
    s = np.asarray(raw_score, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    val = np.logaddexp(0.0, s) - y * s
    total = _sum(val)
    pos = _sum(val * y)
    return LossValue(total, {"L_pos": pos, "L_neg": total - pos}, {"s": sigmoid(s) - y})


def sml_loss(s_up, s_un, s_np, m_u, n_u, lam: float, gamma: float) -> LossValue:
    """Metric hinge loss with adaptive per-user margins.

    ``L_A = |s_un - s_up + m_u|+``, ``L_B = |s_np - s_up + n_u|+`` and the
    margin regularizer ``L_AM = -(m_u + n_u)``.
    """
    s_up, s_un, s_np, m_u, n_u = (np.asarray(v, dtype=np.float64) for v in (s_up, s_un, s_np, m_u, n_u))
    a = s_un - s_up + m_u
    bb = s_np - s_up + n_u
    LA, LB = hinge(a), hinge(bb)
    ga, gb = hinge_grad(a), hinge_grad(bb)
    LAM = -(m_u + n_u) * np.ones_like(a)
    terms = {"L_A": _sum(LA), "L_B": _sum(LB), "L_AM": _sum(LAM)}
    total = terms["L_A"] + lam * terms["L_B"] + gamma * terms["L_AM"]
    grads = {"s_up": -ga - lam * gb, "s_un": ga, "s_np": lam * gb,
             "m_u": ga - gamma, "n_u": lam * gb - gamma}
    return LossValue(total, terms, grads)


def sml_uib_loss(s_up, s_un, b_u, s_np, m_u, n_u, alpha: float, lam: float, gamma: float) -> LossValue:
    """SML with its main hinge replaced by two boundary hinges:
    ``L'_A = |s_un - b_u + m_u|+ + alpha * |b_u - s_up + m_u|+``."""
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    # one term per (positive, negative) triple, so broadcast everything first
    s_up, s_un, b, s_np, m_u, n_u = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (s_up, s_un, b_u, s_np, m_u, n_u)))
    an = s_un - b + m_u
    ap = b - s_up + m_u
    bb = s_np - s_up + n_u
    gn, gp, gb = hinge_grad(an), hinge_grad(ap), hinge_grad(bb)
    LAn, LAp, LB = _sum(hinge(an)), _sum(hinge(ap)), _sum(hinge(bb))
    LAM = _sum(-(m_u + n_u))
    LA = LAn + alpha * LAp
    total = LA + lam * LB + gamma * LAM
    terms = {"L_A": LA, "L_p": LAp, "L_n": LAn, "L_B": LB, "L_AM": LAM}
    grads = {"s_up": -alpha * gp - lam * gb, "s_un": gn, "b_u": alpha * gp - gn,
             "s_np": lam * gb, "m_u": gn + alpha * gp - gamma, "n_u": lam * gb - gamma}
    return LossValue(total, terms, grads)


def effective_pair_stats(pos_scores, neg_scores, b_u=None, kind: str = "both"):
    """Fractions of comparisons that are misordered ("corrupted"), ties included.

    Returns ``(pairwise_fraction, uib_fraction)``; an entry is ``None`` when
    ``kind`` does not ask for it.
    """
    sp = np.asarray(pos_scores, dtype=np.float64).reshape(-1)
    sn = np.asarray(neg_scores, dtype=np.float64).reshape(-1)
    if sp.size == 0 or sn.size == 0:
        raise ValueError("score lists must be nonempty")
    if kind not in ("pairwise", "uib", "both"):
        raise ValueError(f"unknown kind {kind!r}")
    pair = uib = None
    if kind in ("pairwise", "both"):
        srt = np.sort(sn)
        bad = sn.size - np.searchsorted(srt, sp, side="left")
        pair = float(bad.sum()) / (sp.size * sn.size)
    if kind in ("uib", "both"):
        if b_u is None:
            raise ValueError("b_u is required for the boundary fraction")
        bad = int(np.count_nonzero(sp <= b_u)) + int(np.count_nonzero(sn >= b_u))
        uib = bad / (sp.size + sn.size)
    return pair, uib
