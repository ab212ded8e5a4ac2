"""Pseudo-label correction and the training objectives, each returning its
value together with analytic gradients."""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgument
from .numerics import log_sum_exp
from .protohead import sharpen

CE_EPS = 1e-12


class LossTerm(NamedTuple):
    value: float
    grads: dict
    info: dict = {}


@dataclass
class LossWeights:
    lambda_sup: float = 0.35
    lambda_entropy: float = 1.0
    lambda_sep: float = 0.1

    def __post_init__(self):
        if not 0 <= self.lambda_sup <= 1:
            raise InvalidArgument("lambda_sup must lie in [0, 1]")
        if self.lambda_entropy < 0 or self.lambda_sep < 0:
            raise InvalidArgument("regularizer weights must be >= 0")


@dataclass
class BatchViews:
    """Per-sample quantities for one mini-batch (rows align across fields).

    ``p_*`` are student posteriors at ``tau_stu``, ``pe_*`` student posteriors
    at ``tau_base`` (entropy term), ``q_*`` final teacher targets, ``h_*``
    unit projected features. ``labels`` holds -1 for unlabeled rows.
    """

    p_a: np.ndarray
    p_b: np.ndarray
    q_a: np.ndarray
    q_b: np.ndarray
    h_a: np.ndarray
    h_b: np.ndarray
    labels: np.ndarray
    pe_a: np.ndarray | None = None
    pe_b: np.ndarray | None = None
    s_a: np.ndarray | None = None
    s_b: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def labeled(self):
        return np.asarray(self.labels) >= 0


def refine_pseudo_label(q, s, normal_index):
    """Pull ``q`` toward the normal one-hot by ``w = max(0.5 - s, 0)``.

    Works row-wise on (..., K) arrays with ``s`` broadcast over the last axis.
    """
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    w = np.maximum(0.5 - s, 0.0)[..., None]
    e = np.zeros(q.shape[-1])
    e[normal_index] = 1.0
    return w * e + (1.0 - w) * q


def teacher_targets(q_teacher, s, labels, normal_index, tau_sup, label_blend=0.5):
    """PLC, sharpening, and for labeled rows a blend with the one-hot label."""
    refined = refine_pseudo_label(q_teacher, s, normal_index)
    target = sharpen(refined, tau_sup)
    labels = np.asarray(labels)
    lab = labels >= 0
    if lab.any():
        y = np.zeros_like(target[lab])
        y[np.arange(lab.sum()), labels[lab]] = 1.0
        target[lab] = label_blend * y + (1.0 - label_blend) * target[lab]
    return target


def _cross_entropy(q, p):
    """Row cross-entropies ``-sum q log p`` with the epsilon clamp."""
    clamped = p < CE_EPS
    pc = np.where(clamped, CE_EPS, p)
    values = -np.sum(q * np.log(pc), axis=-1)
    grad = np.where(clamped, 0.0, -q / pc)
    n = int(np.sum(clamped & (q > 0)))
    return values, grad, n


def loss_dapl(q_a, p_a, q_b, p_b):
    """Same-view consistency: mean of ``CE(q, p) + CE(q~, p~)`` over 2|B|.

    Teacher targets are constants; gradients are w.r.t. the student
    simplices.
    """
    q_a, p_a, q_b, p_b = (np.asarray(x, dtype=np.float64) for x in (q_a, p_a, q_b, p_b))
    b = p_a.shape[0]
    va, ga, na = _cross_entropy(q_a, p_a)
    vb, gb, nb = _cross_entropy(q_b, p_b)
    scale = 1.0 / (2.0 * b)
    return LossTerm(
        float((va.sum() + vb.sum()) * scale),
        {"p_a": ga * scale, "p_b": gb * scale},
        {"clamped": na + nb},
    )


def _one_hot(labels, k):
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return labels.astype(np.float64)
    if np.any(labels < 0):
        raise InvalidArgument("supervised loss received a sample without label")
    y = np.zeros((labels.size, k))
    y[np.arange(labels.size), labels] = 1.0
    return y


def loss_sup(y, p_a, p_b):
    """Supervised cross-entropy on both views of the labeled rows.

    ``y`` is either integer labels or one-hot rows. An empty labeled batch
    yields 0.
    """
    p_a = np.asarray(p_a, dtype=np.float64)
    p_b = np.asarray(p_b, dtype=np.float64)
    if p_a.shape[0] == 0:
        return LossTerm(0.0, {"p_a": np.zeros_like(p_a), "p_b": np.zeros_like(p_b)}, {"clamped": 0})
    if y is None:
        raise InvalidArgument("supervised loss needs labels")
    y = _one_hot(y, p_a.shape[1])
    return loss_dapl(y, p_a, y, p_b)


def loss_con_u(h, h2, tau_c, include_own_view=True):
    """InfoNCE over view-a anchors.

    Positive for anchor ``i`` is its own second view ``h2[i]``; the
    denominator runs over the other view-a features ``h[j], j != i`` and,
    with ``include_own_view``, the positive itself.
    """
    h = np.asarray(h, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    b = h.shape[0]
    if b < 2:
        raise InvalidArgument("contrastive loss needs a batch of at least 2")
    sim = h @ h.T / tau_c
    np.fill_diagonal(sim, -np.inf)
    own = np.sum(h * h2, axis=1) / tau_c
    cand = np.concatenate([sim, own[:, None]], axis=1) if include_own_view else sim
    lse = log_sum_exp(cand, axis=1)
    value = float(np.mean(lse - own))
    w = np.exp(cand - lse[:, None])
    dsim = w[:, :b] / b
    own_w = w[:, b] if include_own_view else np.zeros(b)
    c = (own_w - 1.0) / b
    dh = (dsim + dsim.T) @ h / tau_c + c[:, None] * h2 / tau_c
    dh2 = c[:, None] * h / tau_c
    return LossTerm(value, {"h_a": dh, "h_b": dh2})


def loss_con_l(h, h2, labels, tau_c, include_own_view=True):
    """Supervised contrastive loss over labeled view-a anchors.

    Positives of ``i`` are the other view-a rows sharing its label; anchors
    without positives contribute 0 but still count in the mean. The
    denominator matches ``loss_con_u``.
    """
    h = np.asarray(h, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    labels = np.asarray(labels)
    b = h.shape[0]
    if b == 0:
        return LossTerm(0.0, {"h_a": np.zeros_like(h), "h_b": np.zeros_like(h2)}, {"empty": 0})
    if b == 1:
        return LossTerm(0.0, {"h_a": np.zeros_like(h), "h_b": np.zeros_like(h2)}, {"empty": 1})
    sim = h @ h.T / tau_c
    np.fill_diagonal(sim, -np.inf)
    own = np.sum(h * h2, axis=1) / tau_c
    cand = np.concatenate([sim, own[:, None]], axis=1) if include_own_view else sim
    lse = log_sum_exp(cand, axis=1)
    pos = (labels[:, None] == labels[None, :]) & ~np.eye(b, dtype=bool)
    n_pos = pos.sum(axis=1)
    has = n_pos > 0
    pos_w = np.where(has[:, None], pos / np.maximum(n_pos, 1)[:, None], 0.0)
    sim_fin = np.where(pos, sim, 0.0)
    per_anchor = np.where(has, lse - np.sum(pos_w * sim_fin, axis=1), 0.0)
    value = float(per_anchor.sum() / b)

    w = np.exp(cand - lse[:, None]) * has[:, None]
    dsim = (w[:, :b] - pos_w) / b
    dh = (dsim + dsim.T) @ h / tau_c
    dh2 = np.zeros_like(h2)
    if include_own_view:
        c = w[:, b] / b
        dh += c[:, None] * h2 / tau_c
        dh2 = c[:, None] * h / tau_c
    return LossTerm(value, {"h_a": dh, "h_b": dh2}, {"empty": int((~has).sum())})


def loss_entropy(pe_a, pe_b):
    """Negative entropy of the batch-mean posterior over both views."""
    pe_a = np.asarray(pe_a, dtype=np.float64)
    pe_b = np.asarray(pe_b, dtype=np.float64)
    n = pe_a.shape[0] + pe_b.shape[0]
    if n == 0:
        raise InvalidArgument("entropy term needs at least one sample")
    pbar = (pe_a.sum(axis=0) + pe_b.sum(axis=0)) / n
    safe = np.maximum(pbar, CE_EPS)
    value = float(np.sum(np.where(pbar > 0, pbar * np.log(safe), 0.0)))
    g = (np.log(safe) + 1.0) / n
    return LossTerm(value, {"pe_a": np.broadcast_to(g, pe_a.shape).copy(), "pe_b": np.broadcast_to(g, pe_b.shape).copy()})


def loss_sep(mu, tau_sep):
    """Mean over prototypes of ``log mean_{j != i} exp(mu_i . mu_j / tau)``.

    The gradient is the plain Euclidean one; the optimizer projects back to
    the sphere.
    """
    mu = np.asarray(mu, dtype=np.float64)
    k = mu.shape[0]
    if k < 2:
        raise InvalidArgument("separation loss needs at least 2 prototypes")
    sim = mu @ mu.T / tau_sep
    np.fill_diagonal(sim, -np.inf)
    lse = log_sum_exp(sim, axis=1)
    value = float(np.mean(lse - np.log(k - 1)))
    w = np.exp(sim - lse[:, None]) / k
    return LossTerm(value, {"mu": (w + w.T) @ mu / tau_sep})


COMPONENTS = ("l_dapl", "l_sup", "l_con_u", "l_con_l", "l_entropy", "l_sep")


@dataclass
class TotalLoss:
    value: float
    components: dict
    grads: dict
    info: dict


def _acc(grads, key, g, w):
    if w == 0.0:
        return
    grads[key] = grads[key] + w * g


def total_loss(batch, mu, weights, temps, include_own_view=True):
    """Weighted objective and gradients w.r.t. ``p_a, p_b, pe_a, pe_b, h_a,
    h_b`` and the prototype matrix ``mu``."""
    lab = batch.labeled
    labels = np.asarray(batch.labels)
    dapl = loss_dapl(batch.q_a, batch.p_a, batch.q_b, batch.p_b)
    sup = loss_sup(labels[lab], batch.p_a[lab], batch.p_b[lab])
    con_u = loss_con_u(batch.h_a, batch.h_b, temps.tau_c, include_own_view)
    con_l = loss_con_l(batch.h_a[lab], batch.h_b[lab], labels[lab], temps.tau_c, include_own_view)
    pe_a = batch.pe_a if batch.pe_a is not None else batch.p_a
    pe_b = batch.pe_b if batch.pe_b is not None else batch.p_b
    ent = loss_entropy(pe_a, pe_b)
    sep = loss_sep(mu, temps.tau_sep)

    ls = weights.lambda_sup
    components = {
        "l_dapl": dapl.value,
        "l_sup": sup.value,
        "l_con_u": con_u.value,
        "l_con_l": con_l.value,
        "l_entropy": ent.value,
        "l_sep": sep.value,
    }
    coef = {
        "l_dapl": 1.0 - ls,
        "l_con_u": 1.0 - ls,
        "l_sup": ls,
        "l_con_l": ls,
        "l_entropy": weights.lambda_entropy,
        "l_sep": weights.lambda_sep,
    }
    value = sum(coef[k] * components[k] for k in COMPONENTS)

    grads = {
        "p_a": np.zeros_like(batch.p_a),
        "p_b": np.zeros_like(batch.p_b),
        "pe_a": np.zeros_like(pe_a),
        "pe_b": np.zeros_like(pe_b),
        "h_a": np.zeros_like(batch.h_a),
        "h_b": np.zeros_like(batch.h_b),
        "mu": np.zeros_like(mu),
    }
    _acc(grads, "p_a", dapl.grads["p_a"], coef["l_dapl"])
    _acc(grads, "p_b", dapl.grads["p_b"], coef["l_dapl"])
    if lab.any():
        g = np.zeros_like(batch.p_a)
        g[lab] = sup.grads["p_a"]
        _acc(grads, "p_a", g, coef["l_sup"])
        g = np.zeros_like(batch.p_b)
        g[lab] = sup.grads["p_b"]
        _acc(grads, "p_b", g, coef["l_sup"])
        g = np.zeros_like(batch.h_a)
        g[lab] = con_l.grads["h_a"]
        _acc(grads, "h_a", g, coef["l_con_l"])
        g = np.zeros_like(batch.h_b)
        g[lab] = con_l.grads["h_b"]
        _acc(grads, "h_b", g, coef["l_con_l"])
    _acc(grads, "h_a", con_u.grads["h_a"], coef["l_con_u"])
    _acc(grads, "h_b", con_u.grads["h_b"], coef["l_con_u"])
    _acc(grads, "pe_a", ent.grads["pe_a"], coef["l_entropy"])
    _acc(grads, "pe_b", ent.grads["pe_b"], coef["l_entropy"])
    _acc(grads, "mu", sep.grads["mu"], coef["l_sep"])
    info = {
        "clamped": dapl.info["clamped"] + sup.info["clamped"],
        "empty_positive_sets": con_l.info["empty"],
        "coefficients": coef,
    }
    return TotalLoss(float(value), components, grads, info)


def posterior_backward(p, g, temperature):
    """Chain a gradient on ``p = softmax(c / T)`` back to the cosines ``c``."""
    return p * (g - np.sum(p * g, axis=-1, keepdims=True)) / temperature


def normalize_backward(u, norm, g):
    """Chain a gradient on ``u = x / |x|`` back to ``x``."""
    return (g - u * np.sum(u * g, axis=-1, keepdims=True)) / norm
