"""Novel-class-count estimation, clustering metrics with Hungarian matching,
and post-hoc OOD scoring."""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .errors import InvalidArgument, ProtoNCDError
from .numerics import log_sum_exp, normalize_unit, softmax
from .protohead import vmf_posterior

log = logging.getLogger(__name__)

CENTR_EPS = 1e-3
OOD_METHODS = ("msp", "mls", "energy")
# exact lexicographic tie-breaking costs O(n^2) assignment solves
_LEX_TIEBREAK_MAX_CELLS = 2500


# --------------------------------------------------------------------------
# assignment and clustering metrics
# --------------------------------------------------------------------------


def hungarian(cost):
    """Minimum-cost one-to-one assignment of ``min(n, m)`` pairs.

    Among optimal assignments the one returned is lexicographically smallest
    in its row-major column sequence (the matrix is padded square with
    zero-cost dummies, dummy columns ordered after real ones). Returns a list
    of ``(row, col)`` pairs sorted by row, real pairs only.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise InvalidArgument("cost must be a 2-D grid")
    if c.size == 0:
        return []
    if not np.all(np.isfinite(c)):
        raise InvalidArgument("cost entries must be finite")
    n, m = c.shape
    size = max(n, m)
    sq = np.zeros((size, size))
    sq[:n, :m] = c
    if sq.size > _LEX_TIEBREAK_MAX_CELLS:
        rows, cols = linear_sum_assignment(sq)
        return [(int(r), int(k)) for r, k in zip(rows, cols) if r < n and k < m]

    def opt(mat):
        if mat.shape[0] == 0:
            return 0.0
        r, k = linear_sum_assignment(mat)
        return float(mat[r, k].sum())

    tol = 1e-12 * max(1.0, float(np.abs(sq).sum()))
    free_rows = list(range(size))
    free_cols = list(range(size))
    target = opt(sq)
    chosen = []
    for i in range(size):
        free_rows.remove(i)
        for j in list(free_cols):
            rest_cols = [k for k in free_cols if k != j]
            rest = opt(sq[np.ix_(free_rows, rest_cols)])
            if sq[i, j] + rest <= target + tol:
                chosen.append((i, j))
                free_cols.remove(j)
                target = rest
                break
    return [(i, j) for i, j in chosen if i < n and j < m]


def contingency(labels_true, labels_pred):
    t = np.asarray(labels_true)
    p = np.asarray(labels_pred)
    if t.shape != p.shape or t.ndim != 1 or t.size == 0:
        raise InvalidArgument("label arrays must be 1-D, equal length and non-empty")
    tu, ti = np.unique(t, return_inverse=True)
    pu, pi = np.unique(p, return_inverse=True)
    table = np.zeros((tu.size, pu.size), dtype=np.int64)
    np.add.at(table, (ti, pi), 1)
    return table, tu, pu


def _entropy_counts(counts):
    n = counts.sum()
    pr = counts[counts > 0] / n
    return float(-np.sum(pr * np.log(pr)))


def nmi_score(table):
    """NMI with arithmetic-mean normalization ``2 I / (H(U) + H(V))``."""
    n = table.sum()
    a = table.sum(axis=1)
    b = table.sum(axis=0)
    hu, hv = _entropy_counts(a), _entropy_counts(b)
    if hu + hv == 0.0:
        # both partitions are a single block, hence identical
        return 1.0
    nz = table > 0
    pij = table[nz] / n
    outer = np.outer(a, b)[nz] / (n * n)
    mi = float(np.sum(pij * np.log(pij / outer)))
    return float(min(1.0, max(0.0, 2.0 * mi / (hu + hv))))


def ari_score(table):
    """Adjusted Rand index by pair counting (1.0 when the expected and
    maximum indices coincide)."""
    n = int(table.sum())
    comb2 = lambda x: x * (x - 1) / 2.0  # noqa: E731
    index = float(np.sum(comb2(table.astype(np.float64))))
    sa = float(np.sum(comb2(table.sum(axis=1).astype(np.float64))))
    sb = float(np.sum(comb2(table.sum(axis=0).astype(np.float64))))
    total = comb2(float(n))
    expected = sa * sb / total if total > 0 else 0.0
    max_index = 0.5 * (sa + sb)
    if max_index == expected:
        return 1.0
    return (index - expected) / (max_index - expected)


def macro_f1(table):
    """Macro F1 over true classes after Hungarian matching of clusters."""
    pairs = hungarian(-table.astype(np.float64))
    class_sizes = table.sum(axis=1)
    cluster_sizes = table.sum(axis=0)
    f1 = np.zeros(table.shape[0])
    for i, j in pairs:
        tp = table[i, j]
        if tp == 0:
            continue
        prec = tp / cluster_sizes[j]
        rec = tp / class_sizes[i]
        f1[i] = 2 * prec * rec / (prec + rec)
    return float(f1.mean()), pairs


@dataclass
class ClusterEval:
    nmi: float
    ari: float
    f1: float
    assignment: dict = field(default_factory=dict)  # cluster id -> class id

    def to_dict(self):
        return {
            "nmi": self.nmi,
            "ari": self.ari,
            "f1": self.f1,
            "assignment": {str(k): v for k, v in self.assignment.items()},
        }


def cluster_eval(labels_true, labels_pred):
    table, tu, pu = contingency(labels_true, labels_pred)
    f1, pairs = macro_f1(table)
    assignment = {int(pu[j]): int(tu[i]) for i, j in pairs}
    return ClusterEval(nmi_score(table), ari_score(table), f1, assignment)


def cluster_accuracy(labels_true, labels_pred, subset=None):
    """Hungarian-matched accuracy; the matching uses every sample, the
    accuracy is reported on ``subset`` (boolean mask) when given."""
    t = np.asarray(labels_true)
    p = np.asarray(labels_pred)
    table, tu, pu = contingency(t, p)
    pairs = hungarian(-table.astype(np.float64))
    mapping = {int(pu[j]): int(tu[i]) for i, j in pairs}
    mapped = np.array([mapping.get(int(x), -(10**9)) for x in p])
    hit = mapped == t
    if subset is not None:
        subset = np.asarray(subset, dtype=bool)
        if not subset.any():
            raise InvalidArgument("empty subset")
        hit = hit[subset]
    return float(hit.mean())


# --------------------------------------------------------------------------
# class-count estimation
# --------------------------------------------------------------------------


def acc_score(z, labels, protos, tau):
    """Fraction of labeled samples whose posterior argmax equals the label."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise InvalidArgument("acc_score needs at least one labeled sample")
    pred = np.argmax(vmf_posterior(z, protos, tau), axis=1)
    return float(np.mean(pred == labels))


def class_centers(z_l, labels_l, z_u, protos, tau, k_base):
    """Unit-normalized per-base-class centers from labeled samples (by label)
    and from unlabeled samples (by posterior argmax).

    Returns two lists of length ``k_base``; entries are None where no sample
    falls in the class.
    """
    if k_base < 1:
        raise InvalidArgument("class centers need at least one base class")
    z_l = np.asarray(z_l, dtype=np.float64)
    z_u = np.asarray(z_u, dtype=np.float64)
    labels_l = np.asarray(labels_l)
    assigned = np.argmax(vmf_posterior(z_u, protos, tau), axis=1) if len(z_u) else np.zeros(0, int)
    c_l, c_u = [], []
    for k in range(k_base):
        for group, mask, out in ((z_l, labels_l == k, c_l), (z_u, assigned == k, c_u)):
            if mask.any():
                mean = group[mask].mean(axis=0)
                out.append(normalize_unit(mean) if np.linalg.norm(mean) > 0 else None)
            else:
                out.append(None)
    return c_l, c_u


def centr_score(c_l, c_u, eps=CENTR_EPS):
    """Product over base classes of ``<c_l_k, c_u_k>``, each factor clamped
    below at ``eps`` (empty centers contribute ``eps``)."""
    score = 1.0
    for a, b in zip(c_l, c_u):
        if a is None or b is None:
            score *= eps
        else:
            score *= max(float(np.dot(a, b)), eps)
    return score


@dataclass
class CandidateResult:
    k_new_candidate: int
    acc_score: float
    centr_score: float
    proto_score: float
    checkpoint: object = None
    error: str | None = None

    def to_dict(self):
        return {
            "k_new_candidate": self.k_new_candidate,
            "acc_score": self.acc_score,
            "centr_score": self.centr_score,
            "proto_score": self.proto_score,
            "error": self.error,
        }


def score_candidate(state, dataset, k_new, config):
    """accScore, centrScore and protoScore for a trained candidate."""
    from .trainer import embed, prepare

    data = prepare(dataset, k_new)
    z = embed(state.student, data, config.rg)
    protos = state.student_protos
    lab = data.labeled_idx
    unl = data.unlabeled_idx
    acc = acc_score(z[lab], data.labels[lab], protos, config.temps.tau)
    c_l, c_u = class_centers(z[lab], data.labels[lab], z[unl], protos, config.temps.tau, data.k_base)
    centr = centr_score(c_l, c_u)
    return acc, centr, acc * centr


def candidate_seed(master_seed, k_new):
    """Training seed for one candidate, derived from the master seed."""
    return int(np.random.SeedSequence([int(master_seed), int(k_new)]).generate_state(1)[0])


def _run_candidate(args):
    from .trainer import train

    dataset, k, config = args
    cfg = replace(config, k_new=k, budget_mode=True, seed=candidate_seed(config.seed, k))
    ckpt, _ = train(dataset, cfg)
    acc, centr, proto = score_candidate(ckpt.state, dataset, k, cfg)
    return CandidateResult(k, acc, centr, proto, ckpt)


def estimate_k_new(dataset, candidates, config, jobs=1):
    """Train one budget-mode model per candidate novel-class count and pick
    the highest protoScore (ties go to the smaller count).

    Candidates whose training fails are recorded with ``error`` set and
    skipped. Returns ``(results, chosen)``.
    """
    candidates = [int(c) for c in candidates]
    if not candidates:
        raise InvalidArgument("candidate range is empty")
    tasks = [(dataset, k, config) for k in candidates]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_safe_candidate, tasks))
    else:
        outcomes = [_safe_candidate(t) for t in tasks]
    results = []
    for k, res in zip(candidates, outcomes):
        if isinstance(res, str):
            log.warning("candidate k_new=%d failed: %s", k, res)
            results.append(CandidateResult(k, math.nan, math.nan, math.nan, None, res))
        else:
            results.append(res)
    ok = [r for r in results if r.error is None]
    if not ok:
        raise ProtoNCDError("every candidate failed to train")
    best = max(ok, key=lambda r: (r.proto_score, -r.k_new_candidate))
    return results, best.k_new_candidate


def _safe_candidate(task):
    try:
        return _run_candidate(task)
    except (ProtoNCDError, FloatingPointError, ValueError) as exc:
        return f"{type(exc).__name__}: {exc}"


# --------------------------------------------------------------------------
# out-of-distribution scoring
# --------------------------------------------------------------------------


def ood_score(logits, method, energy_temperature=1.0):
    """Higher means more in-distribution for every method.

    msp: max of softmax(logits); mls: max logit; energy:
    ``T * logsumexp(logits / T)``. ``logits`` is (K,) or (B, K).
    """
    lg = np.asarray(logits, dtype=np.float64)
    if method == "msp":
        return np.max(softmax(lg), axis=-1)
    if method == "mls":
        return np.max(lg, axis=-1)
    if method == "energy":
        if not energy_temperature > 0:
            raise InvalidArgument("energy_temperature must be positive")
        return energy_temperature * log_sum_exp(lg / energy_temperature, axis=-1)
    raise InvalidArgument(f"unknown OOD method {method!r}; choose from {list(OOD_METHODS)}")


def _check_binary(scores, is_id):
    s = np.asarray(scores, dtype=np.float64)
    f = np.asarray(is_id, dtype=bool)
    if s.shape != f.shape or s.ndim != 1:
        raise InvalidArgument("scores and flags must be 1-D of equal length")
    if f.all() or not f.any():
        raise InvalidArgument("both ID and OOD samples are required")
    return s, f


def auroc(scores, is_id):
    """Mann-Whitney AUROC with ID as the positive class; ties count 1/2."""
    s, f = _check_binary(scores, is_id)
    ranks = rankdata(s)
    n_pos, n_neg = int(f.sum()), int((~f).sum())
    u = ranks[f].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def fpr_at_tpr(scores, is_id, tpr_level=0.95):
    """FPR at the strictest threshold whose TPR reaches ``tpr_level``.

    A sample is called ID when its score is >= the threshold. Returns
    ``(fpr, threshold)``.
    """
    s, f = _check_binary(scores, is_id)
    pos = np.sort(s[f])[::-1]
    need = int(math.ceil(tpr_level * pos.size - 1e-12))
    threshold = float(pos[max(need, 1) - 1])
    fpr = float(np.mean(s[~f] >= threshold))
    return fpr, threshold


@dataclass
class OODResult:
    method: str
    scores: np.ndarray
    is_id: np.ndarray
    auroc: float
    fpr95: float
    threshold: float

    def to_dict(self):
        return {"method": self.method, "auroc": self.auroc, "fpr95": self.fpr95, "threshold": self.threshold}

    def reject(self, scores):
        """True where a score falls below the threshold (treated as OOD)."""
        return np.asarray(scores) < self.threshold


def ood_evaluate(logits, is_id, method, energy_temperature=1.0):
    scores = ood_score(logits, method, energy_temperature)
    fpr, thr = fpr_at_tpr(scores, is_id)
    return OODResult(method, scores, np.asarray(is_id, bool), auroc(scores, is_id), fpr, thr)


# --------------------------------------------------------------------------
# model-level evaluation
# --------------------------------------------------------------------------


def check_compatible(state, dataset):
    """Raise ``InvalidArgument`` when a dataset cannot be scored by a model."""
    d_model_in = state.student.config.d_in
    if dataset.d_in != d_model_in:
        raise InvalidArgument(f"feature dim mismatch: dataset d_in={dataset.d_in}, checkpoint d_in={d_model_in}")
    if dataset.k_base != state.student_protos.k_base:
        raise InvalidArgument(
            f"class count mismatch: dataset k_base={dataset.k_base}, "
            f"checkpoint K={state.student_protos.K} with k_base={state.student_protos.k_base}"
        )


def model_features(state, dataset, config, splits):
    """Student features ``z`` and vMF logits ``cos / tau`` for the samples
    of ``splits`` (in dataset order)."""
    from .trainer import embed, prepare

    check_compatible(state, dataset)
    data = prepare(dataset, state.student_protos.k_new, splits)
    z = embed(state.student, data, config.rg)
    cos = z @ state.student_protos.mu.T
    samples = [s for s in dataset.samples if s.split in splits]
    return samples, z, cos / config.temps.tau


def evaluate_model(state, dataset, config):
    """Cluster metrics of posterior-argmax predictions on the unlabeled
    split against the evaluation-only ground truth.

    Also reports Hungarian-matched accuracy on all unlabeled samples and on
    the novel ones (ground truth outside the base classes and not normal).
    """
    samples, _, lg = model_features(state, dataset, config, ("unlabeled",))
    if any(s.gt_label is None for s in samples):
        raise InvalidArgument("evaluation needs gt_label on every unlabeled sample")
    gt = np.array([s.gt_label for s in samples])
    pred = np.argmax(lg, axis=1)
    ev = cluster_eval(gt, pred)
    novel = (gt >= dataset.k_base) & (gt != (-1 if dataset.normal_label is None else dataset.normal_label))
    out = ev.to_dict()
    out["accuracy_all"] = cluster_accuracy(gt, pred)
    out["accuracy_novel"] = cluster_accuracy(gt, pred, novel) if novel.any() else None
    out["n_samples"] = int(gt.size)
    return out


def evaluate_ood(state, dataset, config, methods=OOD_METHODS, energy_temperature=1.0):
    """OOD detection with unlabeled in-distribution samples as positives and
    the ``ood`` split as negatives. Returns one ``OODResult`` per method."""
    samples, _, lg = model_features(state, dataset, config, ("unlabeled", "ood"))
    is_id = np.array([s.split != "ood" for s in samples])
    return [ood_evaluate(lg, is_id, m, energy_temperature) for m in methods]
