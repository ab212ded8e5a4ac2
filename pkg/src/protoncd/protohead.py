"""Hyperspherical prototypes, vMF posteriors, sharpening and the EMA
teacher-student state."""

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams
from .errors import InitFailure, InvalidArgument, InvalidState
from .numerics import normalize_unit, softmax, validate_simplex

UNIT_TOL = 1e-9


@dataclass
class PrototypeSet:
    """K unit-norm class directions; the last one is the normal class."""

    mu: np.ndarray  # (K, d)
    k_base: int
    k_new: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        if self.mu.shape[0] != self.k_base + self.k_new + 1:
            raise InvalidArgument(
                f"{self.mu.shape[0]} prototypes for k_base={self.k_base}, k_new={self.k_new} (+1 normal)"
            )
        norms = np.linalg.norm(self.mu, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise InvalidArgument("prototypes must have unit norm")

    @property
    def K(self):
        return self.mu.shape[0]

    @property
    def normal_index(self):
        return self.K - 1

    def copy(self):
        return PrototypeSet(self.mu.copy(), self.k_base, self.k_new)


@dataclass
class Temperatures:
    tau: float = 0.1
    tau_sup: float = 0.07
    tau_stu: float = 0.1
    tau_c: float = 0.2
    tau_sep: float = 0.1
    tau_base: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if not value > 0:
                raise InvalidArgument(f"temperature {name} must be positive, got {value}")


@dataclass
class TeacherStudentState:
    student: EncoderParams
    student_protos: PrototypeSet
    teacher: EncoderParams
    teacher_protos: PrototypeSet
    momentum: float = 0.99


def logits(z, protos):
    """Cosine similarities ``mu_c^T z`` for unit ``z`` (shape (d,) or (B, d))."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(np.abs(np.linalg.norm(z, axis=-1) - 1.0) > UNIT_TOL):
        raise InvalidArgument("features must be unit-normalized")
    mu = protos.mu if isinstance(protos, PrototypeSet) else np.asarray(protos)
    return z @ mu.T


def vmf_posterior(z, protos, tau):
    """Class posterior under equal-concentration vMF likelihoods.

    The normalizer ``C_d(1/tau)`` is shared by every class and cancels, so the
    posterior is a softmax of cosines at temperature ``tau``.
    """
    return softmax(logits(z, protos), temperature=tau)


def sharpen(q, temperature):
    """``q^(1/T)`` renormalized; exact zeros stay zero."""
    if not temperature > 0:
        raise InvalidArgument("temperature must be positive")
    q = validate_simplex(q)
    with np.errstate(divide="ignore"):
        logq = np.where(q > 0, np.log(np.where(q > 0, q, 1.0)), -np.inf)
    return softmax(logq, temperature=temperature)


def _blend(teacher, student, m):
    if teacher.keys() != student.keys():
        raise InvalidState("teacher and student parameter names differ")
    out = {}
    for k in teacher:
        if teacher[k].shape != student[k].shape:
            raise InvalidState(f"shape mismatch for {k}: {teacher[k].shape} vs {student[k].shape}")
        out[k] = m * teacher[k] + (1.0 - m) * student[k]
    return out


def ema_update(state):
    """teacher <- m * teacher + (1 - m) * student, prototypes renormalized."""
    m = state.momentum
    if not 0 <= m < 1:
        raise InvalidArgument("momentum must lie in [0, 1)")
    enc = EncoderParams(state.teacher.config, _blend(state.teacher.arrays, state.student.arrays, m))
    if state.teacher_protos.mu.shape != state.student_protos.mu.shape:
        raise InvalidState("teacher and student prototype shapes differ")
    mu = normalize_unit(m * state.teacher_protos.mu + (1.0 - m) * state.student_protos.mu)
    protos = PrototypeSet(mu, state.teacher_protos.k_base, state.teacher_protos.k_new)
    return TeacherStudentState(state.student, state.student_protos, enc, protos, m)


def init_prototypes(k_base, k_new, d, seed, class_means=None, max_attempts=10000, max_cos=0.5):
    """Initial prototype set.

    ``class_means`` optionally maps class index (base classes and the normal
    index ``k_base + k_new``) to a mean feature; those prototypes are the
    normalized means. Remaining prototypes are random unit vectors accepted
    only if ``|cos| <= max_cos`` against every prototype placed so far.
    """
    K = k_base + k_new + 1
    rng = np.random.default_rng(seed)
    mu = np.zeros((K, d))
    placed = []
    class_means = class_means or {}
    normal = K - 1
    for c in [*range(k_base), normal]:
        if c in class_means:
            mu[c] = normalize_unit(class_means[c])
            placed.append(c)
    for c in range(K):
        if c in placed:
            continue
        for _ in range(max_attempts):
            v = normalize_unit(rng.standard_normal(d))
            if all(abs(v @ mu[j]) <= max_cos for j in placed):
                mu[c] = v
                placed.append(c)
                break
        else:
            raise InitFailure(f"could not place prototype {c} with |cos| <= {max_cos} after {max_attempts} draws")
    return PrototypeSet(mu, k_base, k_new)
