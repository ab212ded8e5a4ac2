"""Scalar and vector primitives: stable exponentials, unit normalization,
modified Bessel functions of the first kind, entropy and a central
finite-difference gradient used to check analytic gradients.
"""

import math

import numpy as np

from .errors import DegenerateInput, InvalidArgument, NumericalFailure

KAPPA_SWITCH = 50.0
SERIES_TERMS = 60
SIMPLEX_TOL = 1e-9


def _as_checked(v, allow_neg_inf=True):
    arr = np.asarray(v, dtype=np.float64)
    if arr.size == 0:
        raise InvalidArgument("empty input")
    bad = np.isnan(arr) | (arr == np.inf)
    if not allow_neg_inf:
        bad |= arr == -np.inf
    if bad.any():
        raise InvalidArgument("input contains NaN or +inf")
    return arr


def log_sum_exp(v, axis=None):
    """Shift-stable ``log(sum(exp(v)))``.

    Entries may be ``-inf``; a slice that is entirely ``-inf`` yields ``-inf``.
    """
    arr = _as_checked(v)
    m = np.max(arr, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(arr - shift), axis=axis, keepdims=True)) + shift
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def softmax(v, temperature=1.0, axis=-1):
    """Softmax of ``v / temperature`` along ``axis``; ``-inf`` entries map to 0."""
    if not temperature > 0:
        raise InvalidArgument(f"temperature must be positive, got {temperature}")
    arr = _as_checked(v) / temperature
    m = np.max(arr, axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise InvalidArgument("softmax slice with every entry -inf")
    e = np.exp(arr - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def normalize_unit(v, axis=-1):
    """Scale ``v`` to unit Euclidean norm along ``axis``."""
    arr = _as_checked(v, allow_neg_inf=False)
    norm = np.linalg.norm(arr, axis=axis, keepdims=True)
    if np.any(norm == 0):
        raise DegenerateInput("cannot normalize a zero vector")
    return arr / norm


def _log_bessel_series(nu, x):
    m = np.arange(SERIES_TERMS, dtype=np.float64)
    log_half = math.log(x / 2.0)
    terms = (2.0 * m + nu) * log_half - np.array(
        [math.lgamma(k + 1.0) + math.lgamma(k + nu + 1.0) for k in m]
    )
    return log_sum_exp(terms)


def _debye_terms(nu, x):
    # U_k(p) / nu^k written in t = 1/sqrt(nu^2 + x^2) so that nu = 0 is regular.
    t = 1.0 / math.sqrt(nu * nu + x * x)
    q = (nu * t) ** 2
    u1 = (1.0 - 5.0 * q / 3.0) / 8.0
    u2 = (81.0 - 462.0 * q + 385.0 * q**2) / 1152.0
    u3 = (30375.0 - 369603.0 * q + 765765.0 * q**2 - 425425.0 * q**3) / 414720.0
    u4 = (
        4465125.0
        - 94121676.0 * q
        + 349922430.0 * q**2
        - 446185740.0 * q**3
        + 185910725.0 * q**4
    ) / 39813120.0
    return 1.0 + u1 * t + u2 * t**2 + u3 * t**3 + u4 * t**4


def _log_bessel_asymptotic(nu, x):
    r = math.sqrt(nu * nu + x * x)
    psi = r + nu * math.log(x / (nu + r))
    return psi - 0.5 * math.log(2.0 * math.pi) - 0.5 * math.log(r) + math.log(_debye_terms(nu, x))


def log_bessel_i(order, kappa):
    """Natural log of the modified Bessel function ``I_order(kappa)``.

    Ascending series for ``kappa <= KAPPA_SWITCH``, uniform (Debye)
    asymptotic expansion above it.
    """
    nu = float(order)
    x = float(kappa)
    if not (nu >= 0 and x >= 0) or not (math.isfinite(nu) and math.isfinite(x)):
        raise InvalidArgument(f"bessel_i needs order >= 0 and kappa >= 0, got {order}, {kappa}")
    if x == 0.0:
        return 0.0 if nu == 0.0 else -math.inf
    if x <= KAPPA_SWITCH:
        return _log_bessel_series(nu, x)
    return _log_bessel_asymptotic(nu, x)


def bessel_i(order, kappa):
    """Modified Bessel function of the first kind ``I_order(kappa)``."""
    return math.exp(log_bessel_i(order, kappa))


def vmf_log_normalizer(d, kappa):
    """Log of the von Mises-Fisher normalizing constant on ``S^{d-1}``.

    ``C_d(kappa) = kappa^{d/2-1} / ((2 pi)^{d/2} I_{d/2-1}(kappa))``
    """
    if int(d) != d or d < 2:
        raise InvalidArgument(f"dimension must be an integer >= 2, got {d}")
    if not kappa > 0:
        raise InvalidArgument(f"kappa must be positive, got {kappa}")
    nu = d / 2.0 - 1.0
    return nu * math.log(kappa) - (d / 2.0) * math.log(2.0 * math.pi) - log_bessel_i(nu, kappa)


def mean_resultant_length(d, kappa):
    """Expected ``mu^T x`` under vMF(mu, kappa) on ``S^{d-1}``: I_{d/2}/I_{d/2-1}."""
    return math.exp(log_bessel_i(d / 2.0, kappa) - log_bessel_i(d / 2.0 - 1.0, kappa))


def validate_simplex(p, axis=-1):
    arr = _as_checked(p, allow_neg_inf=False)
    if np.any(arr < -SIMPLEX_TOL) or np.any(arr > 1 + SIMPLEX_TOL):
        raise InvalidArgument("simplex entries must lie in [0, 1]")
    if np.any(np.abs(arr.sum(axis=axis) - 1.0) > SIMPLEX_TOL):
        raise InvalidArgument("simplex entries must sum to 1")
    return arr


def entropy(p, axis=-1):
    """Shannon entropy in nats with ``0 log 0 = 0``."""
    arr = validate_simplex(p, axis=axis)
    safe = np.where(arr > 0, arr, 1.0)
    out = -np.sum(np.where(arr > 0, arr * np.log(safe), 0.0), axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def finite_diff_grad(f, x, step=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (any array shape)."""
    if not step > 0:
        raise InvalidArgument("step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericalFailure(f"non-finite function value at coordinate {tuple(int(j) for j in np.unravel_index(i, x.shape))}")
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad
