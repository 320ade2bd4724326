"""Seeded randomness, orthogonal matrices and the chi-square tail.

All sampling goes through numpy's PCG64 generator.  A run is described by a
single 64-bit master seed; sub-tasks get their own generator via
:func:`derive_seed` so results do not depend on scheduling.
"""

import math

import numpy as np

# Relative accuracy target of the incomplete gamma evaluations.
_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 10_000


def make_rng(seed):
    """Return a PCG64-backed generator; equal seeds give equal streams."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(master, *index):
    """Derive an independent 64-bit seed from ``master`` and an index path."""
    seq = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(i) for i in index))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def derive_rng(master, *index):
    return make_rng(derive_seed(master, *index))


def _lower_series(a, x):
    # P(a, x) by its power series; converges fast for x < a + 1.
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    else:
        raise ArithmeticError("incomplete gamma series did not converge")
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _upper_fraction(a, x):
    # Q(a, x) by the Legendre continued fraction (modified Lentz).
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    else:
        raise ArithmeticError("incomplete gamma continued fraction did not converge")
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gamma_q(a, x):
    """Regularized upper incomplete gamma function Q(a, x)."""
    if a <= 0:
        raise ValueError(f"shape must be positive, got {a}")
    if x < 0:
        raise ValueError(f"argument must be non-negative, got {x}")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _lower_series(a, x)
    return _upper_fraction(a, x)


def chi_square_sf(statistic, df):
    """P(chi2_df >= statistic).

    >>> chi_square_sf(0.0, 1)
    1.0
    """
    if df != int(df) or df < 1:
        raise ValueError(f"degrees of freedom must be a positive integer, got {df}")
    if not statistic >= 0:
        raise ValueError(f"statistic must be non-negative, got {statistic}")
    p = gamma_q(0.5 * df, 0.5 * statistic)
    return min(1.0, max(0.0, p))


def random_orthogonal(dim, rng):
    """Draw an orthogonal matrix by QR of a Gaussian matrix.

    Columns are sign-normalized so that R has a positive diagonal, which makes
    the factorization unique and the result a deterministic function of the
    Gaussian draw (and Haar distributed).
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    a = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs
