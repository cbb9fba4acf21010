"""Seeded sampling primitives and link functions.

Every sampler takes an explicit ``numpy.random.Generator`` and broadcasts over
array arguments, so the Gibbs updates can draw a whole block in one call.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaincc, gammainccinv, log_ndtr, ndtr, ndtri

__all__ = [
    "DomainError",
    "RngStream",
    "probit_inv",
    "burr_link",
    "sample_truncated_normal",
    "sample_truncated_inverse_gamma",
    "sample_inverse_wishart",
    "sample_dirichlet",
    "sample_mvn",
    "sample_skewed_mvt",
]

# Standardized distance beyond which the truncated normal switches from
# inverse-CDF to rejection sampling.
_TAIL_SWITCH = 4.0


class DomainError(ValueError):
    """Raised when a distribution is called outside its parameter domain."""


@dataclass(frozen=True)
class RngStream:
    """Identifies an independent random stream by ``(seed, stream_id)``.

    Streams with equal keys replay the same draws; distinct ``stream_id``
    values are spawned children of the same ``SeedSequence`` and therefore
    statistically independent.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise DomainError("seed must be a 64-bit unsigned integer")
        if int(self.stream_id) < 0:
            raise DomainError("stream_id must be non-negative")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.PCG64(ss))


def _as_float(x):
    return np.asarray(x, dtype=float)


def _scalar_or_array(x):
    return float(x) if np.ndim(x) == 0 else x


def probit_inv(x):
    """Standard normal CDF.

    Far-left arguments go through the log-CDF so values such as
    ``probit_inv(-38)`` come back as positive subnormals instead of 0.
    """
    x = _as_float(x)
    if not np.all(np.isfinite(x)):
        raise DomainError("probit_inv requires finite input")
    # erfc underflows before the double range ends; the log-CDF does not.
    out = np.where(x < -30.0, np.exp(log_ndtr(np.minimum(x, -30.0))), ndtr(x))
    return _scalar_or_array(out)


def burr_link(x, c):
    """Burr link ``1 - (1 + exp(x))**(-c)`` evaluated without cancellation."""
    if not np.all(np.asarray(c) > 0):
        raise DomainError("burr_link requires c > 0")
    x = _as_float(x)
    # log(1 + e^x) via logaddexp avoids overflow for large x.
    return _scalar_or_array(-np.expm1(-np.asarray(c, float) * np.logaddexp(0.0, x)))


def _uniform_open(rng, size):
    u = rng.random(size)
    # rng.random() can return exactly 0; nudge it into the open interval.
    return np.where(u == 0.0, np.finfo(float).tiny, u)


def _tail_rejection(a, b, rng):
    """Standard normal restricted to ``[a, b]`` with ``a >= _TAIL_SWITCH``.

    Narrow intervals use a uniform proposal; otherwise an exponential
    proposal with the optimal rate for the lower bound.
    """
    out = np.empty_like(a)
    pending = np.arange(a.size)
    while pending.size:
        lo, hi = a[pending], b[pending]
        narrow = (hi - lo) * lo < 1.0
        z = np.empty_like(lo)
        accept = np.empty(lo.shape, dtype=bool)
        u = _uniform_open(rng, lo.size)
        if np.any(narrow):
            ln, hn = lo[narrow], hi[narrow]
            zn = ln + (hn - ln) * rng.random(ln.size)
            z[narrow] = zn
            accept[narrow] = np.log(u[narrow]) <= 0.5 * (ln * ln - zn * zn)
        wide = ~narrow
        if np.any(wide):
            lw, hw = lo[wide], hi[wide]
            rate = 0.5 * (lw + np.sqrt(lw * lw + 4.0))
            zw = lw + rng.standard_exponential(lw.size) / rate
            z[wide] = zw
            accept[wide] = (np.log(u[wide]) <= -0.5 * (zw - rate) ** 2) & (zw < hw)
        out[pending[accept]] = z[accept]
        pending = pending[~accept]
    return out


def sample_truncated_normal(mean, sd, lower, upper, rng, size=None):
    """Draw from ``N(mean, sd**2)`` restricted to ``(lower, upper)``.

    Arguments broadcast against each other (and ``size``). Bounds may be
    infinite. Mild truncation uses the inverse CDF on whichever tail keeps
    precision; regions more than four standard deviations out use
    rejection sampling.
    """
    mean, sd, lower, upper = (_as_float(v) for v in (mean, sd, lower, upper))
    shape = np.broadcast_shapes(mean.shape, sd.shape, lower.shape, upper.shape)
    if size is not None:
        shape = np.broadcast_shapes(shape, tuple(np.atleast_1d(size)))
    mean, sd, lower, upper = (np.broadcast_to(v, shape) for v in (mean, sd, lower, upper))
    if np.any(~(sd > 0)) or np.any(~np.isfinite(sd)):
        raise DomainError("sd must be positive and finite")
    if np.any(np.isnan(mean)) or np.any(~np.isfinite(mean)):
        raise DomainError("mean must be finite")
    if np.any(~(lower < upper)):
        raise DomainError("lower must be strictly below upper")

    a = ((lower - mean) / sd).ravel()
    b = ((upper - mean) / sd).ravel()
    # Reflect intervals lying entirely below zero so that a >= 0 or a < 0 < b.
    flip = b <= 0.0
    a, b = np.where(flip, -b, a), np.where(flip, -a, b)

    z = np.empty(a.shape)
    tail = a >= _TAIL_SWITCH
    upper_side = (a >= 0.0) & ~tail
    middle = a < 0.0

    if np.any(upper_side):
        au, bu = a[upper_side], b[upper_side]
        sa, sb = ndtr(-au), ndtr(-bu)
        p = sb + _uniform_open(rng, au.size) * (sa - sb)
        z[upper_side] = -ndtri(p)
    if np.any(middle):
        am, bm = a[middle], b[middle]
        fa, fb = ndtr(am), ndtr(bm)
        p = fa + _uniform_open(rng, am.size) * (fb - fa)
        z[middle] = ndtri(p)
    if np.any(tail):
        z[tail] = _tail_rejection(a[tail], b[tail], rng)

    z = np.where(flip, -z, z).reshape(shape)
    x = mean + sd * z
    # Rounding can land exactly on a finite bound; keep draws strictly inside.
    x = np.clip(x, np.nextafter(lower, np.inf), np.nextafter(upper, -np.inf))
    return _scalar_or_array(x)


def sample_truncated_inverse_gamma(shape, rate, upper, rng, size=None):
    """Inverse-gamma(shape, rate) restricted to ``(0, upper)``.

    Sampled by inverting the regularized upper incomplete gamma function for
    the reciprocal, which is gamma distributed and truncated below at
    ``1/upper``. ``upper`` may be ``inf``.
    """
    shape, rate, upper = (_as_float(v) for v in (shape, rate, upper))
    if np.any(~(shape > 0)) or np.any(~(rate > 0)) or np.any(~(upper > 0)):
        raise DomainError("shape, rate and upper must all be positive")
    out_shape = np.broadcast_shapes(shape.shape, rate.shape, upper.shape)
    if size is not None:
        out_shape = np.broadcast_shapes(out_shape, tuple(np.atleast_1d(size)))
    # Upper tail mass of the gamma reciprocal above rate/upper.
    mass = gammaincc(shape, rate / upper)
    u = _uniform_open(rng, out_shape) * mass
    g = gammainccinv(shape, u)
    x = rate / g
    x = np.minimum(x, np.nextafter(upper, 0.0))
    x = np.maximum(x, np.finfo(float).tiny)
    return _scalar_or_array(np.broadcast_to(x, out_shape).copy())


def _cholesky(matrix, what):
    matrix = _as_float(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DomainError(f"{what} must be a square matrix")
    if not np.all(np.isfinite(matrix)) or not np.allclose(matrix, matrix.T, rtol=1e-10, atol=1e-12):
        raise DomainError(f"{what} must be finite and symmetric")
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise DomainError(f"{what} is not positive definite") from exc


def sample_inverse_wishart(scale, dof, rng):
    """Inverse-Wishart draw via the Bartlett decomposition of its inverse."""
    p = np.shape(scale)[0]
    if not dof > p - 1:
        raise DomainError("dof must exceed dim - 1")
    chol_scale = _cholesky(scale, "scale")
    # If Sigma ~ IW(Psi, nu) then Sigma^{-1} ~ W(Psi^{-1}, nu). With
    # Psi = L L^T, a Cholesky factor of Psi^{-1} is L^{-T}.
    bartlett = np.zeros((p, p))
    bartlett[np.diag_indices(p)] = np.sqrt(rng.chisquare(dof - np.arange(p)))
    lower_idx = np.tril_indices(p, -1)
    bartlett[lower_idx] = rng.standard_normal(len(lower_idx[0]))
    # Sigma = L A^{-T} A^{-1} L^T
    a_inv = solve_triangular(bartlett, np.eye(p), lower=True)
    factor = chol_scale @ a_inv.T
    sigma = factor @ factor.T
    return 0.5 * (sigma + sigma.T)


def sample_dirichlet(concentration, rng):
    concentration = _as_float(concentration)
    if concentration.ndim != 1 or not np.all(concentration > 0):
        raise DomainError("concentration entries must be positive")
    draw = rng.dirichlet(concentration)
    return draw / draw.sum()


def sample_mvn(mean, cov, rng, size=None):
    """Multivariate normal via Cholesky; a non-SPD ``cov`` raises."""
    mean = _as_float(mean)
    chol = _cholesky(cov, "cov")
    if size is None:
        z = rng.standard_normal(mean.shape[-1])
        return mean + chol @ z
    z = rng.standard_normal((size, mean.shape[-1]))
    return mean + z @ chol.T


def sample_skewed_mvt(location, scale, dof, skew, rng, size=None):
    """Skewed multivariate-t draw.

    Construction: ``location + (skew * |z0| * 1 + chol(scale) @ z) / sqrt(w / dof)``
    with ``z0`` a scalar standard normal, ``z`` a standard normal vector and
    ``w ~ chi2(dof)``. ``skew = 0`` gives the ordinary multivariate t.
    """
    if not dof > 0:
        raise DomainError("dof must be positive")
    location = _as_float(location)
    chol = _cholesky(scale, "scale")
    dim = location.shape[-1]
    n = 1 if size is None else size
    z0 = np.abs(rng.standard_normal(n))
    z = rng.standard_normal((n, dim))
    w = rng.chisquare(dof, n)
    core = skew * z0[:, None] + z @ chol.T
    draws = location + core / np.sqrt(w / dof)[:, None]
    return draws[0] if size is None else draws
