"""Numerical verification of the analytic objects behind the estimator.

Covers the kernel moment sum and its concentration, spherical-cap measures,
the discrete incomplete gamma sum with its two-regime bracket, the co-sorted
rearrangement inequality, Monte Carlo bandwidth sweeps with common random
numbers, and log-log exponent fits.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, OutOfRange, PreconditionViolated
from . import attention, sampling
from .tasks import draw_task, make_context

# Multiplicative band absorbing the unstated dimension-dependent constants
# inside the asymptotic concentration statements.
DEFAULT_BAND = 64.0


@dataclass(frozen=True)
class BoundCheck:
    """A measured quantity against a [lower, upper] bracket.

    ``strict`` marks brackets whose lower end must be exceeded strictly
    (used by the rearrangement inequality); otherwise pass means
    lower <= measured <= upper.
    """

    quantity: str
    measured: float
    lower: float
    upper: float
    passed: bool
    strict: bool = False


def _bracket(quantity, measured, lower, upper):
    return BoundCheck(quantity, float(measured), float(lower), float(upper),
                      bool(lower <= measured <= upper))


@dataclass(frozen=True)
class SweepResult:
    """Loss curve of softmax attention with M = w I over a grid of w."""

    w_grid: np.ndarray
    loss_mean: np.ndarray
    loss_stderr: np.ndarray
    bias: np.ndarray
    noise: np.ndarray
    argmin_index: int
    snr_scale: float          # n L^2 / sigma^2 of the configuration
    boundary: bool            # argmin sits on a grid endpoint

    @property
    def w_star(self):
        return float(self.w_grid[self.argmin_index])


def kernel_moment(X, x, p, r):
    """sum_i ||x_i - x||^p exp(-r ||x_i - x||^2) over the rows of X.

    Rows and x must be unit length; this is the token-weight functional the
    window-size analysis is built on.
    """
    X = np.asarray(X, dtype=float)
    x = np.asarray(x, dtype=float)
    if p < 0 or r < 0:
        raise PreconditionViolated("need p >= 0 and r >= 0")
    norms = np.concatenate([np.linalg.norm(X, axis=1), [np.linalg.norm(x)]])
    if np.max(np.abs(norms - 1.0)) > 1e-8:
        raise PreconditionViolated("kernel_moment expects unit-norm rows and query")
    d2 = np.sum((X - x) ** 2, axis=1)
    with np.errstate(divide="ignore"):
        powed = np.ones_like(d2) if p == 0 else d2 ** (p / 2.0)
    return float(np.sum(powed * np.exp(-r * d2)))


def kernel_moment_regime_threshold(d):
    """r above this follows the polynomial decay regime, below it the
    exponential one."""
    return 0.5 * (d + math.sqrt(d))


def check_kernel_moment_concentration(d, n, r, trials, rng, band=DEFAULT_BAND):
    """Check that the empirical median of g_0(r)/n over independent draws
    lies within a constant-factor band of the regime-appropriate rate:
    r^(-d/2) above the regime threshold, exp(-2r) below it."""
    if n < 32 or d < 2:
        raise PreconditionViolated("need n >= 32 and d >= 2")
    vals = np.empty(trials)
    for t in range(trials):
        sub = rng.derive(t)
        X = sampling.sample_uniform_sphere(n, d, sub)
        x = sampling.sample_uniform_sphere(1, d, sub)[0]
        vals[t] = kernel_moment(X, x, 0.0, r) / n
    median = float(np.median(vals))
    if r >= kernel_moment_regime_threshold(d):
        target = r ** (-d / 2.0)
        name = f"g0_concentration(d={d},n={n},r={r:g},poly)"
    else:
        target = math.exp(-2.0 * r)
        name = f"g0_concentration(d={d},n={n},r={r:g},exp)"
    return _bracket(name, median, target / band, target * band)


def cap_measure_mc(d, eps, samples, rng):
    """Monte Carlo measure of the spherical cap {x' : x'^T x > 1 - eps}."""
    if not 0 < eps <= 2:
        raise PreconditionViolated("need eps in (0, 2]")
    if samples < 1000:
        raise PreconditionViolated("need at least 10^3 samples")
    pts = sampling.sample_uniform_sphere(samples, d, rng)
    return float(np.mean(pts[:, 0] > 1.0 - eps))


def cap_measure_bounds(d, eps):
    """Bracket for the cap measure: (2e - e^2)^((d-1)/2) / sqrt(2 d pi) from
    below, (2e - e^2)^((d-1)/2) from above."""
    if not 0 < eps <= 1:
        raise OutOfRange("bracket holds for eps in (0, 1]")
    base = (2.0 * eps - eps**2) ** ((d - 1) / 2.0)
    return base / math.sqrt(2.0 * d * math.pi), base


def cap_measure_check(d, eps, samples, rng, mc_slack_sigmas=4.0):
    """BoundCheck pairing the Monte Carlo cap measure with its bracket,
    widened by the Monte Carlo standard error."""
    frac = cap_measure_mc(d, eps, samples, rng)
    lower, upper = cap_measure_bounds(d, eps)
    se = math.sqrt(max(frac * (1.0 - frac), 1.0 / samples) / samples)
    slack = mc_slack_sigmas * se
    return _bracket(f"cap_measure(d={d},eps={eps:g})", frac, lower - slack, upper + slack)


def discrete_gamma(d, alpha, m):
    """sum_{i=1}^m i^d exp(-alpha i), accumulated in log space so large d
    stays finite."""
    if m < 1:
        raise PreconditionViolated("need m >= 1")
    i = np.arange(1, m + 1, dtype=float)
    return float(np.sum(np.exp(d * np.log(i) - alpha * i)))


def stirling_log_gamma(x, terms=4):
    """log Gamma(x) by the Stirling series with ``terms`` correction terms,
    argument-raised so the series argument is >= 10. Accurate to better than
    1e-10 relative for x >= 2."""
    if x <= 0:
        raise OutOfRange("log-gamma needs a positive argument")
    # Bernoulli-number coefficients of the asymptotic series
    coeffs = [1.0 / 12.0, -1.0 / 360.0, 1.0 / 1260.0, -1.0 / 1680.0, 1.0 / 1188.0]
    shift = 0.0
    z = x
    while z < 10.0:
        shift -= math.log(z)
        z += 1.0
    series = (z - 0.5) * math.log(z) - z + 0.5 * math.log(2.0 * math.pi)
    zpow = z
    for c in coeffs[:terms]:
        series += c / zpow
        zpow *= z * z
    return series + shift


def gamma_function(x):
    return math.exp(stirling_log_gamma(x))


def discrete_gamma_regime_threshold(d, alpha):
    """Boundary between the rising-sum regime and the saturated regime.

    The summand i^d e^(-alpha i) peaks near d/alpha, so the regime boundary
    scales with 1/alpha as well.
    """
    return (d + math.sqrt(d)) / alpha


def discrete_gamma_bounds(d, alpha, m):
    """Bracket the discrete incomplete gamma sum in its two regimes.

    Below the threshold the sum is within [m^d e^(-alpha m - 1/2),
    m^(d+1) e^(-alpha m + 1/2)] (every term is within sqrt(e) of the last);
    above it the sum saturates inside [Gamma(d+1)/(2 alpha^(d+1)),
    2 Gamma(d+1)/alpha^(d+1)]. Valid for d > 5 and 1 <= alpha <= 2.
    """
    if not (d > 5 and 1.0 <= alpha <= 2.0):
        raise OutOfRange("bracket requires d > 5 and alpha in [1, 2]")
    value = discrete_gamma(d, alpha, m)
    if m < discrete_gamma_regime_threshold(d, alpha):
        lower = math.exp(d * math.log(m) - alpha * m - 0.5)
        upper = math.exp((d + 1) * math.log(m) - alpha * m + 0.5)
        name = f"discrete_gamma(d={d},a={alpha:g},m={m},rising)"
    else:
        g = math.exp(stirling_log_gamma(d + 1) - (d + 1) * math.log(alpha))
        lower, upper = g / 2.0, 2.0 * g
        name = f"discrete_gamma(d={d},a={alpha:g},m={m},saturated)"
    return _bracket(name, value, lower, upper)


def rearrangement_check(a, b):
    """Verify sum a^2/(sum a)^2 < sum a^2 b^2/(sum a b)^2 for strictly
    positive, co-sorted a and b.

    Returns a strict BoundCheck on the gap; a constant b makes both sides
    equal and is reported as a (passing) tie. Raises PreconditionViolated
    when a and b are not sorted the same way.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise PreconditionViolated("a and b must be 1-d and the same length")
    if np.any(a <= 0) or np.any(b <= 0):
        raise PreconditionViolated("a and b must be strictly positive")
    # full pairwise check (consecutive comparisons miss violations across
    # ties): reject any oppositely ordered pair, allow ties on either side
    da = a[:, None] - a[None, :]
    db = b[:, None] - b[None, :]
    if np.any(da * db < 0):
        raise PreconditionViolated("a and b are not co-sorted")
    lhs = float(np.sum(a**2) / np.sum(a) ** 2)
    rhs = float(np.sum(a**2 * b**2) / np.sum(a * b) ** 2)
    gap = rhs - lhs
    if np.all(b == b[0]):
        return BoundCheck("rearrangement_gap(tie)", gap, 0.0, math.inf, gap == 0.0)
    return BoundCheck("rearrangement_gap", gap, 0.0, math.inf, gap > 0.0, strict=True)


@dataclass(frozen=True)
class ContextPool:
    """Pre-drawn contexts shared across every w of a sweep (common random
    numbers), reduced to the sufficient statistics of the M = w I estimator."""

    dots: np.ndarray     # (contexts, n) token-query inner products x_i^T q
    clean: np.ndarray    # (contexts, n) noiseless labels f(x_i)
    noise: np.ndarray    # (contexts, n) realized label noise
    target: np.ndarray   # (contexts,) clean query labels f(q)
    sigma: float


def draw_context_pool(task_class, dist, n, sigma, num_contexts, rng):
    """One query per context; fresh task, covariates, and noise per context."""
    dots = np.empty((num_contexts, n))
    clean = np.empty((num_contexts, n))
    noise = np.empty((num_contexts, n))
    target = np.empty(num_contexts)
    for i in range(num_contexts):
        sub = rng.derive(i)
        task = draw_task(task_class, dist.d, sub)
        batch = make_context(task, dist, n, 1, sigma, sub)
        dots[i] = batch.X @ batch.Q[0]
        clean[i] = batch.y - batch.noise
        noise[i] = batch.noise
        target[i] = batch.targets[0]
    return ContextPool(dots=dots, clean=clean, noise=noise, target=target, sigma=sigma)


def pool_loss_at(pool, w):
    """(loss values, bias values, noise values) per context at M = w I."""
    logits = w * pool.dots
    shifted = logits - logits.max(axis=1, keepdims=True)
    s = np.exp(shifted)
    s /= s.sum(axis=1, keepdims=True)
    pred_clean = np.sum(s * pool.clean, axis=1)
    pred_noise = np.sum(s * pool.noise, axis=1)
    losses = (pred_clean + pred_noise - pool.target) ** 2
    biases = (pred_clean - pool.target) ** 2
    noises = pool.sigma**2 * np.sum(s**2, axis=1)
    return losses, biases, noises


def bandwidth_sweep(task_class, dist, n, sigma, w_grid, contexts_per_point, rng,
                    lipschitz_scale=None):
    """Monte Carlo loss of softmax attention with M = w I on a grid of w.

    One pooled context set is reused for every w, so the argmin is a
    deterministic function of (config, seed) and is not blurred by
    independent sampling noise. Tie handling picks the smallest w whose mean
    is statistically indistinguishable (two combined standard errors) from
    the smallest mean.
    """
    w_grid = np.asarray(w_grid, dtype=float)
    if w_grid.size == 0 or np.any(np.diff(w_grid) <= 0):
        raise PreconditionViolated("w_grid must be nonempty and strictly increasing")
    if contexts_per_point < 100:
        raise PreconditionViolated("need at least 100 contexts per grid point")
    pool = draw_context_pool(task_class, dist, n, sigma, contexts_per_point, rng)
    means = np.empty(w_grid.size)
    errs = np.empty(w_grid.size)
    biases = np.empty(w_grid.size)
    noises = np.empty(w_grid.size)
    for j, w in enumerate(w_grid):
        losses, b, nz = pool_loss_at(pool, w)
        means[j] = losses.mean()
        errs[j] = losses.std(ddof=1) / math.sqrt(losses.size)
        biases[j] = b.mean()
        noises[j] = nz.mean()
    best = int(np.argmin(means))
    for j in range(best):
        if means[j] <= means[best] + 2.0 * math.hypot(errs[j], errs[best]):
            best = j
            break
    L = task_class.L if lipschitz_scale is None else lipschitz_scale
    snr = math.inf if sigma == 0 else n * L**2 / sigma**2
    return SweepResult(w_grid=w_grid, loss_mean=means, loss_stderr=errs,
                       bias=biases, noise=noises, argmin_index=best,
                       snr_scale=snr, boundary=best in (0, w_grid.size - 1))


def exponent_fit(snr_values, w_stars):
    """Least-squares slope of log w* against log snr; needs >= 3 positive
    points."""
    snr_values = np.asarray(snr_values, dtype=float)
    w_stars = np.asarray(w_stars, dtype=float)
    if snr_values.size < 3 or snr_values.size != w_stars.size:
        raise DegenerateInput("need at least 3 matched points")
    if np.any(snr_values <= 0) or np.any(w_stars <= 0):
        raise DegenerateInput("log-log fit needs positive values")
    lx = np.log(snr_values)
    ly = np.log(w_stars)
    lx = lx - lx.mean()
    denom = float(np.sum(lx**2))
    if denom == 0.0:
        raise DegenerateInput("snr values are all equal")
    return float(np.sum(lx * (ly - ly.mean())) / denom)
