"""
Lyapunov Service - Moment Growth of Random Matrix Products

Monte Carlo estimates for products of i.i.d. cycle matrices A_n ... A_1:
1. estimate_k: k(s) = lim (E ||A_n ... A_1||^s)^(1/n)
2. estimate_top_exponent: the top Lyapunov exponent k'(0)
3. estimate_s0: the threshold s0 = inf{s > 0 : k(s) > 1} by bisection
4. check_log_convexity / series_tail_diagnostic: consistency diagnostics

All replicas run as one numpy batch. Products are renormalised once per
cycle and their log norms accumulated, so nothing overflows. Norms are
entrywise L1 norms.

Importance tilting: for k(s) the atoms of each station are drawn with
probability proportional to weight * ||atom matrix||^s and every replica
carries its likelihood ratio. The estimate stays unbiased and, when all
factors are scalars (d = 1), has zero variance.
"""

import logging
import math

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from regen_polling.config import settings
from regen_polling.errors import DegenerateNorm
from regen_polling.models import (
    ClassifyParams,
    ConvexityCheck,
    KEstimate,
    LyapunovReport,
    S0Estimate,
    S0Kind,
    SeriesTail,
    SeriesVerdict,
    TopExponent,
    ValidatedSpec,
)
from regen_polling.services.model_core import atom_matrices
from regen_polling.utils.seeding import derive_rng, value_index

logger = logging.getLogger(__name__)

# Replicas are doubled at most this many times at one bisection point
MAX_REFINEMENTS = 6


class CycleSampler:
    """
    Draws batches of i.i.d. cycle matrices A = A^(d) ... A^(0).

    Args:
        spec: Validated system
        tilt: Exponent s of the importance tilt (0 = plain sampling)
    """

    def __init__(self, spec: ValidatedSpec, tilt: float = 0.0):
        self.spec = spec
        self.tilt = tilt
        self.dim = spec.dim
        self._tables = []
        for n in range(spec.stations):
            mats = atom_matrices(spec, n)
            p = np.asarray(spec.law(n).weights, dtype=float)
            p = p / p.sum()
            if tilt > 0.0 and p.size > 1:
                # Lean towards atoms with large norm: q proportional to p * ||B||^s
                q = p * mats.sum(axis=(1, 2)) ** tilt
                q = q / q.sum()
            else:
                q = p
            cumulative = np.cumsum(q)
            cumulative[-1] = 1.0
            # log(p/q) undoes the tilt in the mean
            self._tables.append((mats, cumulative, np.log(p) - np.log(q)))

    def sample(self, rand: np.random.Generator, replicas: int) -> tuple[np.ndarray, np.ndarray]:
        """
        Returns:
            (cycle matrices of shape (replicas, dim, dim), log likelihood ratios)
        """
        product = None
        log_weight = np.zeros(replicas)
        for mats, cumulative, log_ratio in self._tables:
            if mats.shape[0] == 1:
                picks = np.zeros(replicas, dtype=np.int64)
            else:
                picks = np.searchsorted(cumulative, rand.random(replicas), side="right")
                log_weight += log_ratio[picks]
            factor = mats[picks]
            # Station d acts last: A = A^(d) ... A^(0)
            product = factor if product is None else np.matmul(factor, product)
        return product, log_weight


def _renormalise(product: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Scale each product back to norm 1 and hand the log of the scale to the caller
    norms = product.sum(axis=(1, 2))
    if np.any(norms == 0.0):
        raise DegenerateNorm("a matrix product collapsed to the zero matrix")
    return product / norms[:, None, None], np.log(norms)


def renormalized_log_norm(factors) -> float:
    """
    log ||F_n ... F_1|| for factors given F_1 first, renormalising after
    every multiplication.
    """
    log_norm = 0.0
    product = None
    for factor in factors:
        factor = np.asarray(factor, dtype=float)[None]
        product = factor if product is None else np.matmul(factor, product)
        product, logs = _renormalise(product)
        log_norm += float(logs[0])
    return log_norm


def _log_norms(sampler: CycleSampler, n: int, replicas: int, rand: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """log ||A_n ... A_1|| and the accumulated log likelihood ratio, per replica."""
    log_norm = np.zeros(replicas)
    log_weight = np.zeros(replicas)
    product = None
    for _ in range(n):
        cycle, weight = sampler.sample(rand, replicas)
        log_weight += weight
        product = cycle if product is None else np.matmul(cycle, product)
        product, logs = _renormalise(product)
        log_norm += logs
    return log_norm, log_weight


def _weighted_log_mean(values: np.ndarray) -> tuple[float, float]:
    """log mean(exp(values)) and the delta-method standard error of it."""
    count = values.size
    log_mean = float(logsumexp(values)) - math.log(count)
    # Shift by the max before exponentiating; the ratio std/mean does not change
    w = np.exp(values - values.max())
    se = float(w.std(ddof=1)) / (math.sqrt(count) * float(w.mean())) if count > 1 else 0.0
    return log_mean, se


def estimate_k(
    spec: ValidatedSpec,
    s: float,
    n: int,
    replicas: int,
    rand: np.random.Generator,
    tilt: bool = True,
) -> KEstimate:
    """
    Estimate k(s) from `replicas` products of n cycle matrices.

    k_hat = exp(log mean_r exp(s L_r + w_r) / n), where L_r is the log norm
    of replica r's product and w_r its log likelihood ratio (0 untilted).
    The standard error is the delta-method error on log k_hat.

    Example:
        Cycle values {0.25, 2} with probability 1/2 each: k(1) = 1.125.
    """
    if s < 0:
        raise ValueError(f"s must be >= 0, got {s}")
    if n < 1 or replicas < 2:
        raise ValueError("need n >= 1 and replicas >= 2")
    if s == 0.0:
        return KEstimate(s=0.0, k_hat=1.0, stderr=0.0, log_k=0.0, log_stderr=0.0, n=n, replicas=replicas)

    sampler = CycleSampler(spec, tilt=s if tilt else 0.0)
    log_norm, log_weight = _log_norms(sampler, n, replicas, rand)
    log_mean, se = _weighted_log_mean(s * log_norm + log_weight)
    log_k = log_mean / n
    log_se = se / n
    k_hat = math.exp(log_k)
    return KEstimate(s=s, k_hat=k_hat, stderr=k_hat * log_se, log_k=log_k, log_stderr=log_se, n=n, replicas=replicas)


def estimate_top_exponent(spec: ValidatedSpec, n: int, replicas: int, rand: np.random.Generator) -> TopExponent:
    """
    Top Lyapunov exponent per cycle: the mean over replicas of
    (1/n) sum log(growth factor) of a renormalised positive vector pushed
    through n cycle matrices, with its standard error across replicas.
    """
    if n < 1 or replicas < 2:
        raise ValueError("need n >= 1 and replicas >= 2")
    sampler = CycleSampler(spec)
    vector = np.full((replicas, spec.dim), 1.0 / spec.dim)
    total = np.zeros(replicas)
    for _ in range(n):
        cycle, _ = sampler.sample(rand, replicas)
        vector = np.einsum("rij,rj->ri", cycle, vector)
        # Renormalise every step and keep the log growth, or the vector under- or overflows
        growth = vector.sum(axis=1)
        if np.any(growth == 0.0):
            raise DegenerateNorm("a vector product collapsed to zero")
        total += np.log(growth)
        vector /= growth[:, None]
    per_replica = total / n
    return TopExponent(
        lambda_top=float(per_replica.mean()),
        stderr=float(per_replica.std(ddof=1)) / math.sqrt(replicas),
        n=n,
        replicas=replicas,
    )


def z_value(confidence: float) -> float:
    return float(stats.norm.ppf(1.0 - (1.0 - confidence) / 2.0))


def estimate_s0(
    spec: ValidatedSpec,
    s_max: float,
    tol: float,
    confidence: float,
    budget: int,
    rand: np.random.Generator,
    top: TopExponent | None = None,
    n: int = 32,
    replicas: int = 10_000,
    n_top: int = 1000,
    replicas_top: int = 30,
    tilt: bool = True,
) -> S0Estimate:
    """
    Locate s0 = inf{s > 0 : k(s) > 1}.

    1. A top exponent confidently above 0 gives AT_ZERO.
    2. log k(s_max) confidently below 0 gives LOWER_BOUND(s_max).
    3. Otherwise bisect on the sign of log k(s). At each bisection point the replica
       count doubles until the confidence interval excludes 0.

    The budget counts matrix products. When it runs out the best bracket so
    far is returned with budget_exhausted set and confident cleared.
    """
    z = z_value(confidence)
    ops = 0
    # Products per replica and cycle: the station factors plus the running product
    sampler_ops = spec.stations

    if top is None:
        top = estimate_top_exponent(spec, n_top, replicas_top, rand)
        ops += n_top * replicas_top * sampler_ops
    if top.lambda_top - z * top.stderr > 0.0:
        logger.info(f"Top exponent {top.lambda_top:.6g} > 0: s0 = 0")
        return S0Estimate(kind=S0Kind.AT_ZERO, lo=0.0, hi=0.0, ops_used=ops)

    exhausted = False
    confident = True

    def sign_at(s: float) -> int:
        nonlocal ops, exhausted, confident
        count = replicas
        est = None
        for _ in range(MAX_REFINEMENTS + 1):
            cost = n * count * sampler_ops
            if ops + cost > budget:
                exhausted = True
                break
            est = estimate_k(spec, s, n, count, rand, tilt=tilt)
            ops += cost
            logger.debug(f"Bisection point s={s:.6g}: log k={est.log_k:.6g} +- {est.log_stderr:.3g} ({count} replicas)")
            # Decided once the interval around log k excludes 0
            if abs(est.log_k) > z * est.log_stderr:
                return 1 if est.log_k > 0 else -1
            count *= 2
        # Refinements or budget ran out: fall back on the sign of the last estimate
        confident = False
        if est is None:
            return 0
        return 1 if est.log_k > 0 else -1

    top_sign = sign_at(s_max)
    if top_sign < 0:
        logger.info(f"k(s) < 1 up to s_max={s_max}: s0 > {s_max}")
        return S0Estimate(kind=S0Kind.LOWER_BOUND, lo=s_max, hi=math.inf, confident=confident, ops_used=ops)

    lo, hi = 0.0, s_max
    while hi - lo > tol and not exhausted:
        mid = 0.5 * (lo + hi)
        sign = sign_at(mid)
        if sign == 0:
            break
        if sign > 0:
            hi = mid
        else:
            lo = mid

    if exhausted:
        logger.warning(f"s0 bisection budget of {budget} products exhausted at bracket [{lo}, {hi}]")
    return S0Estimate(
        kind=S0Kind.BRACKET,
        lo=lo,
        hi=hi,
        confident=confident and not exhausted,
        budget_exhausted=exhausted,
        ops_used=ops,
    )


def build_report(
    spec: ValidatedSpec,
    params: ClassifyParams,
    seed: int,
    budget: int | None = None,
    grid: tuple[float, ...] | None = None,
) -> LyapunovReport:
    """
    Full Lyapunov report: k on the s grid at lengths n and 2n (flagging
    length bias where they disagree by more than params.tol beyond noise),
    the top exponent and s0.
    """
    budget = settings.BUDGET_OPS if budget is None else budget
    if grid is None:
        steps = int(round(params.s_max / params.grid_step))
        grid = tuple(round(i * params.grid_step, 12) for i in range(steps + 1))

    estimates = []
    estimates_2n = []
    bias = []
    for s in grid:
        one = estimate_k(spec, s, params.n, params.replicas, derive_rng(seed, "k-grid", value_index(s)), params.tilt)
        two = estimate_k(spec, s, 2 * params.n, params.replicas, derive_rng(seed, "k-grid-2n", value_index(s)), params.tilt)
        # With n too short, log k still carries the O(1/n) start-up term
        noise = 3.0 * math.hypot(one.log_stderr, two.log_stderr)
        bias.append(abs(one.log_k - two.log_k) > math.log1p(params.tol) + noise)
        estimates.append(one)
        estimates_2n.append(two)

    if any(bias):
        flagged = [s for s, b in zip(grid, bias) if b]
        logger.warning(f"k estimates at n and 2n disagree at s = {flagged}")

    top = estimate_top_exponent(spec, params.n_top, params.replicas_top, derive_rng(seed, "top-exponent"))
    s0 = estimate_s0(
        spec, params.s_max, params.tol, params.confidence, budget, derive_rng(seed, "s0"),
        top=top, n=params.n, replicas=params.replicas, tilt=params.tilt,
    )
    return LyapunovReport(
        s_grid=tuple(grid),
        estimates=tuple(estimates),
        estimates_2n=tuple(estimates_2n),
        length_bias=tuple(bias),
        n=params.n,
        replicas=params.replicas,
        top_exponent=top,
        s0=s0,
    )


def check_log_convexity(report: LyapunovReport) -> ConvexityCheck:
    """
    Midpoint convexity of log k_hat over consecutive grid triples, allowing
    3 combined standard errors (plus 1e-12) at each triple.

    Returns:
        ConvexityCheck; worst_violation is the largest excess over the
        allowance (<= 0 when ok) and worst_at the middle s of that triple
    """
    est = sorted(report.estimates, key=lambda e: e.s)
    if len(est) < 3:
        raise ValueError("log-convexity needs at least 3 grid points")

    worst = -math.inf
    worst_at = None
    for left, mid, right in zip(est, est[1:], est[2:]):
        t = (mid.s - left.s) / (right.s - left.s)
        chord = (1.0 - t) * left.log_k + t * right.log_k
        noise = math.sqrt(((1.0 - t) * left.log_stderr) ** 2 + mid.log_stderr ** 2 + (t * right.log_stderr) ** 2)
        excess = (mid.log_k - chord) - (3.0 * noise + 1e-12)
        if excess > worst:
            worst, worst_at = excess, mid.s

    if worst > 0:
        logger.warning(f"log k is not convex at s={worst_at} (excess {worst:.3g})")
    return ConvexityCheck(ok=worst <= 0, worst_violation=worst, worst_at=worst_at)


def series_tail_diagnostic(
    spec: ValidatedSpec,
    s: float,
    N_max: int,
    replicas: int,
    rand: np.random.Generator,
    tilt: bool = True,
) -> SeriesTail:
    """
    Growth of E ||L_N||^s for the series L_N = T_1 + T_2 T_1 + ... + T_N ... T_1
    of i.i.d. cycle matrices, N = 1..N_max.

    Partial sums are kept in the log domain (the norm of a sum of
    nonnegative matrices is the sum of their norms). The verdict compares
    the slope of log E ||L_N||^s over the last quarter of N with a noise
    band of 3 combined standard errors per step plus 1e-3:
    DIVERGING above the band, BOUNDED within it, INCONCLUSIVE below.
    """
    if s <= 0:
        raise ValueError(f"s must be > 0, got {s}")
    if N_max < 4:
        raise ValueError("N_max must be at least 4")

    sampler = CycleSampler(spec, tilt=s if tilt else 0.0)
    log_scale = np.zeros(replicas)
    log_series = np.full(replicas, -np.inf)
    log_weight = np.zeros(replicas)
    product = None
    log_moments = []
    errors = []
    for _ in range(N_max):
        cycle, weight = sampler.sample(rand, replicas)
        log_weight += weight
        product = cycle if product is None else np.matmul(cycle, product)
        product, logs = _renormalise(product)
        log_scale += logs
        # log ||L_N|| = logaddexp(log ||L_{N-1}||, log ||T_N ... T_1||)
        log_series = np.logaddexp(log_series, log_scale)
        moment, se = _weighted_log_mean(s * log_series + log_weight)
        log_moments.append(moment)
        errors.append(se)

    start = N_max - max(2, N_max // 4)
    window = np.arange(start, N_max)
    slope = float(stats.linregress(window + 1, np.asarray(log_moments)[window]).slope)
    span = float(window[-1] - window[0])
    band = 3.0 * math.hypot(errors[window[0]], errors[window[-1]]) / span + 1e-3

    if slope > band:
        verdict = SeriesVerdict.DIVERGING
    elif abs(slope) <= band:
        verdict = SeriesVerdict.BOUNDED
    else:
        verdict = SeriesVerdict.INCONCLUSIVE
    logger.info(f"Series tail at s={s}: slope {slope:.4g} (band {band:.3g}) -> {verdict.value}")
    return SeriesTail(s=s, log_moments=tuple(log_moments), slope=slope, band=band, verdict=verdict)
