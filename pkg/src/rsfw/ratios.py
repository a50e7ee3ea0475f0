"""Section-efficiency ratios and their Monte Carlo validation.

The two ratios measure the fraction of Frank-Wolfe progress on a comparison
ball that survives restriction to a random affine section: the boundary form
compares a base point sitting on the ball's surface, the interior form a base
point anywhere inside.  Closed-form expectation bounds, a determinant-based
fallback bound, and Monte Carlo estimators for the expectation, tail, mixed
moment, Gram determinant, and Johnson-Lindenstrauss events live here.
"""

import math
from dataclasses import dataclass

import numpy as np

from .rng import derive_rng, derive_seed
from .stiefel import StiefelFrame, haar_projection_samples

DEGENERATE_PAIR_TOL = 1e-12
UNIT_NORM_TOL = 1e-10

# Admissibility scale for the high-probability tail event: directions closer
# than angle 1/10 count as nearly aligned.
DELTA0 = 1.0 - math.cos(0.1)


class DegeneratePairError(ValueError):
    """The pair (u, v) has inner product too close to 1 for the ratio to exist."""


@dataclass(frozen=True)
class RatioEstimate:
    mean: float
    stderr: float
    samples: int
    n: int
    d: int
    rho: float


@dataclass(frozen=True)
class MomentReport:
    name: str
    empirical: float
    theoretical: float
    stderr: float
    z_score: float


@dataclass(frozen=True)
class MixedMomentEstimate:
    """Estimate of E[R^a * Gamma] with the factor means from the same draws."""

    estimate: float
    stderr: float
    r_moment: float
    gamma_mean: float
    exponent: float
    samples: int


def theory_epsilon_bound() -> float:
    """Largest epsilon admissible in the tail-probability statement, delta0/8."""
    return DELTA0 / 8.0


def _check_pair(u: np.ndarray, v: np.ndarray) -> float:
    rho = float(u @ v)
    if rho >= 1.0 - DEGENERATE_PAIR_TOL:
        raise DegeneratePairError(f"<u, v> = {rho} is within {DEGENERATE_PAIR_TOL} of 1")
    return rho


def gamma_boundary(frame: StiefelFrame, u: np.ndarray, v: np.ndarray) -> float:
    """Boundary-ball section ratio (|Pu||Pv| - <Pu, Pv>) / (1 - <u, v>).

    u must be a unit vector; v may have norm up to 1 (the interior ratio
    dominates this expression on that range and matches it at norm 1).  The
    result is nonnegative by Cauchy-Schwarz and equals 1 for any
    full-dimensional frame and unit v.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if abs(np.linalg.norm(u) - 1.0) > UNIT_NORM_TOL or np.linalg.norm(v) > 1.0 + UNIT_NORM_TOL:
        raise ValueError("gamma_boundary requires a unit u and ||v|| <= 1")
    rho = _check_pair(u, v)
    pu = frame.project(u)
    pv = frame.project(v)
    num = np.linalg.norm(pu) * np.linalg.norm(pv) - pu @ pv
    return max(float(num), 0.0) / (1.0 - rho)


def gamma_interior(frame: StiefelFrame, u: np.ndarray, v: np.ndarray) -> float:
    """Interior-ball section ratio; v may have norm up to 1 and equals the
    boundary ratio when ||v|| = 1."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if abs(np.linalg.norm(u) - 1.0) > UNIT_NORM_TOL:
        raise ValueError("gamma_interior requires a unit first vector")
    vnorm2 = float(v @ v)
    if vnorm2 > (1.0 + DEGENERATE_PAIR_TOL) ** 2:
        raise ValueError(f"gamma_interior requires ||v|| <= 1, got {math.sqrt(vnorm2)}")
    rho = _check_pair(u, v)
    pu = frame.project(u)
    pv = frame.project(v)
    radicand = max(1.0 - vnorm2 + float(pv @ pv), 0.0)
    num = np.linalg.norm(pu) * math.sqrt(radicand) - pu @ pv
    return float(num) / (1.0 - rho)


def expected_gamma_bounds(n: int, d: int) -> tuple[float, float]:
    """Closed-form sandwich for the expected boundary ratio, valid for d >= 3.

    Returns (d/n - 4(n-d)/(n(n-1)), d/n); the lower endpoint may be negative
    for thin sections.
    """
    if d < 3:
        raise ValueError(f"expectation sandwich requires d >= 3, got d={d}")
    if d > n:
        raise ValueError(f"need d <= n, got d={d}, n={n}")
    upper = d / n
    lower = upper - 4.0 * (n - d) / (n * (n - 1.0))
    return lower, upper


def secondary_gamma_bound(n: int, d: int) -> float:
    """Determinant-route lower bound (d-1)/(96(n-1)), positive for all d >= 2.

    Loose (it gives 1/96 even at d = n where the ratio is exactly 1) but
    uniform over the pair angle, which the sandwich lower bound is not.
    """
    if d < 2:
        raise ValueError(f"determinant bound requires d >= 2, got d={d}")
    if d > n:
        raise ValueError(f"need d <= n, got d={d}, n={n}")
    return (d - 1.0) / (96.0 * (n - 1.0))


def pair_with_overlap(n: int, rho: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random unit pair (u, v) with <u, v> = rho.

    u is uniform on the sphere and v = rho u + sqrt(1 - rho^2) w with w
    uniform on the unit sphere of u's orthocomplement, so the joint law of
    the projected pair depends on rho only.
    """
    if not -1.0 < rho < 1.0:
        raise ValueError(f"need |rho| < 1, got {rho}")
    u = rng.standard_normal(n)
    u /= np.linalg.norm(u)
    w = rng.standard_normal(n)
    w -= (w @ u) * u
    w /= np.linalg.norm(w)
    v = rho * u + math.sqrt(1.0 - rho * rho) * w
    return u, v


def _gamma_samples(n, d, rho, samples, seed):
    """Boundary-ratio draws plus ||Pu||^2 draws over independent frames."""
    rng = derive_rng(seed, "pair")
    u, v = pair_with_overlap(n, rho, rng)
    proj = haar_projection_samples(n, d, np.stack([u, v]), samples, derive_seed(seed, "frames"))
    pu, pv = proj[:, 0, :], proj[:, 1, :]
    nu = np.linalg.norm(pu, axis=1)
    nv = np.linalg.norm(pv, axis=1)
    inner = np.einsum("ij,ij->i", pu, pv)
    gamma = np.maximum(nu * nv - inner, 0.0) / (1.0 - rho)
    return gamma, nu**2


def mc_estimate_gamma(n: int, d: int, rho: float, samples: int, seed: int) -> RatioEstimate:
    """Monte Carlo mean of the boundary ratio for a fixed pair at overlap rho."""
    if samples < 100:
        raise ValueError("need at least 100 samples for a meaningful estimate")
    gamma, _ = _gamma_samples(n, d, rho, samples, seed)
    mean = float(np.mean(gamma))
    stderr = float(np.std(gamma, ddof=1) / math.sqrt(samples))
    return RatioEstimate(mean=mean, stderr=stderr, samples=samples, n=n, d=d, rho=rho)


def mc_gamma_tail_frequency(n: int, d: int, rho: float, samples: int, seed: int) -> float:
    """Empirical frequency of the event {Gamma >= d/(2n)}.

    The matching exponential tail bound has unspecified universal constants,
    so only the frequency is reported; no bound is asserted here.
    """
    if samples < 100:
        raise ValueError("need at least 100 samples for a meaningful estimate")
    gamma, _ = _gamma_samples(n, d, rho, samples, seed)
    return float(np.mean(gamma >= d / (2.0 * n)))


def mc_mixed_moment(
    n: int, d: int, rho: float, a: float, samples: int, seed: int
) -> MixedMomentEstimate:
    """Estimate E[R^a * Gamma] with R = ||Pu||^2, alongside E[R^a] and E[Gamma].

    The factor means come from the same frame draws so product-versus-mixed
    comparisons are paired.  Theoretical lower bounds involve the caller's
    choice of (epsilon, p_hp); see mixed_moment_lower_bound.
    """
    if not 0.0 < a <= 1.0:
        raise ValueError(f"exponent must lie in (0, 1], got {a}")
    if samples < 100:
        raise ValueError("need at least 100 samples for a meaningful estimate")
    gamma, r = _gamma_samples(n, d, rho, samples, seed)
    prod = r**a * gamma
    return MixedMomentEstimate(
        estimate=float(np.mean(prod)),
        stderr=float(np.std(prod, ddof=1) / math.sqrt(samples)),
        r_moment=float(np.mean(r**a)),
        gamma_mean=float(np.mean(gamma)),
        exponent=a,
        samples=samples,
    )


def mixed_moment_lower_bound(n: int, d: int, a: float, eps: float, p_hp: float) -> float:
    """Direct lower bound p_hp (1-eps)^a (d/n)^a d/(2n) for E[R^a Gamma].

    p_hp is a configuration input (the universal tail constants are never
    pinned down), so this is reporting machinery, not a pass/fail gate.
    """
    return p_hp * (1.0 - eps) ** a * (d / n) ** a * d / (2.0 * n)


def nominal_tail_probability(
    d: int,
    eps: float,
    c_gamma: float = 1.0,
    c_big_gamma: float = 1.0,
    c_jl: float = 1.0,
    c_big_jl: float = 1.0,
) -> float:
    """Nominal good-event probability [1 - (C_G + C_J) exp(-min(c_G, c_J)
    eps^2 d)]_+ for user-supplied universal constants (default 1 each).

    Reporting only: the exponential-tail constants are never specified, so
    no pass/fail decision may depend on this number.
    """
    rate = min(c_gamma, c_jl)
    amplitude = c_big_gamma + c_big_jl
    return max(1.0 - amplitude * math.exp(-rate * eps * eps * d), 0.0)


def _delta_method_ratio_z(d1: np.ndarray, target: float) -> tuple[float, float, float]:
    """Empirical m2/m1^2 for draws d1 (m1 = E d1, m2 = E d1^2) with a
    delta-method standard error and z-score against the target value."""
    m = np.stack([d1, d1**2])
    m1, m2 = float(np.mean(m[0])), float(np.mean(m[1]))
    cov = np.cov(m) / m.shape[1]
    ratio = m2 / m1**2
    grad = np.array([-2.0 * m2 / m1**3, 1.0 / m1**2])
    var = float(grad @ cov @ grad)
    stderr = math.sqrt(max(var, 0.0))
    z = 0.0 if stderr == 0.0 and ratio == target else (ratio - target) / stderr if stderr > 0 else math.inf
    return ratio, stderr, z


def _report(name, draws, target) -> MomentReport:
    emp = float(np.mean(draws))
    stderr = float(np.std(draws, ddof=1) / math.sqrt(len(draws)))
    if stderr == 0.0:
        z = 0.0 if emp == target else math.inf
    else:
        z = (emp - target) / stderr
    return MomentReport(name=name, empirical=emp, theoretical=float(target), stderr=stderr, z_score=float(z))


def bartlett_moment_checks(n: int, d: int, samples: int, seed: int) -> list[MomentReport]:
    """Empirical versus closed-form moments of the projected 2x2 Gram matrix.

    Checks E||Pe1||^2 = d/n, E<Pe1, Pe2> = 0, E det = d(d-1)/(n(n-1)), and
    the second-moment ratio E[D^2]/E[D]^2 against its closed form (always at
    most 6).  d = n is allowed and degenerates to deterministic values.
    """
    if d < 2:
        raise ValueError(f"the Gram matrix construction needs d >= 2, got d={d}")
    if samples < 1000:
        raise ValueError("need at least 1000 samples")
    e = np.zeros((2, n))
    e[0, 0] = 1.0
    e[1, 1] = 1.0
    proj = haar_projection_samples(n, d, e, samples, derive_seed(seed, "frames"))
    p1, p2 = proj[:, 0, :], proj[:, 1, :]
    n1 = np.einsum("ij,ij->i", p1, p1)
    n2 = np.einsum("ij,ij->i", p2, p2)
    cross = np.einsum("ij,ij->i", p1, p2)
    det = n1 * n2 - cross**2

    det_mean = d * (d - 1.0) / (n * (n - 1.0))
    ratio_target = ((d + 2.0) * (d + 1.0) / (d * (d - 1.0))) * (n * (n - 1.0) / ((n + 2.0) * (n + 1.0)))
    reports = [
        _report("norm_sq_first", n1, d / n),
        _report("cross_inner", cross, 0.0),
        _report("det_gram", det, det_mean),
    ]
    ratio, stderr, z = _delta_method_ratio_z(det, ratio_target)
    reports.append(
        MomentReport(
            name="det_second_moment_ratio",
            empirical=float(ratio),
            theoretical=float(ratio_target),
            stderr=float(stderr),
            z_score=float(z),
        )
    )
    return reports


def jl_event_frequency(n: int, d: int, eps: float, trials: int, seed: int) -> float:
    """Frequency of |  ||Pz||^2 - d/n | <= eps d/n for a fixed unit vector.

    With a fixed seed the frames are shared across eps values, so the
    frequency is exactly nondecreasing in eps.
    """
    if not 0.0 < eps < 0.5:
        raise ValueError(f"need 0 < eps < 1/2, got {eps}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = derive_rng(seed, "jl-vector")
    z = rng.standard_normal(n)
    z /= np.linalg.norm(z)
    proj = haar_projection_samples(n, d, z, trials, derive_seed(seed, "frames"))
    norms = np.einsum("ijk,ijk->i", proj, proj)
    return float(np.mean(np.abs(norms - d / n) <= eps * d / n))
