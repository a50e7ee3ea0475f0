"""Linear minimization oracles, full-space and over random affine sections.

Ball and ellipsoid oracles are closed form.  The polytope section is a tiny
dense linear program solved by a Bland-pivoting simplex.  The graph-quartic
oracles solve the constrained optimality system by bisection on the
Karush-Kuhn-Tucker multiplier with damped Newton inner solves, compressing
the quadratic graph part once per call.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .geometry import Ball, Ellipsoid, FeasibleSet, GraphQuartic, SimplexPolytope
from .stiefel import StiefelFrame

DELTA_TOL = 1e-12
GAP_SLACK = 1e-12
FEAS_TOL = 1e-10
COND_LIMIT = 1e14


class OracleFailureError(RuntimeError):
    """An iterative oracle failed to converge; diagnostics in the message."""


class FrameDegenerateError(RuntimeError):
    """The reduced section system is numerically singular for this frame."""


@dataclass(frozen=True)
class SectionResult:
    """Outcome of a section LMO call.

    s is the ambient minimizer, z its section coordinates (s = x + lift(z)),
    and gap = <g, x - s> >= 0 since the base point itself is feasible in the
    section.  delta is the squared section-size scale (ellipsoid-like sets
    only).  degenerate marks a vanishing projected gradient or a singleton
    section, in which case s = x and the step is skipped.
    """

    s: np.ndarray
    z: np.ndarray
    gap: float
    delta: float | None = None
    degenerate: bool = False
    a_spectrum: tuple[float, float] | None = None


def _check_result(feasible_set: FeasibleSet, x: np.ndarray, result: SectionResult) -> SectionResult:
    if result.gap < -GAP_SLACK:
        raise OracleFailureError(f"negative section gap {result.gap}")
    if not feasible_set.contains(result.s, tol=FEAS_TOL):
        raise OracleFailureError("section oracle returned an infeasible point")
    return result


def _degenerate(x: np.ndarray, d: int, delta=None) -> SectionResult:
    return SectionResult(s=x.copy(), z=np.zeros(d), gap=0.0, delta=delta, degenerate=True)


# ---------------------------------------------------------------------------
# full-space oracles


def full_lmo_ball(center, radius: float, g) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    ng = np.linalg.norm(g)
    if ng == 0:
        raise ValueError("zero gradient: base point is stationary")
    return np.asarray(center, dtype=float) - radius * g / ng


def full_lmo_ellipsoid(H, R: float, g) -> np.ndarray:
    """Closed form -R H^{-1} g / sqrt(g^T H^{-1} g); zero-homogeneous in g."""
    g = np.asarray(g, dtype=float)
    if np.linalg.norm(g) == 0:
        raise ValueError("zero gradient: base point is stationary")
    try:
        cho = sla.cho_factor(np.asarray(H, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise FrameDegenerateError(f"ellipsoid matrix factorization failed: {exc}") from exc
    hg = sla.cho_solve(cho, g)
    return -R * hg / math.sqrt(float(g @ hg))


def full_lmo_polytope(n: int, g) -> np.ndarray:
    """Vertex minimizer over {x >= 0, sum x <= 1}: a coordinate vertex or 0."""
    g = np.asarray(g, dtype=float)
    i = int(np.argmin(g))
    s = np.zeros(n)
    if g[i] < 0:
        s[i] = 1.0
    return s


def _boundary_polish(level_fn, z: np.ndarray, direction: np.ndarray, tau: float,
                     rel_window: float = 1e-12) -> np.ndarray:
    """Slide z along a strictly level-increasing ray onto the level set.

    At an approximate multiplier solution the constraint gradient is parallel
    to the negative objective, so moving along the objective's descent
    direction raises the constraint level through tau exactly once.  The
    float resolution of the multiplier bracket leaves a level residual far
    larger than the residual achievable directly in this scalar variable.
    """
    gap = tau - level_fn(z)
    if gap <= rel_window * tau:
        return z
    t_hi = 1e-16
    sz = float(np.linalg.norm(z)) + 1.0
    while level_fn(z + t_hi * direction) < tau:
        t_hi *= 4.0
        if t_hi > sz:
            return z  # ray never reaches the level set; keep the inner solution
    t_lo = 0.0
    for _ in range(200):
        mid = 0.5 * (t_lo + t_hi)
        if level_fn(z + mid * direction) < tau:
            t_lo = mid
        else:
            t_hi = mid
        if t_hi - t_lo <= 1e-18 * (1.0 + t_hi):
            break
    return z + t_lo * direction


def _damped_newton(value, grad_fn, hess_fn, z0: np.ndarray, scale: float,
                   tol: float, max_iter: int) -> np.ndarray:
    """Minimize a smooth strictly convex function by damped Newton.

    Steps are halved until the value decreases; once decreases fall below
    float resolution the full step is trusted as long as it shrinks the
    gradient, which carries the iterate through the terminal quadratic
    regime that a strict-decrease line search cannot resolve.
    """
    z = z0.copy()
    cur = value(z)
    for _ in range(max_iter):
        grad = grad_fn(z)
        gn = float(np.linalg.norm(grad))
        if gn <= tol * scale:
            return z
        step = np.linalg.solve(hess_fn(z), -grad)
        t = 1.0
        improved = False
        while t > 1e-14:
            trial = z + t * step
            tv = value(trial)
            if tv < cur:
                z, cur = trial, tv
                improved = True
                break
            t *= 0.5
        if not improved:
            trial = z + step
            if float(np.linalg.norm(grad_fn(trial))) < gn:
                z, cur = trial, value(trial)
            else:
                return z
    grad = grad_fn(z)
    if float(np.linalg.norm(grad)) > 1e-6 * scale:
        raise OracleFailureError(f"inner Newton stalled: residual {np.linalg.norm(grad)}")
    return z


def full_lmo_graph(body: GraphQuartic, g, newton_tol: float = 1e-12, max_newton: int = 80) -> np.ndarray:
    """Boundary minimizer of <g, s> over the quartic graph body.

    Solves the stationarity system g + zeta * grad h(s) = 0 together with
    h(s) = tau by bracketing the multiplier zeta, bisecting 80 times, and
    running a damped Newton solve of the inner strictly convex problem at
    each multiplier.  Raises with residual diagnostics on non-convergence.
    """
    g = np.asarray(g, dtype=float)
    ng = float(np.linalg.norm(g))
    if ng == 0:
        raise ValueError("zero gradient: base point is stationary")
    t_dense = body.quad_operator().toarray()
    n = body.dim

    def inner(zeta: float, s0: np.ndarray) -> np.ndarray:
        return _damped_newton(
            value=lambda v: float(g @ v) + zeta * body.defining_value(v),
            grad_fn=lambda v: g + zeta * body.defining_gradient(v),
            hess_fn=lambda v: zeta * (t_dense + np.diag(3.0 * body.beta4 * v**2)),
            z0=s0,
            scale=max(1.0, ng),
            tol=newton_tol,
            max_iter=max_newton,
        )

    # residual h(s(zeta)) - tau is decreasing in zeta
    zeta = 1.0
    s = inner(zeta, np.zeros(n))
    phi = body.defining_value(s) - body.tau
    if phi > 0:
        while phi > 0:
            lo_z = zeta
            zeta *= 2.0
            if zeta > 1e18:
                raise OracleFailureError("multiplier bracket search diverged upward")
            s = inner(zeta, s)
            phi = body.defining_value(s) - body.tau
        hi_z, best = zeta, s
    else:
        hi_z, best = zeta, s
        while phi <= 0:
            hi_z, best = zeta, s
            zeta *= 0.5
            if zeta < 1e-18:
                raise OracleFailureError("multiplier bracket search diverged downward")
            s = inner(zeta, s)
            phi = body.defining_value(s) - body.tau
        lo_z = zeta
    # invariant: residual > 0 at lo_z, <= 0 at hi_z
    for _ in range(80):
        if hi_z - lo_z <= 1e-15 * hi_z:
            break
        mid = 0.5 * (lo_z + hi_z)
        s = inner(mid, best)
        if body.defining_value(s) - body.tau > 0:
            lo_z = mid
        else:
            hi_z = mid
            best = s
    s = _boundary_polish(body.defining_value, best, -g / ng, body.tau)
    zeta = hi_z
    kkt = np.linalg.norm(g + zeta * body.defining_gradient(s))
    h_res = abs(body.defining_value(s) - body.tau)
    if kkt > 1e-6 * ng or h_res > 1e-8 * body.tau:
        raise OracleFailureError(
            f"graph oracle residuals too large: kkt {kkt / ng}, constraint {h_res / body.tau}"
        )
    return s


# ---------------------------------------------------------------------------
# section oracles


def section_lmo_ball(center, radius: float, x, frame: StiefelFrame, g) -> SectionResult:
    """Exact minimizer over the disk B(center, radius) cut by x + range(P^T).

    The section is itself a ball in coordinates, centered at r Pv with
    radius r sqrt(1 - ||v||^2 + ||Pv||^2) where v = (center - x)/r, so the
    usual ball argmin applies.
    """
    ball = Ball(center, radius)
    x = np.asarray(x, dtype=float)
    if not ball.contains(x, tol=FEAS_TOL):
        raise ValueError("base point is outside the ball")
    g = np.asarray(g, dtype=float)
    pg = frame.project(g)
    npg = float(np.linalg.norm(pg))
    if npg <= 1e-14 * max(1.0, float(np.linalg.norm(g))):
        return _degenerate(x, frame.d)
    v = (ball.center - x) / radius
    pv = frame.project(v)
    radicand = max(1.0 - float(v @ v) + float(pv @ pv), 0.0)
    root = math.sqrt(radicand)
    z = radius * pv - radius * root * pg / npg
    s = x + frame.lift(z)
    gap = radius * (npg * root - float(pg @ pv))
    return _check_result(ball, x, SectionResult(s=s, z=z, gap=max(gap, 0.0), delta=None))


def _reduced_ellipsoid(M: np.ndarray, x: np.ndarray, frame: StiefelFrame):
    """Reduced quadratic data (A, b, delta, chol(A), spectrum) of a section."""
    rows = frame.rows
    mrows = rows @ M
    a = mrows @ rows.T
    a = 0.5 * (a + a.T)
    b = mrows @ x
    eigs = np.linalg.eigvalsh(a)
    if eigs[0] <= 0 or eigs[-1] / eigs[0] > COND_LIMIT:
        raise FrameDegenerateError(
            f"reduced section matrix is numerically singular (eigs {eigs[0]}, {eigs[-1]})"
        )
    try:
        cho = sla.cho_factor(a)
    except np.linalg.LinAlgError as exc:
        raise FrameDegenerateError(f"reduced section factorization failed: {exc}") from exc
    ainv_b = sla.cho_solve(cho, b)
    delta = 1.0 - float(x @ (M @ x)) + float(b @ ainv_b)
    return a, b, ainv_b, cho, delta, (float(eigs[0]), float(eigs[-1]))


def section_lmo_ellipsoid(M, x, frame: StiefelFrame, g) -> SectionResult:
    """Exact section minimizer over {y^T M y <= 1} via the completed square.

    In coordinates the constraint is (z + A^{-1}b)^T A (z + A^{-1}b) <= delta
    with A = P M P^T, b = P M x, delta = 1 - x^T M x + b^T A^{-1} b.  When
    delta is below tolerance the section is a singleton and the call is
    degenerate; otherwise the minimizer is the tangency point of the linear
    objective on the section ellipse boundary.
    """
    M = np.asarray(M, dtype=float)
    x = np.asarray(x, dtype=float)
    body = Ellipsoid(M)
    if not body.contains(x, tol=FEAS_TOL):
        raise ValueError("base point is outside the ellipsoid")
    g = np.asarray(g, dtype=float)
    pg = frame.project(g)
    npg = float(np.linalg.norm(pg))
    a, b, ainv_b, cho, delta, spectrum = _reduced_ellipsoid(M, x, frame)
    if delta <= DELTA_TOL:
        return _degenerate(x, frame.d, delta=delta)
    if npg <= 1e-14 * max(1.0, float(np.linalg.norm(g))):
        return _degenerate(x, frame.d, delta=delta)
    ainv_pg = sla.cho_solve(cho, pg)
    curve = math.sqrt(float(pg @ ainv_pg))
    z = -ainv_b - math.sqrt(delta) * ainv_pg / curve
    s = x + frame.lift(z)
    gap = float(pg @ ainv_b) + math.sqrt(delta) * curve
    result = SectionResult(
        s=s, z=z, gap=max(gap, 0.0), delta=delta, degenerate=False, a_spectrum=spectrum
    )
    return _check_result(body, x, result)


def _simplex_minimize(cost: np.ndarray, G: np.ndarray, h: np.ndarray, max_pivots: int = 20000):
    """Dense primal simplex for min c^T z subject to G z <= h with z free.

    Expects h >= 0 (the caller's base point is feasible, so after clipping
    roundoff this always holds and the all-slack basis is a feasible start;
    the textbook phase-1 is unreachable here).  Bland's rule guarantees
    termination; the final basis is re-solved against the original data to
    shed accumulated elimination error.
    """
    m, d = G.shape
    h = np.maximum(h, 0.0)
    nv = 2 * d + m
    a = np.hstack([G, -G, np.eye(m)])
    c_full = np.concatenate([cost, -cost, np.zeros(m)])
    tab = np.hstack([a, h[:, None]])
    basis = np.arange(2 * d, nv)
    for pivot in range(max_pivots):
        reduced = c_full - c_full[basis] @ tab[:, :nv]
        negative = np.where(reduced < -1e-9)[0]
        if negative.size == 0:
            break
        if pivot < 500:
            entering = int(negative[np.argmin(reduced[negative])])
        else:
            entering = int(negative[0])  # Bland's rule: cycling safeguard
        col = tab[:, entering]
        rows_ok = np.where(col > 1e-11)[0]
        if rows_ok.size == 0:
            raise OracleFailureError("section LP unbounded; section polytope should be compact")
        ratios = tab[rows_ok, nv] / col[rows_ok]
        rmin = ratios.min()
        ties = rows_ok[ratios <= rmin + 1e-12 * (1.0 + abs(rmin))]
        leaving = int(ties[np.argmin(basis[ties])])
        pivot_row = tab[leaving] / tab[leaving, entering]
        factors = tab[:, entering].copy()
        factors[leaving] = 0.0
        tab -= np.outer(factors, pivot_row)
        tab[leaving] = pivot_row
        basis[leaving] = entering
    else:
        raise OracleFailureError("section LP failed to converge within pivot budget")
    # polish: re-solve the optimal basis against the original constraint data
    bmat = a[:, basis]
    try:
        xb = np.linalg.solve(bmat, h)
    except np.linalg.LinAlgError:
        xb = tab[:, nv]
    full = np.zeros(nv)
    full[basis] = xb
    return full[:d] - full[d : 2 * d]


def section_lmo_polytope(n: int, x, frame: StiefelFrame, g) -> SectionResult:
    """Section LMO over {x >= 0, sum x <= 1}: a d-variable linear program
    with n + 1 inequality rows, optimum at a vertex of the section polytope."""
    body = SimplexPolytope(n)
    x = np.asarray(x, dtype=float)
    if not body.contains(x, tol=FEAS_TOL):
        raise ValueError("base point is outside the polytope")
    g = np.asarray(g, dtype=float)
    pg = frame.project(g)
    if np.linalg.norm(pg) <= 1e-14 * max(1.0, float(np.linalg.norm(g))):
        return _degenerate(x, frame.d)
    basis_t = frame.rows.T  # n x d
    G = np.vstack([-basis_t, np.sum(basis_t, axis=0)[None, :]])
    h = np.concatenate([x, [1.0 - float(np.sum(x))]])
    z = _simplex_minimize(pg, G, h)
    s = x + frame.lift(z)
    np.clip(s, 0.0, None, out=s)
    gap = -float(pg @ z)
    return _check_result(body, x, SectionResult(s=s, z=z, gap=max(gap, 0.0)))


def section_lmo_graph(
    body: GraphQuartic,
    u,
    frame: StiefelFrame,
    g,
    newton_tol: float = 1e-12,
    max_newton: int = 80,
) -> SectionResult:
    """Section LMO over the quartic graph body.

    The quadratic graph part is compressed once into d x d reduced matrices;
    the quartic term is evaluated exactly through u + P^T z.  The boundary
    multiplier is bracketed and bisected with damped Newton inner solves,
    returning the feasible-side iterate with the constraint active to within
    [tau - 1e-6, tau + 1e-10].
    """
    u = np.asarray(u, dtype=float)
    if not body.contains(u, tol=FEAS_TOL):
        raise ValueError("base point is outside the graph body")
    g = np.asarray(g, dtype=float)
    pg = frame.project(g)
    npg = float(np.linalg.norm(pg))
    if npg <= 1e-14 * max(1.0, float(np.linalg.norm(g))):
        return _degenerate(u, frame.d)
    rows = frame.rows
    t_op = body.quad_operator()
    q_red = rows @ (t_op @ rows.T)
    q_red = 0.5 * (q_red + q_red.T)
    t_u = rows @ (t_op @ u)
    h_u = body.defining_value(u)

    def ambient(z):
        return u + rows.T @ z

    def h_section(z):
        amb = ambient(z)
        return (
            0.5 * float(u @ (t_op @ u))
            + float(t_u @ z)
            + 0.5 * float(z @ (q_red @ z))
            + 0.25 * body.beta4 * float(np.sum(amb**4))
        )

    def h_grad(z):
        amb = ambient(z)
        return t_u + q_red @ z + body.beta4 * (rows @ amb**3)

    def h_hess(z):
        amb = ambient(z)
        return q_red + 3.0 * body.beta4 * (rows * amb**2) @ rows.T

    def inner(zeta: float, z0: np.ndarray) -> np.ndarray:
        return _damped_newton(
            value=lambda v: float(pg @ v) + zeta * h_section(v),
            grad_fn=lambda v: pg + zeta * h_grad(v),
            hess_fn=lambda v: zeta * h_hess(v),
            z0=z0,
            scale=max(1.0, npg),
            tol=newton_tol,
            max_iter=max_newton,
        )

    zeta = 1.0
    z = inner(zeta, np.zeros(frame.d))
    phi = h_section(z) - body.tau
    if phi > 0:
        while phi > 0:
            zeta *= 2.0
            if zeta > 1e18:
                raise OracleFailureError("section multiplier bracket diverged upward")
            z = inner(zeta, z)
            phi = h_section(z) - body.tau
        lo_z, hi_z = zeta / 2.0, zeta
        best = z
    else:
        hi_z, best = zeta, z
        while phi <= 0:
            hi_z, best = zeta, z
            zeta *= 0.5
            if zeta < 1e-18:
                raise OracleFailureError("section multiplier bracket diverged downward")
            z = inner(zeta, z)
            phi = h_section(z) - body.tau
        lo_z = zeta
    for _ in range(80):
        if hi_z - lo_z <= 1e-15 * hi_z:
            break
        mid = 0.5 * (lo_z + hi_z)
        z = inner(mid, best)
        if h_section(z) - body.tau > 0:
            lo_z = mid
        else:
            hi_z = mid
            best = z
    z = _boundary_polish(h_section, best, -pg / npg, body.tau)
    h_val = h_section(z)
    if h_val > body.tau + 1e-10 or h_val < body.tau - 1e-6:
        raise OracleFailureError(f"section constraint residual {h_val - body.tau} out of tolerance")
    s = ambient(z)
    gap = -float(pg @ z)
    return _check_result(body, u, SectionResult(s=s, z=z, gap=max(gap, 0.0)))


# ---------------------------------------------------------------------------
# dispatch and consistency checks


def full_lmo(feasible_set: FeasibleSet, g) -> np.ndarray:
    if isinstance(feasible_set, Ball):
        return full_lmo_ball(feasible_set.center, feasible_set.radius, g)
    if isinstance(feasible_set, Ellipsoid):
        return full_lmo_ellipsoid(feasible_set.M, 1.0, g)
    if isinstance(feasible_set, SimplexPolytope):
        return full_lmo_polytope(feasible_set.n, g)
    if isinstance(feasible_set, GraphQuartic):
        return full_lmo_graph(feasible_set, g)
    raise NotImplementedError(f"no full LMO for set kind {feasible_set.kind!r}")


def section_lmo(feasible_set: FeasibleSet, x, frame: StiefelFrame, g) -> SectionResult:
    if isinstance(feasible_set, Ball):
        return section_lmo_ball(feasible_set.center, feasible_set.radius, x, frame, g)
    if isinstance(feasible_set, Ellipsoid):
        return section_lmo_ellipsoid(feasible_set.M, x, frame, g)
    if isinstance(feasible_set, SimplexPolytope):
        return section_lmo_polytope(feasible_set.n, x, frame, g)
    if isinstance(feasible_set, GraphQuartic):
        return section_lmo_graph(feasible_set, x, frame, g)
    raise NotImplementedError(f"no section LMO for set kind {feasible_set.kind!r}")


def section_dominates_ball_check(
    feasible_set: FeasibleSet,
    x,
    frame: StiefelFrame,
    g,
    ball: Ball,
    probes: int = 128,
    seed: int = 0,
) -> bool:
    """Verify the section gap over the set dominates the gap over a contained
    comparison ball.  The containment precondition is probed on the ball's
    sphere (random directions plus the set's outward pole) before comparing."""
    from .rng import derive_rng

    x = np.asarray(x, dtype=float)
    rng = derive_rng(seed, "dominates-probes")
    dirs = [ball.center + 0 * ball.center]
    for _ in range(probes):
        w = rng.standard_normal(ball.dim)
        w /= np.linalg.norm(w)
        dirs.append(ball.center + ball.radius * w)
    pole = feasible_set.outward_direction(ball.center)
    if pole is not None:
        dirs.append(ball.center + ball.radius * pole)
    for p in dirs:
        if not feasible_set.contains(p, tol=1e-8):
            raise ValueError("comparison ball is not contained in the set")
    if not ball.contains(x, tol=FEAS_TOL):
        raise ValueError("base point must lie in the comparison ball")
    gap_set = section_lmo(feasible_set, x, frame, g).gap
    gap_ball = section_lmo_ball(ball.center, ball.radius, x, frame, g).gap
    return gap_set >= gap_ball - 1e-10
