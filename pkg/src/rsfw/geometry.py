"""Feasible sets, their curvature constants, and falsifiable witness checks.

Four concrete bodies are supported: Euclidean balls, ellipsoids, a quartic
graph-regularized level set, and the simplex-like polytope {x >= 0, sum <= 1}.
The polytope is deliberately not strongly convex; it is carried as the
counterexample set on which random-section methods stall.

Curvature constants for balls and ellipsoids use the principal-curvature
closed forms (inner rolling radius a_min^2/a_max, outer radius a_max^2/a_min);
these are not axiomatic here, the witness and rolling-ball tests gate them.
Constants for the graph body are sampled estimates only.
"""

import io
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .rng import derive_rng

MEMBERSHIP_TOL = 1e-10


class InvalidSetError(ValueError):
    """Parameters do not define a valid feasible set."""


@dataclass(frozen=True)
class GeometryConstants:
    """Set-level curvature data feeding the solver's comparison constants."""

    beta_c: float
    r_min: float
    r_max: float
    diameter: float
    kappa_unif: float
    estimated: bool = False


class FeasibleSet:
    """Interface shared by all feasible bodies."""

    kind = "abstract"

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def contains(self, x, tol: float = MEMBERSHIP_TOL) -> bool:
        """Membership with +tol slack on the defining inequality."""
        raise NotImplementedError

    def interior_point(self) -> np.ndarray:
        raise NotImplementedError

    def outward_direction(self, x):
        """Unit outward direction of steepest constraint increase at x.

        Used by the witness sampler to place a deterministic probe at the
        pole of the probe ball most likely to exit the set.  None when the
        defining function is stationary at x.
        """
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError


class Ball(FeasibleSet):
    kind = "ball"

    def __init__(self, center, radius: float):
        center = np.asarray(center, dtype=float)
        if radius <= 0:
            raise InvalidSetError(f"ball radius must be positive, got {radius}")
        self.center = center
        self.radius = float(radius)

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def contains(self, x, tol: float = MEMBERSHIP_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        return float(np.linalg.norm(x - self.center)) <= self.radius + tol

    def interior_point(self) -> np.ndarray:
        return self.center.copy()

    def outward_direction(self, x):
        v = np.asarray(x, dtype=float) - self.center
        nv = np.linalg.norm(v)
        return None if nv == 0 else v / nv

    def geometry(self) -> GeometryConstants:
        return ball_geometry(self.center, self.radius)

    def to_json(self) -> dict:
        return {"kind": self.kind, "center": self.center.tolist(), "radius": self.radius}


class Ellipsoid(FeasibleSet):
    """Level set {x : x^T M x <= 1} of a symmetric positive-definite M."""

    kind = "ellipsoid"

    def __init__(self, M):
        M = np.asarray(M, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise InvalidSetError("ellipsoid matrix must be square")
        if np.max(np.abs(M - M.T)) > 1e-10 * max(1.0, np.max(np.abs(M))):
            raise InvalidSetError("ellipsoid matrix must be symmetric")
        M = 0.5 * (M + M.T)
        eigs = np.linalg.eigvalsh(M)
        if eigs[0] <= 0:
            raise InvalidSetError(f"ellipsoid matrix must be positive definite, min eig {eigs[0]}")
        self.M = M
        self._eigs = eigs

    @classmethod
    def from_quadratic(cls, H, R: float) -> "Ellipsoid":
        """Build {a : a^T H a <= R^2} as the unit-level set of H / R^2."""
        if R <= 0:
            raise InvalidSetError(f"level radius must be positive, got {R}")
        return cls(np.asarray(H, dtype=float) / (R * R))

    @property
    def dim(self) -> int:
        return self.M.shape[0]

    def quadratic(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ (self.M @ x))

    def contains(self, x, tol: float = MEMBERSHIP_TOL) -> bool:
        return self.quadratic(x) <= 1.0 + tol

    def interior_point(self) -> np.ndarray:
        return np.zeros(self.dim)

    def outward_direction(self, x):
        g = self.M @ np.asarray(x, dtype=float)
        ng = np.linalg.norm(g)
        return None if ng == 0 else g / ng

    def geometry(self) -> GeometryConstants:
        return ellipsoid_geometry(self.M)

    def to_json(self) -> dict:
        return {"kind": self.kind, "matrix": self.M.tolist()}


class GraphQuartic(FeasibleSet):
    """Level set {u : mu/2 ||u||^2 + gamma_g/2 u^T L u + beta4/4 sum u^4 <= tau}.

    Smooth, strongly convex, symmetric about the origin, and genuinely
    non-ellipsoidal whenever beta4 > 0.
    """

    kind = "graph_quartic"

    def __init__(self, mu: float, gamma_g: float, laplacian, beta4: float, tau: float):
        if mu <= 0 or beta4 <= 0 or tau <= 0 or gamma_g < 0:
            raise InvalidSetError("need mu > 0, beta4 > 0, tau > 0, gamma_g >= 0")
        L = sp.csr_matrix(laplacian)
        if L.shape[0] != L.shape[1]:
            raise InvalidSetError("laplacian must be square")
        self.mu = float(mu)
        self.gamma_g = float(gamma_g)
        self.laplacian = L
        self.beta4 = float(beta4)
        self.tau = float(tau)

    @property
    def dim(self) -> int:
        return self.laplacian.shape[0]

    def defining_value(self, u) -> float:
        u = np.asarray(u, dtype=float)
        quad = self.mu * (u @ u) + self.gamma_g * (u @ (self.laplacian @ u))
        return 0.5 * quad + 0.25 * self.beta4 * float(np.sum(u**4))

    def defining_gradient(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return self.mu * u + self.gamma_g * (self.laplacian @ u) + self.beta4 * u**3

    def quad_operator(self) -> sp.csr_matrix:
        """The quadratic part mu I + gamma_g L as a sparse operator."""
        return (self.mu * sp.identity(self.dim, format="csr") + self.gamma_g * self.laplacian).tocsr()

    def contains(self, x, tol: float = MEMBERSHIP_TOL) -> bool:
        return self.defining_value(x) <= self.tau + tol

    def interior_point(self) -> np.ndarray:
        return np.zeros(self.dim)

    def outward_direction(self, x):
        g = self.defining_gradient(x)
        ng = np.linalg.norm(g)
        return None if ng == 0 else g / ng

    def boundary_scale(self, direction) -> float:
        """t > 0 with defining_value(t * direction) = tau, by bracketed bisection."""
        direction = np.asarray(direction, dtype=float)
        if np.all(direction == 0):
            raise ValueError("direction must be nonzero")
        hi = 1.0
        while self.defining_value(hi * direction) < self.tau:
            hi *= 2.0
            if hi > 1e18:
                raise InvalidSetError("boundary search diverged")
        lo = 0.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if self.defining_value(mid * direction) < self.tau:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-15 * hi:
                break
        return 0.5 * (lo + hi)

    def geometry(self, samples: int = 256, seed: int = 0) -> GeometryConstants:
        return graph_quartic_geometry(self, samples=samples, seed=seed)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "mu": self.mu,
            "gamma_g": self.gamma_g,
            "beta4": self.beta4,
            "tau": self.tau,
            "laplacian": laplacian_to_text(self.laplacian),
            "laplacian_shape": self.dim,
        }


class SimplexPolytope(FeasibleSet):
    """The polytope {x : x_i >= 0, sum x <= 1}.  Compact, convex, and not
    strongly convex; kept as the documented failure case."""

    kind = "simplex_polytope"

    def __init__(self, n: int):
        if n < 1:
            raise InvalidSetError("dimension must be >= 1")
        self.n = int(n)

    @property
    def dim(self) -> int:
        return self.n

    def contains(self, x, tol: float = MEMBERSHIP_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= -tol) and np.sum(x) <= 1.0 + tol)

    def interior_point(self, delta: float = 0.1) -> np.ndarray:
        return np.full(self.n, delta / self.n)

    def outward_direction(self, x):
        x = np.asarray(x, dtype=float)
        # steepest-ascent direction of the most binding constraint
        worst_coord = int(np.argmin(x))
        if np.sum(x) - 1.0 >= -x[worst_coord]:
            return np.full(self.n, 1.0 / math.sqrt(self.n))
        out = np.zeros(self.n)
        out[worst_coord] = -1.0
        return out

    def to_json(self) -> dict:
        return {"kind": self.kind, "n": self.n}


def contains(feasible_set: FeasibleSet, x, tol: float = MEMBERSHIP_TOL) -> bool:
    x = np.asarray(x, dtype=float)
    if x.shape != (feasible_set.dim,):
        raise ValueError(f"expected vector of length {feasible_set.dim}, got shape {x.shape}")
    return feasible_set.contains(x, tol=tol)


def kappa_unif(beta_c: float, r_min: float, diameter: float) -> float:
    """Global comparison factor min{2 beta_c r_min, r_min / diameter}."""
    if beta_c <= 0 or r_min <= 0 or diameter <= 0:
        raise ValueError("all geometry constants must be positive")
    return min(2.0 * beta_c * r_min, r_min / diameter)


def ball_geometry(center, radius: float) -> GeometryConstants:
    if radius <= 0:
        raise InvalidSetError(f"ball radius must be positive, got {radius}")
    beta_c = 1.0 / (2.0 * radius)
    return GeometryConstants(
        beta_c=beta_c,
        r_min=float(radius),
        r_max=float(radius),
        diameter=2.0 * float(radius),
        kappa_unif=kappa_unif(beta_c, radius, 2.0 * radius),
    )


def ellipsoid_geometry(M) -> GeometryConstants:
    """Principal-curvature constants of {x^T M x <= 1}.

    Semi-axes are a_i = eig_i(M)^(-1/2); the inner rolling radius is the
    smallest boundary curvature radius a_min^2 / a_max and the outer tangent
    radius is a_max^2 / a_min.  Scaling M by c > 0 leaves kappa_unif fixed.
    """
    M = np.asarray(M, dtype=float)
    eigs = np.linalg.eigvalsh(0.5 * (M + M.T))
    if eigs[0] <= 0:
        raise InvalidSetError(f"ellipsoid matrix must be positive definite, min eig {eigs[0]}")
    a_min = 1.0 / math.sqrt(eigs[-1])
    a_max = 1.0 / math.sqrt(eigs[0])
    r_min = a_min**2 / a_max
    r_max = a_max**2 / a_min
    beta_c = 1.0 / (2.0 * r_max)
    diameter = 2.0 * a_max
    return GeometryConstants(
        beta_c=beta_c,
        r_min=r_min,
        r_max=r_max,
        diameter=diameter,
        kappa_unif=kappa_unif(beta_c, r_min, diameter),
    )


def graph_quartic_geometry(body: GraphQuartic, samples: int = 256, seed: int = 0) -> GeometryConstants:
    """Sampled estimates for the quartic graph body.

    beta_c is lower-bounded by mu / (2 sup ||grad h||) over sampled boundary
    points, which is conservative: the set's true modulus is at least this,
    so inequalities gated on beta_c remain valid.  No rolling-ball radius is
    claimed, hence no kappa_unif; the constants are flagged as estimates and
    excluded from theory-mode step sizes.
    """
    rng = derive_rng(seed, "graph-geometry")
    n = body.dim
    grad_sup = 0.0
    norm_sup = 0.0
    for _ in range(samples):
        w = rng.standard_normal(n)
        w /= np.linalg.norm(w)
        t = body.boundary_scale(w)
        x = t * w
        grad_sup = max(grad_sup, float(np.linalg.norm(body.defining_gradient(x))))
        norm_sup = max(norm_sup, t)
    beta_c = body.mu / (2.0 * grad_sup)
    return GeometryConstants(
        beta_c=beta_c,
        r_min=math.nan,
        r_max=1.0 / (2.0 * beta_c),
        diameter=2.0 * norm_sup,
        kappa_unif=math.nan,
        estimated=True,
    )


def beta0_unif(kappa: float, n: int, d: int) -> float:
    """Approximate-oracle constant kappa * c_{n,d}, clamped into (0, 1].

    c_{n,d} is the expectation sandwich lower endpoint when d >= 3 makes it
    positive, otherwise the always-positive determinant-route bound.
    """
    if not 0.0 < kappa <= 1.0:
        raise ValueError(f"kappa must lie in (0, 1], got {kappa}")
    if d < 2 or d > n:
        raise ValueError(f"need 2 <= d <= n, got d={d}, n={n}")
    c = d / n - 4.0 * (n - d) / (n * (n - 1.0)) if d >= 3 else -1.0
    if c <= 0.0:
        c = (d - 1.0) / (96.0 * (n - 1.0))
    return min(kappa * c, 1.0)


def regularized_beta(beta_c: float, eps: float) -> float:
    """Strong-convexity modulus of the outer parallel body at offset eps."""
    if beta_c <= 0:
        raise ValueError(f"beta_c must be positive, got {beta_c}")
    if eps < 0:
        raise ValueError(f"eps must be nonnegative, got {eps}")
    return beta_c / (1.0 + 2.0 * eps * beta_c)


def strong_convexity_witness(
    feasible_set: FeasibleSet,
    x,
    y,
    lam: float,
    beta_c: float,
    probe_count: int,
    seed: int,
    tol: float = 1e-9,
) -> bool:
    """Sampled check of the ball-inclusion inequality for a candidate modulus.

    Probes the sphere of B(lam x + (1-lam) y, beta_c lam (1-lam) ||x-y||^2)
    at probe_count random points plus the deterministic outward pole, and
    reports whether every probe stays in the set within tol.  Violations of
    an overlarge beta_c concentrate at the outward pole, which random probes
    alone miss in high dimension.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if not feasible_set.contains(x) or not feasible_set.contains(y):
        raise ValueError("witness endpoints must be feasible")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    center = lam * x + (1.0 - lam) * y
    radius = beta_c * lam * (1.0 - lam) * float(np.sum((x - y) ** 2))
    if radius == 0.0:
        return True
    directions = []
    pole = feasible_set.outward_direction(center)
    if pole is not None:
        directions.append(pole)
    rng = derive_rng(seed, "witness")
    n = feasible_set.dim
    for _ in range(probe_count):
        w = rng.standard_normal(n)
        nw = np.linalg.norm(w)
        if nw > 0:
            directions.append(w / nw)
    for w in directions:
        if not feasible_set.contains(center + radius * w, tol=tol):
            return False
    return True


def euclidean_projection(feasible_set: FeasibleSet, x) -> np.ndarray:
    """Exact Euclidean projection, available for balls and ellipsoids.

    The ellipsoid case root-finds the projection multiplier lambda in
    z = (I + lambda M)^{-1} x to a 1e-12 residual on the level constraint.
    """
    x = np.asarray(x, dtype=float)
    if isinstance(feasible_set, Ball):
        v = x - feasible_set.center
        nv = np.linalg.norm(v)
        if nv <= feasible_set.radius:
            return x.copy()
        return feasible_set.center + feasible_set.radius * v / nv
    if isinstance(feasible_set, Ellipsoid):
        if feasible_set.contains(x, tol=0.0):
            return x.copy()
        eigs, vecs = np.linalg.eigh(feasible_set.M)
        y = vecs.T @ x

        def level(lam: float) -> float:
            z = y / (1.0 + lam * eigs)
            return float(np.sum(eigs * z * z)) - 1.0

        lo, hi = 0.0, 1.0
        while level(hi) > 0:
            hi *= 2.0
            if hi > 1e18:
                raise RuntimeError("projection multiplier search diverged")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if level(mid) > 0:
                lo = mid
            else:
                hi = mid
            if abs(level(hi)) <= 1e-12:
                break
        z = y / (1.0 + hi * eigs)
        return vecs @ z
    raise NotImplementedError(f"no exact Euclidean projection for {feasible_set.kind}")


def parallel_contains(feasible_set: FeasibleSet, x, eps: float, tol: float = MEMBERSHIP_TOL) -> bool:
    """Membership in the outer parallel body C + eps B."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    x = np.asarray(x, dtype=float)
    proj = euclidean_projection(feasible_set, x)
    return float(np.linalg.norm(x - proj)) <= eps + tol


def make_knn_laplacian(points, k: int, normalized: bool = True) -> sp.csr_matrix:
    """Symmetric k-nearest-neighbor graph Laplacian of a point sample.

    Directed kNN edges are symmetrized by union, giving every node degree at
    least one.  Exact duplicate points receive a deterministic sub-nanometer
    jitter so neighbor queries are well defined.  Positive semidefiniteness
    is verified at desk sizes.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2:
        raise ValueError("points must be a 2-D array of sample coordinates")
    m = pts.shape[0]
    if m < k + 1:
        raise ValueError(f"need at least k+1 = {k + 1} points, got {m}")
    _, first = np.unique(pts, axis=0, return_index=True)
    if first.shape[0] < m:
        dup = np.setdiff1d(np.arange(m), first)
        jitter_rng = derive_rng(0x6E6B6E, "knn-jitter")
        pts = pts.copy()
        pts[dup] += 1e-9 * jitter_rng.standard_normal((dup.shape[0], pts.shape[1]))
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k + 1)
    rows = np.repeat(np.arange(m), k)
    cols = idx[:, 1:].ravel()
    w = sp.coo_matrix((np.ones(rows.shape[0]), (rows, cols)), shape=(m, m)).tocsr()
    w = w.maximum(w.T)
    deg = np.asarray(w.sum(axis=1)).ravel()
    if normalized:
        inv_sqrt = 1.0 / np.sqrt(deg)
        d_half = sp.diags(inv_sqrt)
        lap = sp.identity(m, format="csr") - d_half @ w @ d_half
    else:
        lap = sp.diags(deg) - w
    lap = ((lap + lap.T) * 0.5).tocsr()
    if m <= 1500:
        lam_min = float(np.linalg.eigvalsh(lap.toarray())[0])
        if lam_min < -1e-8:
            raise InvalidSetError(f"laplacian not PSD, min eig {lam_min}")
    return lap


def laplacian_to_text(lap) -> str:
    """Coordinate triplet text: one 'row col value' line per stored entry."""
    coo = sp.coo_matrix(lap)
    buf = io.StringIO()
    for r, c, v in zip(coo.row, coo.col, coo.data):
        buf.write(f"{int(r)} {int(c)} {float(v)!r}\n")
    return buf.getvalue()


def laplacian_from_text(text: str, shape: int) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for line in text.strip().splitlines():
        if not line.strip():
            continue
        r, c, v = line.split()
        rows.append(int(r))
        cols.append(int(c))
        vals.append(float(v))
    return sp.coo_matrix((vals, (rows, cols)), shape=(shape, shape)).tocsr()


def write_laplacian_file(lap, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(laplacian_to_text(lap))


def read_laplacian_file(path, shape: int) -> sp.csr_matrix:
    with open(path, "r", encoding="utf-8") as fh:
        return laplacian_from_text(fh.read(), shape)


def set_to_json(feasible_set: FeasibleSet) -> dict:
    return feasible_set.to_json()


def set_from_json(doc: dict) -> FeasibleSet:
    kind = doc.get("kind")
    if kind == "ball":
        return Ball(np.asarray(doc["center"], dtype=float), float(doc["radius"]))
    if kind == "ellipsoid":
        return Ellipsoid(np.asarray(doc["matrix"], dtype=float))
    if kind == "graph_quartic":
        lap = laplacian_from_text(doc["laplacian"], int(doc["laplacian_shape"]))
        return GraphQuartic(doc["mu"], doc["gamma_g"], lap, doc["beta4"], doc["tau"])
    if kind == "simplex_polytope":
        return SimplexPolytope(int(doc["n"]))
    raise InvalidSetError(f"unknown set kind {kind!r}")
