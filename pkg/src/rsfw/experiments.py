"""Desk-scale problem generators for the experiment families.

Each generator is deterministic in its seed, returns a Problem whose
gradient is validated against finite differences, and ships a reference
optimum: exact where a closed form exists, otherwise a projected-gradient
solve certified by the full Frank-Wolfe gap.  Large public datasets are
replaced by synthetic data of the same structural form; the logistic family
also accepts external feature/label CSV files.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Ball, Ellipsoid, GraphQuartic, SimplexPolytope, euclidean_projection, make_knn_laplacian
from .oracles import full_lmo_ellipsoid
from .rng import derive_rng
from .solver import Problem, ShortStep, SolverConfig, rsfw_run


def finite_difference_check(problem: Problem, x, rng: np.random.Generator, probes: int = 20,
                            rel_tol: float = 1e-5, h: float = 1e-6) -> float:
    """Largest relative error of <grad, v> against a central difference over
    random unit directions; raises if it exceeds rel_tol."""
    x = np.asarray(x, dtype=float)
    g = problem.gradient(x)
    worst = 0.0
    for _ in range(probes):
        v = rng.standard_normal(problem.dim)
        v /= np.linalg.norm(v)
        fd = (problem.value(x + h * v) - problem.value(x - h * v)) / (2.0 * h)
        exact = float(g @ v)
        err = abs(fd - exact) / max(abs(exact), 1e-8)
        worst = max(worst, err)
    if worst > rel_tol:
        raise ValueError(f"gradient disagrees with finite differences: rel err {worst}")
    return worst


def _haar_basis(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _reference_solve_ellipsoid(Q, t, body: Ellipsoid, tol: float = 1e-10, max_iter: int = 500_000):
    """Projected gradient for min 0.5 (x-t)' Q (x-t) over the ellipsoid,
    run to a full-gap certificate of tol."""
    L = float(np.linalg.eigvalsh(Q)[-1])
    x = body.interior_point()
    gap = math.inf
    for it in range(max_iter):
        g = Q @ (x - t)
        if it % 25 == 0:
            s = full_lmo_ellipsoid(body.M, 1.0, g)
            gap = float(g @ (x - s))
            if gap <= tol:
                break
        x = euclidean_projection(body, x - g / L)
    else:
        raise RuntimeError(f"reference solve stalled at gap {gap}")
    return x, float(0.5 * (x - t) @ (Q @ (x - t))), gap


def accelerated_reference_solve(problem, body, tol: float = 1e-8, max_iter: int = 50_000):
    """Momentum projected gradient with function-value restarts.

    Generic reference solver for smooth convex objectives over bodies with
    an exact Euclidean projection.  Returns (x, f(x), achieved full gap);
    the gap is the stored convergence certificate and bounds f(x) - f*.
    """
    from .oracles import full_lmo

    L = problem.smoothness
    x = body.interior_point()
    y = x.copy()
    momentum = 0.0
    f_prev = problem.value(x)
    gap = math.inf
    for it in range(max_iter):
        g = problem.gradient(y)
        x_next = euclidean_projection(body, y - g / L)
        f_next = problem.value(x_next)
        if f_next > f_prev:
            y = x_next = euclidean_projection(body, x - problem.gradient(x) / L)
            f_next = problem.value(x_next)
            momentum = 0.0
        new_momentum = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * momentum * momentum))
        y = x_next + ((momentum - 1.0) / new_momentum) * (x_next - x)
        x, momentum, f_prev = x_next, new_momentum, f_next
        if it % 50 == 0:
            g = problem.gradient(x)
            s = full_lmo(body, g)
            gap = float(g @ (x - s))
            if gap <= tol:
                break
    return x, problem.value(x), gap


def gen_quadratic_ellipsoid(n: int, cond: float, seed: int, ell_spread=(0.8, 1.25)):
    """Quadratic 0.5 (x - t)' Q (x - t) over a gently anisotropic ellipsoid.

    Q has geometrically spaced eigenvalues with the requested condition
    number; the target t sits strictly outside the set so the gradient norm
    stays bounded away from zero on the feasible region.  The instance
    carries a projected-gradient reference optimum certified to 1e-10 gap.
    """
    if cond < 1:
        raise ValueError("condition number must be >= 1")
    rng = derive_rng(seed, "quad-ellipsoid")
    vq = _haar_basis(n, rng)
    q_eigs = np.geomspace(1.0, cond, n)
    Q = (vq * q_eigs) @ vq.T
    Q = 0.5 * (Q + Q.T)
    vm = _haar_basis(n, rng)
    m_eigs = np.linspace(ell_spread[0], ell_spread[1], n)
    M = (vm * m_eigs) @ vm.T
    M = 0.5 * (M + M.T)
    body = Ellipsoid(M)
    u = rng.standard_normal(n)
    u /= np.linalg.norm(u)
    t = 1.5 * u / math.sqrt(float(u @ (M @ u)))

    def value(x):
        r = x - t
        return float(0.5 * r @ (Q @ r))

    def gradient(x):
        return Q @ (x - t)

    x_ref, f_star, _ = _reference_solve_ellipsoid(Q, t, body)
    problem = Problem(
        dim=n,
        value=value,
        gradient=gradient,
        smoothness=float(q_eigs[-1]),
        f_star=f_star,
        hessian=Q,
        reference_point=x_ref,
    )
    return problem, body


@dataclass
class RandomFeatureLogistic:
    """Matrix-free kernel logistic pieces: the kernel acts as
    K v = Phi (Phi' v) + rho_k v and the section reductions are formed in
    feature space without materializing an n x d kernel product."""

    phi: np.ndarray
    labels: np.ndarray
    rho_k: float
    lam: float
    rho_h: float
    reference_gap: float | None = None

    @property
    def n(self) -> int:
        return self.phi.shape[0]

    def kernel_action(self, v: np.ndarray) -> np.ndarray:
        return self.phi @ (self.phi.T @ v) + self.rho_k * v

    def h_action(self, v: np.ndarray) -> np.ndarray:
        return self.kernel_action(v) + self.rho_h * v

    def reduced_quadratic(self, basis: np.ndarray, a: np.ndarray):
        """(A, b, level) for the section a + basis z of {a' H a <= 1}."""
        fs = self.phi.T @ basis
        fa = self.phi.T @ a
        A = fs.T @ fs + (self.rho_k + self.rho_h) * basis.T @ basis
        b = fs.T @ fa + (self.rho_k + self.rho_h) * (basis.T @ a)
        level = float(fa @ fa) + (self.rho_k + self.rho_h) * float(a @ a)
        return 0.5 * (A + A.T), b, level

    def section_curvature_bound(self, basis: np.ndarray) -> float:
        """Safety-factored top curvature of the loss restricted to the
        sketch range: 1.5 lambda_max((KS)'(KS)/(4n) + lam S'KS)."""
        ks = self.phi @ (self.phi.T @ basis) + self.rho_k * basis
        inner = ks.T @ ks / (4.0 * self.n) + self.lam * basis.T @ ks
        return 1.5 * float(np.linalg.eigvalsh(0.5 * (inner + inner.T))[-1])


def logistic_from_features(phi: np.ndarray, labels: np.ndarray, rho_k: float, lam: float,
                           rho_h: float, reference: bool = True):
    """Kernel-logistic problem over {a' H a <= 1} built from given features.

    The set is materialized densely (desk scale only); the problem's value
    and gradient go through feature products exclusively.  Unless disabled,
    a momentum projected-gradient reference optimum is solved and stored
    with its full-gap certificate.
    """
    phi = np.asarray(phi, dtype=float)
    y = np.asarray(labels, dtype=float)
    n = phi.shape[0]
    if y.shape != (n,) or not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be a +-1 vector matching the feature rows")
    rf = RandomFeatureLogistic(phi=phi, labels=y, rho_k=rho_k, lam=lam, rho_h=rho_h)

    def value(a):
        ka = rf.kernel_action(a)
        margins = -y * ka
        return float(np.mean(np.logaddexp(0.0, margins)) + 0.5 * lam * (a @ ka))

    def gradient(a):
        ka = rf.kernel_action(a)
        sig = 1.0 / (1.0 + np.exp(y * ka))
        return rf.kernel_action(lam * a - (y * sig) / n)

    k_dense = phi @ phi.T + rho_k * np.eye(n)
    h_dense = k_dense + rho_h * np.eye(n)
    k_top = float(np.linalg.eigvalsh(k_dense)[-1])
    smooth = k_top * k_top / (4.0 * n) + lam * k_top
    body = Ellipsoid(h_dense)
    problem = Problem(dim=n, value=value, gradient=gradient, smoothness=smooth)
    if reference:
        x_ref, f_ref, gap = accelerated_reference_solve(problem, body, tol=1e-8)
        problem.f_star = f_ref
        problem.reference_point = x_ref
        rf.reference_gap = gap
    return problem, body, rf


def gen_logistic_rf(n: int, m: int, rho_k: float, lam: float, seed: int, rho_h: float = 1e-3,
                    reference: bool = True):
    """Synthetic random-feature logistic instance with planted labels.

    Features are Gaussian, frozen at generation; labels come from a planted
    weight vector with small flip noise.
    """
    rng = derive_rng(seed, "logistic-rf")
    phi = rng.standard_normal((n, m)) / math.sqrt(m)
    w = rng.standard_normal(m)
    score = phi @ w
    y = np.sign(score + 0.1 * rng.standard_normal(n))
    y[y == 0] = 1.0
    return logistic_from_features(phi, y, rho_k, lam, rho_h, reference=reference)


@dataclass
class GraphSSLProblem:
    """Labeled least-squares objective on graph nodes plus its pieces."""

    problem: Problem
    laplacian: object
    labeled_idx: np.ndarray
    labels: np.ndarray
    points: np.ndarray


def gen_graph_ssl(
    m_nodes: int,
    k_nn: int,
    labeled_count: int,
    mu: float = 1e-6,
    gamma_g: float = 0.05,
    beta4: float = 0.01,
    tau: float = 1000.0,
    seed: int = 0,
):
    """Two-cluster point cloud, kNN Laplacian, +-1 labels on a random subset,
    quartic graph constraint with the standard run constants."""
    if labeled_count > m_nodes:
        raise ValueError("cannot label more nodes than exist")
    rng = derive_rng(seed, "graph-ssl")
    half = m_nodes // 2
    pts = np.vstack(
        [
            rng.standard_normal((half, 2)) * 0.6 + np.array([-2.0, 0.0]),
            rng.standard_normal((m_nodes - half, 2)) * 0.6 + np.array([2.0, 0.0]),
        ]
    )
    cluster = np.concatenate([-np.ones(half), np.ones(m_nodes - half)])
    lap = make_knn_laplacian(pts, k_nn, normalized=True)
    labeled = np.sort(rng.choice(m_nodes, size=labeled_count, replace=False))
    y = cluster[labeled]
    body = GraphQuartic(mu=mu, gamma_g=gamma_g, laplacian=lap, beta4=beta4, tau=tau)

    count = labeled_count

    def value(u):
        r = u[labeled] - y
        return float(0.5 * (r @ r) / count)

    def gradient(u):
        g = np.zeros(m_nodes)
        g[labeled] = (u[labeled] - y) / count
        return g

    u_star = np.zeros(m_nodes)
    u_star[labeled] = y
    f_star = 0.0 if body.contains(u_star) else None
    hess = np.zeros((m_nodes, m_nodes))
    hess[labeled, labeled] = 1.0 / count
    problem = Problem(
        dim=m_nodes,
        value=value,
        gradient=gradient,
        smoothness=1.0 / count,
        f_star=f_star,
        hessian=hess,
        labeled_idx=labeled,
    )
    return GraphSSLProblem(problem=problem, laplacian=lap, labeled_idx=labeled, labels=y, points=pts), body


def gen_failure_instance(n: int = 100, d: int = 10, delta0_interior: float = 0.1):
    """Corner-stalling instance: quadratic pull toward 5 e_1 over the
    simplex-like polytope, started strictly inside at (delta/n) 1.

    The constrained optimum is the vertex e_1 with value 8.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    target = np.zeros(n)
    target[0] = 5.0

    def value(x):
        r = x - target
        return float(0.5 * r @ r)

    def gradient(x):
        return x - target

    problem = Problem(
        dim=n,
        value=value,
        gradient=gradient,
        smoothness=1.0,
        f_star=8.0,
        hessian=np.eye(n),
    )
    body = SimplexPolytope(n)
    x0 = np.full(n, delta0_interior / n)
    return problem, body, x0


def gen_finite_sum_quadratic(n_components: int, n: int, seed: int, offset: float = 3.0, spread: float = 1.0):
    """Finite-sum quadratic mean_i 0.5 ||x - a_i||^2 over the unit ball.

    The component centers scatter around a point at distance offset > 1, so
    the averaged objective is 0.5 ||x - a_bar||^2 plus a constant, the
    constrained optimum a_bar/||a_bar|| is closed form, and the gradient
    norm is bounded below on the ball.
    """
    rng = derive_rng(seed, "finite-sum")
    u = rng.standard_normal(n)
    u /= np.linalg.norm(u)
    centers = offset * u + spread * rng.standard_normal((n_components, n))
    a_bar = centers.mean(axis=0)
    const = 0.5 * float(np.mean(np.sum(centers**2, axis=1)) - a_bar @ a_bar)

    def value(x):
        r = x - a_bar
        return float(0.5 * r @ r) + const

    def gradient(x):
        return x - a_bar

    def component_gradient(i, x):
        return x - centers[i]

    x_star = a_bar / np.linalg.norm(a_bar)
    f_star = float(0.5 * (np.linalg.norm(a_bar) - 1.0) ** 2) + const
    problem = Problem(
        dim=n,
        value=value,
        gradient=gradient,
        smoothness=1.0,
        f_star=f_star,
        hessian=np.eye(n),
        component_gradient=component_gradient,
        n_components=n_components,
    )
    return problem, Ball(np.zeros(n), 1.0), x_star


def select_short_step_constant(problem, feasible_set, base_config: SolverConfig, grid) -> float:
    """Smallest constant from the grid whose short-step run never increases
    the objective; selection is per (method, dimension) configuration."""
    for lip in sorted(grid):
        config = SolverConfig(
            horizon=base_config.horizon,
            section_dim=base_config.section_dim,
            seed=base_config.seed,
            step_rule=ShortStep(lipschitz=float(lip)),
            x0=base_config.x0,
        )
        trace = rsfw_run(problem, feasible_set, config)
        fs = np.concatenate([trace.f, [trace.summary["final_f"]]])
        if np.all(np.diff(fs) <= 1e-12):
            return float(lip)
    raise RuntimeError("no grid constant kept the run nonincreasing")


def sample_feasible_points(feasible_set, count: int, seed: int) -> np.ndarray:
    """Rejection-free feasible samples: random directions scaled inside."""
    rng = derive_rng(seed, "feasible-samples")
    n = feasible_set.dim
    out = np.empty((count, n))
    for i in range(count):
        w = rng.standard_normal(n)
        w /= np.linalg.norm(w)
        radial = rng.uniform(0.0, 1.0) ** (1.0 / n)
        if isinstance(feasible_set, Ball):
            out[i] = feasible_set.center + feasible_set.radius * radial * w
        elif isinstance(feasible_set, Ellipsoid):
            scale = 1.0 / math.sqrt(float(w @ (feasible_set.M @ w)))
            out[i] = radial * scale * w
        elif isinstance(feasible_set, GraphQuartic):
            out[i] = radial * feasible_set.boundary_scale(w) * w
        elif isinstance(feasible_set, SimplexPolytope):
            raw = rng.dirichlet(np.ones(n)) * rng.uniform(0.0, 1.0)
            out[i] = raw
        else:
            raise NotImplementedError(feasible_set.kind)
    return out


def min_gradient_norm_sampled(problem: Problem, feasible_set, count: int, seed: int) -> float:
    """Sampled lower estimate of inf ||grad f|| over the feasible set."""
    pts = sample_feasible_points(feasible_set, count, seed)
    return float(min(np.linalg.norm(problem.gradient(x)) for x in pts))


def save_instance(directory, name: str, manifest: dict, arrays: dict) -> Path:
    """Instance persistence: JSON manifest plus one .npy file per array."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for key, arr in arrays.items():
        fname = f"{name}_{key}.npy"
        np.save(directory / fname, np.asarray(arr))
        files[key] = fname
    doc = dict(manifest)
    doc["arrays"] = files
    path = directory / f"{name}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_instance(manifest_path):
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    arrays = {
        key: np.load(manifest_path.parent / fname)
        for key, fname in doc.get("arrays", {}).items()
    }
    return doc, arrays


def load_feature_csv(path) -> np.ndarray:
    """Features from CSV, one sample per row."""
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    return np.asarray(data, dtype=float)


def load_label_csv(path) -> np.ndarray:
    """Labels from CSV; anything nonpositive maps to -1, else +1."""
    raw = np.loadtxt(path, delimiter=",").ravel()
    return np.where(raw > 0, 1.0, -1.0)
