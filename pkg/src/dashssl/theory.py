"""Convergence-bound verification on constructed quadratic problems.

Builds diagonal quadratics satisfying the gradient-dominance (PL)
inequality, mixes an out-of-distribution component into the per-example
loss stream, derives the constants used by the convergence statement,
and empirically checks the loss envelope and selection-set-size bounds
over seeded runs of the selection-stage loop.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import dash
from .errors import CapExceededError, InfeasibleConstantsError

Q_SHIFTED = "shifted-minimizer"
Q_SCALED = "scaled-loss"
Q_KINDS = (Q_SHIFTED, Q_SCALED)


# ---------------------------------------------------------------------------
# constant formulas

def batch_parameter(q: float, delta: float, C: float) -> int:
    """Base batch size: ceiling of the three-term square-root max."""
    _check_mixture_inputs(q, delta, C)
    l2d = math.log(2.0 / delta)
    terms = (math.sqrt(l2d / q ** 2),
             math.sqrt(l2d / (1.0 - q) ** 2),
             math.sqrt(l2d / (q * (1.0 - 1.0 / C) ** 2)))
    return int(math.ceil(max(terms)))


def concentration_beta(q: float, delta: float, m: int) -> float:
    l2d = math.log(2.0 / delta)
    return max(math.sqrt(l2d / (2.0 * q ** 2 * m)),
               math.sqrt(l2d / (2.0 * (1.0 - q) ** 2 * m)))


def concentration_alpha(q: float, delta: float, m: int, C: float) -> float:
    l2d = math.log(2.0 / delta)
    return math.sqrt(l2d / (q * m * (1.0 - 1.0 / C) ** 2))


def warmup_steps(F0: float, a: float, eta0: float, mu: float) -> float:
    """Steps of supervised SGD needed to halve the loss target."""
    if F0 <= 0 or a <= 0:
        raise ValueError("F0 and a must be > 0")
    if not 0.0 < eta0 * mu < 1.0:
        raise ValueError("need 0 < eta0 * mu < 1")
    return max(0.0, math.log(2.0 * F0 / a) / math.log(1.0 / (1.0 - eta0 * mu)))


def warmup_batch(G: float, delta: float, mu: float, a: float) -> float:
    if min(G, delta, mu, a) <= 0:
        raise ValueError("G, delta, mu, a must be > 0")
    return 4.0 * G ** 2 / (delta * mu * a)


def contraction_factor(eta: float, mu: float) -> float:
    """Per-step geometric improvement factor 1 / (1 - eta*mu/2)."""
    if eta <= 0 or mu <= 0 or eta * mu >= 2.0:
        raise ValueError("need eta, mu > 0 and eta * mu < 2")
    return 1.0 / (1.0 - eta * mu / 2.0)


def _check_mixture_inputs(q: float, delta: float, C: float) -> None:
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if not C > 1.0:
        raise ValueError("C must be > 1")


@dataclass
class TheoryConstants:
    # inputs
    G: float
    L: float
    mu: float
    a: float
    b: float
    theta: float
    delta: float
    q: float
    C: float
    eta0: float
    eta: float
    F0: float
    # derived
    m: int
    beta: float
    alpha: float
    a0: float
    b0: float
    b1: float
    rho_hat: float
    T0: float
    m0: float
    gamma_theory: float


def derive_constants(G: float, L: float, mu: float, a: float, b: float,
                     theta: float, delta: float, q: float, C: float,
                     eta0: float, eta: float, F0: float = 1.0) -> TheoryConstants:
    """Instantiate every constant of the convergence statement.

    The threshold scale rho_hat and the selection-noise constant b0
    depend on each other, so they are resolved by fixed-point iteration
    starting from rho_hat = a (tolerance 1e-10, at most 1000 rounds).
    """
    if mu <= 0 or L < mu or G <= 0:
        raise ValueError("need 0 < mu <= L and G > 0")
    if a <= 0 or b < 0 or theta <= 0 or F0 <= 0:
        raise ValueError("need a > 0, b >= 0, theta > 0, F0 > 0")
    _check_mixture_inputs(q, delta, C)
    if eta0 <= 0 or eta <= 0 or eta0 * L > 1.0 or eta * L > 1.0:
        raise ValueError("need 0 < eta0, eta with eta0 * L <= 1 and eta * L <= 1")

    m = batch_parameter(q, delta, C)
    beta = concentration_beta(q, delta, m)
    alpha = concentration_alpha(q, delta, m, C)
    a0 = (1.0 - 1.0 / C) * (1.0 - beta) * (1.0 - alpha) * q
    if a0 <= 0.0:
        bad = [name for name, v in (("beta", beta), ("alpha", alpha)) if v >= 1.0]
        raise InfeasibleConstantsError(
            f"a0 = {a0:.6g} <= 0; offending concentration terms >= 1: "
            f"{', '.join(bad) if bad else 'none'} (beta={beta:.6g}, alpha={alpha:.6g})")

    def b0_at(rho: float) -> float:
        return 2.0 * ((1.0 - q) * (1.0 + beta) * b * rho ** theta
                      + math.log(1.0 / delta))

    rho = a
    for _ in range(1000):
        new = dash.rho_hat_theoretical(a, G, delta, mu, m, a0, b0_at(rho))
        if not math.isfinite(new):
            raise InfeasibleConstantsError(
                "rho_hat fixed point diverged to a non-finite value")
        if abs(new - rho) <= 1e-10 * max(1.0, abs(rho)):
            rho = new
            break
        rho = new
    else:
        raise InfeasibleConstantsError(
            "rho_hat fixed point did not converge within 1000 iterations")
    b0 = b0_at(rho)

    return TheoryConstants(
        G=G, L=L, mu=mu, a=a, b=b, theta=theta, delta=delta, q=q, C=C,
        eta0=eta0, eta=eta, F0=F0,
        m=m, beta=beta, alpha=alpha, a0=a0, b0=b0, b1=b0 / a0, rho_hat=rho,
        T0=warmup_steps(F0, a, eta0, mu), m0=warmup_batch(G, delta, mu, a),
        gamma_theory=contraction_factor(eta, mu))


# ---------------------------------------------------------------------------
# constructed problems

@dataclass
class PLProblem:
    """Diagonal quadratic with uniform per-example center jitter.

    F(w) = 0.5 (w - w_star)' A (w - w_star) with spectrum in [mu, L], so
    2*mu*(F(w) - F(w_star)) <= |grad F(w)|^2 everywhere.  Per-example
    losses shift the center by a bounded vector z, keeping them
    nonnegative, with E[grad f] = grad F exactly.  Iterates are meant to
    stay in the ball of radius `radius` around w_star, which bounds
    per-example gradients by 2 * L * radius.
    """

    eigenvalues: np.ndarray
    w_star: np.ndarray
    radius: float
    noise_half_width: float

    @property
    def dim(self) -> int:
        return int(self.w_star.shape[0])

    @property
    def mu(self) -> float:
        return float(self.eigenvalues.min())

    @property
    def smoothness(self) -> float:
        return float(self.eigenvalues.max())

    @property
    def grad_bound(self) -> float:
        return 2.0 * self.smoothness * self.radius

    def objective(self, w: np.ndarray) -> float:
        v = w - self.w_star
        return 0.5 * float(v @ (self.eigenvalues * v))

    def objective_grad(self, w: np.ndarray) -> np.ndarray:
        return self.eigenvalues * (w - self.w_star)

    def project(self, w: np.ndarray) -> np.ndarray:
        v = w - self.w_star
        norm = float(np.linalg.norm(v))
        if norm <= self.radius:
            return w
        return self.w_star + v * (self.radius / norm)

    def sample_p(self, rng: np.random.Generator, n: int
                 ) -> Tuple[np.ndarray, np.ndarray]:
        """In-distribution example batch as (centers, scales)."""
        z = rng.uniform(-self.noise_half_width, self.noise_half_width,
                        size=(n, self.dim))
        return self.w_star + z, np.ones(n)

    def example_losses(self, w: np.ndarray, centers: np.ndarray,
                       scales: np.ndarray) -> np.ndarray:
        diff = w - centers
        return 0.5 * scales * np.einsum("ij,j,ij->i", diff, self.eigenvalues, diff)

    def example_grads(self, w: np.ndarray, centers: np.ndarray,
                      scales: np.ndarray) -> np.ndarray:
        return scales[:, None] * (self.eigenvalues * (w - centers))


def make_pl_problem(d: int, mu: float, L: float, R: float, seed: int,
                    noise_scale: float = 0.1) -> PLProblem:
    """Log-spaced spectrum in [mu, L]; per-example jitter |z| <= noise_scale*R."""
    if d < 1:
        raise ValueError("d must be >= 1")
    if not 0.0 < mu <= L:
        raise ValueError("need 0 < mu <= L")
    if R <= 0:
        raise ValueError("R must be > 0")
    if not 0.0 <= noise_scale <= 1.0:
        raise ValueError("noise_scale must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    eigs = np.geomspace(mu, L, d)
    w_star = rng.standard_normal(d)
    return PLProblem(eigs, w_star, float(R),
                     noise_scale * R / math.sqrt(d))


@dataclass
class QDistribution:
    """Out-of-distribution per-example loss component."""

    kind: str
    offset: np.ndarray
    factor: float

    def transform(self, centers: np.ndarray, scales: np.ndarray
                  ) -> Tuple[np.ndarray, np.ndarray]:
        if self.kind == Q_SHIFTED:
            return centers + self.offset, scales
        return centers, scales * self.factor


def make_q_distribution(problem: PLProblem, kind: str,
                        offset=None, factor: Optional[float] = None
                        ) -> QDistribution:
    if kind not in Q_KINDS:
        raise ValueError(f"unknown Q kind {kind!r}; expected one of {Q_KINDS}")
    d = problem.dim
    if kind == Q_SHIFTED:
        if offset is None:
            raise ValueError("shifted-minimizer requires an offset")
        off = np.asarray(offset, dtype=np.float64)
        if off.ndim == 0:
            off = float(off) * np.ones(d) / math.sqrt(d)
        if off.shape != (d,):
            raise ValueError("offset dimension mismatch")
        return QDistribution(kind, off, 1.0)
    if factor is None or factor <= 0:
        raise ValueError("scaled-loss requires factor > 0")
    return QDistribution(kind, np.zeros(d), float(factor))


def sample_mixture(problem: PLProblem, qdist: Optional[QDistribution], q: float,
                   rng: np.random.Generator, n: int
                   ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Live per-draw mixture: each example is in-distribution w.p. q.

    Returns (centers, scales, is_p).  Draw order is fixed (component
    indicators, then jitter) so runs are reproducible.  Without a Q
    component every draw is in-distribution and is_p is all-true.
    """
    if qdist is None:
        centers, scales = problem.sample_p(rng, n)
        return centers, scales, np.ones(n, dtype=bool)
    is_p = rng.random(n) < q
    centers, scales = problem.sample_p(rng, n)
    if not is_p.all():
        qc, qs = qdist.transform(centers[~is_p], scales[~is_p])
        centers = centers.copy()
        scales = scales.copy()
        centers[~is_p] = qc
        scales[~is_p] = qs
    return centers, scales, is_p


# ---------------------------------------------------------------------------
# low-loss-probability measurement

def estimate_low_loss_probability(problem: PLProblem, qdist: QDistribution,
                                  w: np.ndarray, n: int, seed: int
                                  ) -> Tuple[float, float]:
    """Monte-Carlo Pr_Q[f(w) <= F(w)] with a 95% normal-approx half-width."""
    if n < 100:
        raise ValueError("need n >= 100 draws")
    rng = np.random.default_rng(seed)
    centers, scales = problem.sample_p(rng, n)
    centers, scales = qdist.transform(centers, scales)
    losses = problem.example_losses(w, centers, scales)
    level = problem.objective(w)
    p_hat = float(np.mean(losses <= level))
    half = 1.96 * math.sqrt(max(p_hat * (1.0 - p_hat), 0.0) / n)
    return p_hat, half


def measure_low_loss_curve(problem: PLProblem, qdist: QDistribution,
                           radii: Sequence[float], n: int, seed: int
                           ) -> Tuple[np.ndarray, np.ndarray]:
    """Objective values and Q low-loss probabilities along a fixed ray."""
    direction = np.ones(problem.dim) / math.sqrt(problem.dim)
    f_vals, p_vals = [], []
    for i, r in enumerate(radii):
        w = problem.w_star + float(r) * direction
        p_hat, _ = estimate_low_loss_probability(problem, qdist, w, n, seed + i)
        f_vals.append(problem.objective(w))
        p_vals.append(p_hat)
    return np.array(f_vals), np.array(p_vals)


def fit_low_loss_exponents(f_values: Sequence[float], p_values: Sequence[float]
                           ) -> Tuple[float, float]:
    """Least-squares fit of p = b * F^theta on the log-log scale.

    Points with p == 0 or F == 0 carry no information and are dropped.
    """
    f = np.asarray(f_values, dtype=np.float64)
    p = np.asarray(p_values, dtype=np.float64)
    keep = (f > 0) & (p > 0)
    if keep.sum() < 2:
        raise ValueError("need at least two positive (F, p) points to fit")
    slope, intercept = np.polyfit(np.log(f[keep]), np.log(p[keep]), 1)
    return float(math.exp(intercept)), float(slope)


# ---------------------------------------------------------------------------
# bound verification runs

@dataclass
class TheoryRunRecord:
    seed: int
    steps: List[int]
    A_rho: List[int]
    B_rho: List[int]
    F: List[float]
    envelope: List[float]
    pass_envelope: bool
    pass_A: bool
    pass_B: bool
    samples_warmup: int
    samples_selection: int
    sample_bound: float
    F_start: float

    def schema_dict(self) -> Dict:
        return {"seed": self.seed, "steps": self.steps, "A_rho": self.A_rho,
                "B_rho": self.B_rho, "F": self.F, "envelope": self.envelope,
                "pass_envelope": self.pass_envelope, "pass_A": self.pass_A,
                "pass_B": self.pass_B}


@dataclass
class BoundReport:
    runs: List[TheoryRunRecord]
    pass_envelope: float
    pass_A: float
    pass_B: float

    def schema_dict(self) -> Dict:
        return {"runs": [r.schema_dict() for r in self.runs],
                "pass_envelope": self.pass_envelope,
                "pass_A": self.pass_A, "pass_B": self.pass_B}


def run_selection_stage(problem: PLProblem, qdist: Optional[QDistribution],
                        constants: TheoryConstants, T: int, seed: int,
                        thresholded: bool = True,
                        n_cap: int = dash.DEFAULT_N_CAP) -> TheoryRunRecord:
    """One seeded warm-up + selection-stage run on a constructed problem.

    With thresholded=False every sampled example is used (plain
    projected SGD on the same draw sequence).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = np.random.default_rng(seed)
    gamma = constants.gamma_theory
    d = problem.dim

    u = rng.standard_normal(d)
    w = problem.w_star + u / np.linalg.norm(u) * problem.radius

    t0_steps = int(math.ceil(constants.T0)) if constants.T0 > 0 else 0
    m0_batch = max(1, int(math.ceil(constants.m0)))
    for _ in range(t0_steps):
        centers, scales = problem.sample_p(rng, m0_batch)
        g = problem.example_grads(w, centers, scales).mean(axis=0)
        w = problem.project(w - constants.eta0 * g)
    f_start = problem.objective(w)

    steps, a_rho, b_rho, f_vals, env = [], [], [], [], []
    samples = 0
    for t in range(1, T + 1):
        n_t = int(math.floor(constants.m * gamma ** (t - 1) + 1e-9))
        if n_t > n_cap:
            raise CapExceededError(t, n_t, n_cap)
        n_t = max(1, n_t)
        samples += n_t
        centers, scales, is_p = sample_mixture(problem, qdist, constants.q, rng, n_t)
        losses = problem.example_losses(w, centers, scales)
        rho_t = (constants.C * gamma ** (-(t - 1)) * constants.rho_hat
                 if thresholded else math.inf)
        mask = dash.select(losses, rho_t)
        if mask.any():
            g = problem.example_grads(w, centers[mask], scales[mask]).mean(axis=0)
            w = problem.project(w - constants.eta * g)
        steps.append(t)
        a_rho.append(int(np.sum(mask & is_p)))
        b_rho.append(int(np.sum(mask & ~is_p)))
        f_vals.append(problem.objective(w))
        env.append(constants.rho_hat * gamma ** (-t))

    lower = [constants.a0 * constants.m * gamma ** (t - 1) for t in steps]
    upper = constants.b0 * constants.m
    record = TheoryRunRecord(
        seed=seed, steps=steps, A_rho=a_rho, B_rho=b_rho, F=f_vals, envelope=env,
        pass_envelope=bool(all(f <= e for f, e in zip(f_vals, env))),
        pass_A=bool(all(n >= lo for n, lo in zip(a_rho, lower))),
        pass_B=bool(all(n <= upper for n in b_rho)),
        samples_warmup=t0_steps * m0_batch, samples_selection=samples,
        sample_bound=t0_steps * m0_batch + constants.m * gamma ** T / (gamma - 1.0),
        F_start=f_start)
    return record


def verify_run(problem: PLProblem, qdist: Optional[QDistribution],
               constants: TheoryConstants, T: int, seeds: Sequence[int],
               thresholded: bool = True) -> BoundReport:
    """Selection-stage runs over seeds with envelope and set-size checks."""
    if not seeds:
        raise ValueError("need at least one seed")
    runs = [run_selection_stage(problem, qdist, constants, T, s, thresholded)
            for s in seeds]
    n = len(runs)
    return BoundReport(
        runs=runs,
        pass_envelope=sum(r.pass_envelope for r in runs) / n,
        pass_A=sum(r.pass_A for r in runs) / n,
        pass_B=sum(r.pass_B for r in runs) / n)
