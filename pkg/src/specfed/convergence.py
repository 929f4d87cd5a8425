"""Numerical checks of the pwFedAvg convergence analysis on federated quadratics.

Every client loss is ``0.5 (w - c_k)^T A_k (w - c_k)`` with ``A_k`` symmetric
positive definite, so smoothness/strong-convexity constants, minimizers and the
expected behaviour of noisy gradient steps are all available in closed form.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .federation import pw_weights


@dataclass
class QuadraticFederatedProblem:
    A: np.ndarray  # (K, d, d)
    c: np.ndarray  # (K, d)
    rho: np.ndarray = None  # (K,) gradient-noise standard deviation, E||noise||^2 = rho_k^2

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        if self.A.ndim != 3 or self.A.shape[1] != self.A.shape[2]:
            raise ValueError("A must be a (K, d, d) stack")
        if self.c.shape != self.A.shape[:2]:
            raise ValueError("c must be (K, d)")
        if not np.allclose(self.A, np.transpose(self.A, (0, 2, 1)), atol=1e-12):
            raise ValueError("every A_k must be symmetric")
        if np.any(np.linalg.eigvalsh(self.A)[:, 0] <= 0):
            raise ValueError("every A_k must be positive definite")
        self.rho = np.zeros(self.K) if self.rho is None else np.asarray(self.rho, dtype=float)
        if self.rho.shape != (self.K,) or np.any(self.rho < 0):
            raise ValueError("rho needs one non-negative entry per client")

    @property
    def K(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @classmethod
    def random(cls, K: int, d: int, rng: np.random.Generator, cond: float = 10.0, spread: float = 1.0,
               rho=None) -> "QuadraticFederatedProblem":
        """Random SPD curvatures with eigenvalues in ``[1, cond]`` and centres ``~ N(0, spread^2)``."""
        A = np.empty((K, d, d))
        for k in range(K):
            Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
            lam = np.concatenate([[1.0, cond], rng.uniform(1.0, cond, d - 2)])[:d] if d > 1 else np.array([1.0])
            A[k] = (Q * lam) @ Q.T
            A[k] = 0.5 * (A[k] + A[k].T)
        c = spread * rng.standard_normal((K, d))
        return cls(A, c, rho)

    # ---- closed forms ------------------------------------------------
    def local_loss(self, k: int, w) -> float:
        e = np.asarray(w) - self.c[k]
        return 0.5 * float(e @ self.A[k] @ e)

    def local_grad(self, k: int, w) -> np.ndarray:
        return self.A[k] @ (np.asarray(w) - self.c[k])

    def local_minimizers(self) -> np.ndarray:
        return self.c.copy()

    def aggregate_hessian(self, weights) -> np.ndarray:
        return np.einsum("k,kij->ij", np.asarray(weights, dtype=float), self.A)

    def optimum(self, weights) -> np.ndarray:
        w = np.asarray(weights, dtype=float)
        rhs = np.einsum("k,kij,kj->i", w, self.A, self.c)
        return np.linalg.solve(self.aggregate_hessian(w), rhs)

    def global_loss(self, w, weights) -> float:
        return float(sum(a * self.local_loss(k, w) for k, a in enumerate(weights)))

    def full_gradient(self, w, weights) -> np.ndarray:
        """Aggregated full gradient (the noiseless virtual sequence)."""
        return np.einsum("k,kij,kj->i", np.asarray(weights, dtype=float), self.A, np.asarray(w) - self.c)

    def stochastic_gradients(self, w, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        """Per-client noisy gradients, shape ``(K, d)`` (or ``(n, K, d)``)."""
        g = np.einsum("kij,kj->ki", self.A, np.asarray(w) - self.c)
        shape = (self.K, self.d) if n is None else (n, self.K, self.d)
        noise = rng.standard_normal(shape) * (self.rho / np.sqrt(self.d))[:, None]
        return g + noise


@dataclass
class AssumptionEstimates:
    L: float
    beta: float
    rho: np.ndarray
    tau: float
    kappa: float
    d: int

    def __post_init__(self):
        if not 0 < self.beta <= self.L:
            raise ValueError("need 0 < beta <= L")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")


def smoothness(problem: QuadraticFederatedProblem) -> tuple[float, float]:
    """``(L, beta)``: largest and smallest Hessian eigenvalue over all clients."""
    ev = np.linalg.eigvalsh(problem.A)
    return float(ev[:, -1].max()), float(ev[:, 0].min())


def compute_tau(problem: QuadraticFederatedProblem, weights, L: float | None = None) -> float:
    """``max_k (L d / 2) (max_i |w*_i - w*_{k,i}|)^2``."""
    if L is None:
        L, _ = smoothness(problem)
    w_star = problem.optimum(weights)
    gaps = np.abs(w_star[None, :] - problem.local_minimizers()).max(axis=1)
    return float(np.max(L * problem.d / 2.0 * gaps ** 2))


def compute_Gt(kappa: float, tau: float, rho, weights, L: float) -> float:
    """``2 kappa tau + sum_k w_k^2 (rho_k^2 - 2 L tau)`` for normalized weights ``w_k``."""
    w = np.asarray(weights, dtype=float)
    rho = np.asarray(rho, dtype=float)
    return float(2.0 * kappa * tau + np.sum(w ** 2 * (rho ** 2 - 2.0 * L * tau)))


def proof_schedule(beta: float, L: float):
    """``gamma^t = 2 / (beta t + 2L)``."""
    return lambda t: 2.0 / (beta * t + 2.0 * L)


def statement_schedule(beta: float, L: float):
    """``gamma^t = 1 / (beta t + L)``, the alternative form of the step size."""
    return lambda t: 1.0 / (beta * t + L)


def estimate(problem: QuadraticFederatedProblem, weights, schedule, horizon: int) -> AssumptionEstimates:
    """All constants for a run of ``horizon`` steps.

    ``kappa`` is ``1 / min_t gamma^t`` over the horizon, the smallest value that
    keeps ``1/kappa <= gamma^t`` true at every step.
    """
    L, beta = smoothness(problem)
    gammas = np.array([schedule(t) for t in range(max(horizon, 1))])
    return AssumptionEstimates(L=L, beta=beta, rho=problem.rho.copy(), tau=compute_tau(problem, weights, L),
                               kappa=float(1.0 / gammas.min()), d=problem.d)


@dataclass
class BoundTrace:
    t: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray  # ||w^t - w*||^2 (or its expectation)
    gap: np.ndarray  # L(w^t) - L*
    Gt: np.ndarray
    rhs_lemma3: np.ndarray  # bound on delta[t+1] given delta[t]
    envelope: np.ndarray
    weights: np.ndarray = None
    w_star: np.ndarray = None
    omegas: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "gamma", "delta", "rhs_lemma3", "gap", "envelope", "Gt"])
            for i in range(len(self.t)):
                w.writerow([int(self.t[i]), repr(float(self.gamma[i])), repr(float(self.delta[i])),
                            repr(float(self.rhs_lemma3[i])), repr(float(self.gap[i])),
                            repr(float(self.envelope[i])), repr(float(self.Gt[i]))])


def theorem_envelope(T, est: AssumptionEstimates, G: float, dist0_sq: float) -> np.ndarray:
    """``L / (beta T + 2L) * (2G/beta + L ||w0 - w*||^2)``."""
    T = np.asarray(T, dtype=float)
    return est.L / (est.beta * T + 2.0 * est.L) * (2.0 * G / est.beta + est.L * dist0_sq)


def _finish(problem, weights, est, gammas, delta, gap, w_star, dist0_sq, omegas=None, meta=None) -> BoundTrace:
    T = len(gammas)
    Gt = np.array([compute_Gt(est.kappa, est.tau, est.rho, weights, est.L)] * T)
    rhs = (1.0 - est.beta * gammas) * delta[:T] + gammas ** 2 * Gt
    env = theorem_envelope(np.arange(T + 1), est, float(Gt.max()) if T else 0.0, dist0_sq)
    return BoundTrace(t=np.arange(T + 1), gamma=np.append(gammas, np.nan), delta=delta, gap=gap,
                      Gt=np.append(Gt, np.nan), rhs_lemma3=np.append(rhs, np.nan), envelope=env,
                      weights=np.asarray(weights), w_star=w_star, omegas=omegas, meta=meta or {})


def run_full_batch(problem: QuadraticFederatedProblem, weights, T: int, w0, schedule=None,
                   keep_omegas: bool = False) -> tuple[BoundTrace, AssumptionEstimates]:
    """Deterministic aggregated gradient descent for ``T`` steps."""
    weights = np.asarray(weights, dtype=float)
    L, beta = smoothness(problem)
    schedule = schedule or proof_schedule(beta, L)
    est = estimate(problem, weights, schedule, T)
    est.rho = np.zeros(problem.K)
    w_star = problem.optimum(weights)
    H = problem.aggregate_hessian(weights)
    gammas = np.array([schedule(t) for t in range(T)])
    e = np.asarray(w0, dtype=float) - w_star
    delta = np.empty(T + 1)
    gap = np.empty(T + 1)
    omegas = np.empty((T + 1, problem.d)) if keep_omegas else None
    w = np.asarray(w0, dtype=float).copy()
    for t in range(T + 1):
        e = w - w_star
        delta[t] = e @ e
        gap[t] = 0.5 * e @ H @ e
        if keep_omegas:
            omegas[t] = w
        if t < T:
            w = w - gammas[t] * problem.full_gradient(w, weights)
    return _finish(problem, weights, est, gammas, delta, gap, w_star, delta[0], omegas,
                   {"mode": "full_batch"}), est


def run_expected(problem: QuadraticFederatedProblem, weights, T: int, w0, schedule=None
                 ) -> tuple[BoundTrace, AssumptionEstimates]:
    """Exact expectation of noisy aggregated SGD, propagated through first and second moments."""
    weights = np.asarray(weights, dtype=float)
    L, beta = smoothness(problem)
    schedule = schedule or proof_schedule(beta, L)
    est = estimate(problem, weights, schedule, T)
    w_star = problem.optimum(weights)
    H = problem.aggregate_hessian(weights)
    lam, Q = np.linalg.eigh(H)
    d = problem.d
    noise_var = float(np.sum(weights ** 2 * problem.rho ** 2)) / d  # per coordinate, isotropic
    m = Q.T @ (np.asarray(w0, dtype=float) - w_star)
    S = np.outer(m, m)  # second moment in the eigenbasis of H
    gammas = np.array([schedule(t) for t in range(T)])
    delta = np.empty(T + 1)
    gap = np.empty(T + 1)
    for t in range(T + 1):
        delta[t] = np.trace(S)
        gap[t] = 0.5 * float(np.sum(lam * np.diag(S)))
        if t < T:
            f = 1.0 - gammas[t] * lam
            S = S * np.outer(f, f)
            S[np.diag_indices(d)] += gammas[t] ** 2 * noise_var
    return _finish(problem, weights, est, gammas, delta, gap, w_star, delta[0],
                   meta={"mode": "expected"}), est


def run_stochastic(problem: QuadraticFederatedProblem, weights, T: int, w0, rng: np.random.Generator,
                   schedule=None) -> tuple[BoundTrace, AssumptionEstimates]:
    """One sampled trajectory of noisy aggregated SGD; ``omegas`` holds every iterate."""
    weights = np.asarray(weights, dtype=float)
    L, beta = smoothness(problem)
    schedule = schedule or proof_schedule(beta, L)
    est = estimate(problem, weights, schedule, T)
    w_star = problem.optimum(weights)
    H = problem.aggregate_hessian(weights)
    gammas = np.array([schedule(t) for t in range(T)])
    omegas = np.empty((T + 1, problem.d))
    w = np.asarray(w0, dtype=float).copy()
    for t in range(T + 1):
        omegas[t] = w
        if t < T:
            a = weights @ problem.stochastic_gradients(w, rng)
            w = w - gammas[t] * a
    e = omegas - w_star
    delta = np.einsum("ti,ti->t", e, e)
    gap = 0.5 * np.einsum("ti,ij,tj->t", e, H, e)
    return _finish(problem, weights, est, gammas, delta, gap, w_star, delta[0], omegas,
                   {"mode": "stochastic"}), est


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------
@dataclass
class Lemma2Report:
    rounds: np.ndarray
    empirical: np.ndarray
    stderr: np.ndarray
    bound: float
    passed: np.ndarray

    @property
    def all_passed(self) -> bool:
        return bool(np.all(self.passed))


def verify_lemma2(problem: QuadraticFederatedProblem, weights, omegas, n_resamples: int = 1000,
                  rng: np.random.Generator | None = None, rounds=None) -> Lemma2Report:
    """Monte-Carlo ``E||a^t - abar^t||^2`` against ``sum_k w_k^2 rho_k^2`` at each checked iterate."""
    rng = rng or np.random.default_rng(0)
    weights = np.asarray(weights, dtype=float)
    omegas = np.atleast_2d(omegas)
    rounds = np.arange(len(omegas)) if rounds is None else np.asarray(rounds)
    bound = float(np.sum(weights ** 2 * problem.rho ** 2))
    emp, se = [], []
    for t in rounds:
        w = omegas[t]
        abar = problem.full_gradient(w, weights)
        a = np.einsum("k,nkd->nd", weights, problem.stochastic_gradients(w, rng, n_resamples))
        sq = np.sum((a - abar) ** 2, axis=1)
        emp.append(sq.mean())
        se.append(sq.std(ddof=1) / np.sqrt(n_resamples) if n_resamples > 1 else 0.0)
    emp, se = np.array(emp), np.array(se)
    return Lemma2Report(rounds, emp, se, bound, emp <= bound + 3 * se + 1e-15)


@dataclass
class Lemma3Report:
    lhs: np.ndarray
    rhs: np.ndarray
    stderr: np.ndarray
    passed: np.ndarray
    hypothesis_ok: np.ndarray

    @property
    def pass_rate(self) -> float:
        return float(np.mean(self.passed)) if len(self.passed) else 1.0


def verify_lemma3(trace: BoundTrace, est: AssumptionEstimates, problem: QuadraticFederatedProblem | None = None,
                  n_replicates: int = 0, rng: np.random.Generator | None = None, steps=None,
                  rtol: float = 1e-12) -> Lemma3Report:
    """Check ``E||w^{t+1}-w*||^2 <= (1 - beta g) ||w^t - w*||^2 + g^2 G^t`` step by step.

    Without replicates the trace's own next-step distance is the left side
    (exact for full-batch or expected traces). With ``n_replicates`` the next
    step is resampled from each iterate and compared within 3 standard errors.
    The ``1/kappa <= gamma^t`` hypothesis is evaluated and reported per step;
    a step whose hypothesis fails counts as not passed.
    """
    T = len(trace.t) - 1
    steps = np.arange(T) if steps is None else np.asarray(steps)
    gam = trace.gamma[steps]
    hyp = 1.0 / est.kappa <= gam * (1 + 1e-12)
    rhs = trace.rhs_lemma3[steps]
    if n_replicates:
        if problem is None or trace.omegas is None:
            raise ValueError("replicate checks need the problem and the iterates")
        rng = rng or np.random.default_rng(0)
        weights = trace.weights
        lhs, se = np.empty(len(steps)), np.empty(len(steps))
        for i, t in enumerate(steps):
            w = trace.omegas[t]
            a = np.einsum("k,nkd->nd", weights, problem.stochastic_gradients(w, rng, n_replicates))
            nxt = w[None, :] - gam[i] * a - trace.w_star[None, :]
            sq = np.sum(nxt ** 2, axis=1)
            lhs[i] = sq.mean()
            se[i] = sq.std(ddof=1) / np.sqrt(n_replicates)
        # the right side uses the realised distance at step t
        e = trace.omegas[steps] - trace.w_star
        rhs = (1.0 - est.beta * gam) * np.sum(e * e, axis=1) + gam ** 2 * trace.Gt[steps]
        passed = lhs <= rhs + 3 * se
    else:
        lhs = trace.delta[steps + 1]
        se = np.zeros(len(steps))
        passed = lhs <= rhs + rtol * np.maximum(np.abs(rhs), 1e-300)
    return Lemma3Report(lhs, rhs, se, passed & hyp, hyp)


@dataclass
class Theorem1Report:
    max_ratio: float
    violations: int
    slope: float
    slope_range: tuple

    @property
    def envelope_ok(self) -> bool:
        return self.violations == 0


def loglog_slope(T, values) -> float:
    T = np.asarray(T, dtype=float)
    v = np.asarray(values, dtype=float)
    keep = (T > 0) & (v > 0)
    if keep.sum() < 2:
        return float("nan")
    slope, _ = np.polyfit(np.log(T[keep]), np.log(v[keep]), 1)
    return float(slope)


def verify_theorem1(trace: BoundTrace, est: AssumptionEstimates | None = None, fit_range=(1_000, 100_000)
                    ) -> Theorem1Report:
    """Envelope check at every T and least-squares log-log slope of the gap over ``fit_range``."""
    ratio = np.divide(trace.gap, trace.envelope, out=np.zeros_like(trace.gap), where=trace.envelope > 0)
    viol = int(np.sum(trace.gap > trace.envelope * (1 + 1e-12) + 1e-300))
    lo, hi = fit_range
    sel = (trace.t >= lo) & (trace.t <= hi)
    # log-spaced sample so every decade weighs the same
    idx = np.flatnonzero(sel)
    if len(idx) > 200:
        grid = np.unique(np.round(np.geomspace(trace.t[idx[0]], trace.t[idx[-1]], 200)).astype(int))
        idx = grid
    slope = loglog_slope(trace.t[idx], trace.gap[idx]) if len(idx) else float("nan")
    return Theorem1Report(float(ratio.max()) if len(ratio) else 0.0, viol, slope, (lo, hi))


def pw_problem_weights(powers) -> np.ndarray:
    """Aggregation weights from per-client mean received power."""
    return pw_weights(powers)
