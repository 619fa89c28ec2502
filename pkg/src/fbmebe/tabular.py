"""Exact successor measures on small finite MDPs.

Used as ground truth for the forward-backward identities: closed-form
``M = P (I - gamma P_pi)^-1``, Q recovery from ``M``, the exact expected
forward-backward loss, and the ``Q = F^T z_r`` identity at an exact
factorization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


@dataclass
class FiniteMDP:
    P: np.ndarray  # (n, k, n) transition probabilities
    gamma: float
    rho: np.ndarray  # (n,) data distribution over states

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        n, k, n2 = self.P.shape
        if n != n2:
            raise ValueError("P must have shape (n, k, n)")
        if np.any(self.P < 0) or not np.allclose(self.P.sum(axis=2), 1.0, atol=1e-12):
            raise ValueError("P rows must be probability vectors")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.rho.shape != (n,) or np.any(self.rho <= 0) or not np.isclose(self.rho.sum(), 1.0):
            raise ValueError("rho must be a strictly positive distribution over states")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]


def random_mdp(n: int, k: int, rng: np.random.Generator, gamma: float | None = None) -> FiniteMDP:
    P = rng.dirichlet(np.ones(n), size=(n, k))
    rho = rng.dirichlet(np.ones(n)) * 0.9 + 0.1 / n
    if gamma is None:
        gamma = float(rng.uniform(0.5, 0.95))
    return FiniteMDP(P, gamma, rho / rho.sum())


def random_policy(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.dirichlet(np.ones(k), size=n)


def check_policy(pi: np.ndarray, mdp: FiniteMDP) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("policy shape must be (n_states, n_actions)")
    if np.any(pi < 0) or not np.allclose(pi.sum(axis=1), 1.0):
        raise ValueError("policy rows must sum to 1")
    return pi


def state_kernel(mdp: FiniteMDP, pi: np.ndarray) -> np.ndarray:
    """``P_pi[s, s'] = sum_a pi(a|s) P(s'|s,a)``."""
    return np.einsum("sa,sat->st", check_policy(pi, mdp), mdp.P)


def exact_successor_measure(mdp: FiniteMDP, pi: np.ndarray) -> np.ndarray:
    """``M[(s,a), s'] = sum_t gamma^t Pr(s_{t+1} = s' | s, a, pi)``, shape (n, k, n)."""
    n, k = mdp.n_states, mdp.n_actions
    A = np.eye(n) - mdp.gamma * state_kernel(mdp, pi)
    lu = scipy.linalg.lu_factor(A)
    # M = P (I - gamma P_pi)^-1, solved as (A^T M^T = P^T)
    flat_P = mdp.P.reshape(n * k, n)
    M = scipy.linalg.lu_solve(lu, flat_P.T, trans=1).T
    return M.reshape(n, k, n)


def exact_q(mdp: FiniteMDP, pi: np.ndarray, reward: np.ndarray) -> np.ndarray:
    """``Q(s,a) = sum_s' M(s,a,s') r(s')``."""
    return exact_successor_measure(mdp, pi) @ np.asarray(reward, dtype=np.float64)


def direct_q(mdp: FiniteMDP, pi: np.ndarray, reward: np.ndarray) -> np.ndarray:
    """Policy evaluation without forming ``M``: ``Q = P (r + gamma V)``."""
    r = np.asarray(reward, dtype=np.float64)
    P_pi = state_kernel(mdp, pi)
    # V(s) = E[sum_t gamma^t r(s_{t+1}) | s] solves V = P_pi r + gamma P_pi V
    V = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, P_pi @ r)
    return mdp.P @ (r + mdp.gamma * V)


def exact_factorization(M: np.ndarray, rho: np.ndarray, d: int | None = None):
    """Rank-``d`` factorization of the density ``M / rho``.

    Returns ``F`` of shape (n, k, d) and ``B`` of shape (n, d) with
    ``F[s,a] . B[s'] ~= M[s,a,s'] / rho[s']`` (exact when ``d >= rank``).
    """
    n, k, _ = M.shape
    dens = (M / rho[None, None, :]).reshape(n * k, n)
    U, S, Vt = np.linalg.svd(dens, full_matrices=False)
    d = n if d is None else d
    F = (U[:, :d] * S[:d]).reshape(n, k, d)
    B = Vt[:d].T
    return F, B


def task_embedding(B: np.ndarray, rho: np.ndarray, reward: np.ndarray) -> np.ndarray:
    """``z_r = sum_s rho(s) B(s) r(s)``."""
    return (rho * np.asarray(reward, dtype=np.float64)) @ B


def expected_fb_loss(
    F: np.ndarray,
    B: np.ndarray,
    mdp: FiniteMDP,
    policies: np.ndarray,
    target_F: np.ndarray | None = None,
    target_B: np.ndarray | None = None,
    behavior: np.ndarray | None = None,
) -> float:
    """Exact expectation of the contrastive TD loss.

    ``F`` has shape (Z, n, k, d) for a finite set of Z embeddings with
    ``policies`` (Z, n, k); ``B`` is (n, d). Transitions come from
    ``s ~ rho``, ``a ~ behavior(.|s)`` (uniform by default), ``s' ~ P``;
    future states ``s+ ~ rho``; ``a' ~ pi_z(s')``. Targets default to the
    online tables. Embeddings are weighted uniformly.
    """
    F = np.asarray(F, dtype=np.float64)
    target_F = F if target_F is None else np.asarray(target_F, dtype=np.float64)
    target_B = B if target_B is None else np.asarray(target_B, dtype=np.float64)
    n, k = mdp.n_states, mdp.n_actions
    if behavior is None:
        behavior = np.full((n, k), 1.0 / k)
    w_sa = mdp.rho[:, None] * behavior  # (n, k)
    total = 0.0
    for z_idx in range(F.shape[0]):
        m = F[z_idx] @ B.T  # (n, k, n+) online predictions
        m_bar = target_F[z_idx] @ target_B.T  # (n', k', n+)
        pi = policies[z_idx]
        # E over a' of target and of its square, per (s', s+)
        t1 = np.einsum("ta,tap->tp", pi, m_bar)
        t2 = np.einsum("ta,tap->tp", pi, m_bar**2)
        g = mdp.gamma
        # E_{s'}[(m - g*T)^2] = m^2 - 2 g m E[T] + g^2 E[T^2]
        e_t1 = np.einsum("sat,tp->sap", mdp.P, t1)
        e_t2 = np.einsum("sat,tp->sap", mdp.P, t2)
        sq = m**2 - 2 * g * m * e_t1 + g**2 * e_t2
        sq_term = np.einsum("sa,sap,p->", w_sa, sq, mdp.rho)
        diag = np.einsum("sa,sat,sat->", w_sa, mdp.P, m)
        total += sq_term - 2 * diag
    return float(total / F.shape[0])


@dataclass
class IdentityReport:
    d: int
    max_abs_error: list[float] = field(default_factory=list)
    tol: float = 1e-8

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_abs_error)

    @property
    def worst(self) -> float:
        return max(self.max_abs_error, default=0.0)


def verify_q_identity(
    mdp: FiniteMDP, pi: np.ndarray, d: int, trials: int, rng: np.random.Generator, tol: float = 1e-8
) -> IdentityReport:
    """Compare ``M r`` with ``F^T z_r`` for random rewards at a rank-``d`` factorization."""
    M = exact_successor_measure(mdp, pi)
    F, B = exact_factorization(M, mdp.rho, d)
    report = IdentityReport(d=d, tol=tol)
    for _ in range(trials):
        r = rng.standard_normal(mdp.n_states)
        q_true = M @ r
        q_fb = F @ task_embedding(B, mdp.rho, r)
        report.max_abs_error.append(float(np.max(np.abs(q_true - q_fb))))
    return report


@dataclass
class OracleReport:
    lines: list[str] = field(default_factory=list)
    failures: int = 0

    def check(self, name: str, ok: bool, detail: str) -> None:
        self.lines.append(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        self.failures += 0 if ok else 1

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"


def fb_optimality_margin(
    mdp: FiniteMDP, pi: np.ndarray, perturbations: int, sigma: float, rng: np.random.Generator
) -> tuple[int, float]:
    """Count random perturbations of the exact ``F`` that raise the expected loss.

    Targets stay frozen at the exact factorization, so the loss is a strictly
    convex quadratic in ``F`` with its minimum at the exact solution.
    Returns (number of perturbations with strictly larger loss, smallest gap).
    """
    M = exact_successor_measure(mdp, pi)
    F, B = exact_factorization(M, mdp.rho)
    base = expected_fb_loss(F[None], B, mdp, pi[None], F[None], B)
    worse, gap = 0, np.inf
    for _ in range(perturbations):
        Fp = F + sigma * rng.standard_normal(F.shape)
        diff = expected_fb_loss(Fp[None], B, mdp, pi[None], F[None], B) - base
        worse += diff > 0
        gap = min(gap, diff)
    return int(worse), float(gap)


def run_oracle_suite(
    n_mdps: int = 50,
    max_states: int = 8,
    seed: int = 0,
    perturbations: int = 100,
    sigma: float = 0.1,
    inject_fault: bool = False,
) -> OracleReport:
    """All tabular identities on random MDPs.

    ``inject_fault`` adds 1e-3 to one successor-measure entry before the
    mass and Q checks, a negative control that must make the suite fail.
    """
    rng = np.random.default_rng(seed)
    report = OracleReport()
    mass_err = q_err = fb_err = 0.0
    for _ in range(n_mdps):
        n = int(rng.integers(2, max_states + 1))
        k = int(rng.integers(1, 4))
        mdp = random_mdp(n, k, rng)
        pi = random_policy(n, k, rng)
        M = exact_successor_measure(mdp, pi)
        if inject_fault:
            M[0, 0, 0] += 1e-3
        mass_err = max(mass_err, float(np.max(np.abs(M.sum(axis=2) - 1.0 / (1.0 - mdp.gamma)))))
        r = rng.standard_normal(n)
        q_err = max(q_err, float(np.max(np.abs(M @ r - direct_q(mdp, pi, r)))))
        fb_err = max(fb_err, verify_q_identity(mdp, pi, n, 3, rng).worst)
    report.check("row mass", mass_err <= 1e-12, f"max |sum M - 1/(1-gamma)| = {mass_err:.3e} (tol 1e-12)")
    report.check("Q recovery", q_err <= 1e-10, f"max |M r - direct Q| = {q_err:.3e} (tol 1e-10)")
    report.check("FB identity", fb_err <= 1e-8, f"max |M r - F^T z_r| = {fb_err:.3e} (tol 1e-8)")
    worse = total = 0
    gap = np.inf
    for _ in range(max(1, n_mdps // 10)):
        mdp = random_mdp(3, 2, rng)
        pi = random_policy(3, 2, rng)
        w, g = fb_optimality_margin(mdp, pi, perturbations, sigma, rng)
        worse, total, gap = worse + w, total + perturbations, min(gap, g)
    report.check(
        "FB loss optimality", worse == total,
        f"{worse}/{total} perturbations (sigma {sigma}) raise the loss, min gap {gap:.3e}",
    )
    return report
