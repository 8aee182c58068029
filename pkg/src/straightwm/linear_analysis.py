"""Conditioning of the planning Hessian for linear latent dynamics z' = A z + B a.

Everything here is plain numpy plus a hand-written Jacobi eigensolver, so
results are reproducible bit for bit and independent of LAPACK builds.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError, DimensionError

RANK_TOL = 1e-10
JACOBI_TOL = 1e-12


@dataclass
class LinearSystem:
    A: np.ndarray
    B: np.ndarray
    horizon: int = 1
    z0: np.ndarray | None = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.B.ndim == 1:
            self.B = self.B.reshape(-1, 1)
        d = self.A.shape[0]
        if self.A.shape != (d, d) or self.B.shape[0] != d:
            raise DimensionError(f"A {self.A.shape} and B {self.B.shape} are incompatible")
        if self.horizon < 1:
            raise ContractError("horizon must be >= 1")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.B))):
            raise ContractError("A and B must be finite")
        if self.z0 is None:
            self.z0 = np.zeros(d)

    @property
    def d(self):
        return self.A.shape[0]

    @property
    def d_a(self):
        return self.B.shape[1]

    def step(self, z, a):
        return self.A @ z + self.B @ a

    def simulate(self, actions, z0=None):
        z = np.asarray(self.z0 if z0 is None else z0, dtype=np.float64)
        out = [z]
        for a in actions:
            z = self.step(z, np.asarray(a, dtype=np.float64))
            out.append(z)
        return np.array(out)


def rollout_jacobian(sys: LinearSystem) -> np.ndarray:
    """[A^{K-1} B, A^{K-2} B, ..., B] of shape (d, K * d_a)."""
    blocks, power = [], np.eye(sys.d)
    for _ in range(sys.horizon):
        blocks.append(power @ sys.B)
        power = sys.A @ power
    return np.hstack(blocks[::-1])


def gramian(sys: LinearSystem) -> np.ndarray:
    """Finite-horizon controllability Gramian sum_k A^k B B^T (A^T)^k."""
    W = np.zeros((sys.d, sys.d))
    AkB = sys.B.copy()
    for _ in range(sys.horizon):
        W += AkB @ AkB.T
        AkB = sys.A @ AkB
    return 0.5 * (W + W.T)


def _round_robin(n):
    """Disjoint index pairs for each round of a parallel Jacobi sweep (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        rounds.append([(players[i], players[n - 1 - i]) for i in range(n // 2)])
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def sym_eig(S, tol=JACOBI_TOL, max_sweeps=100):
    """Eigenvalues (descending) and eigenvectors (columns) of a symmetric matrix.

    Cyclic Jacobi with round-robin ordering: each round applies n/2 disjoint
    rotations at once. Sweeps stop when the off-diagonal Frobenius norm drops
    below ``tol * max(1, ||S||_F)``.
    """
    S = np.asarray(S, dtype=np.float64)
    n = S.shape[0]
    if S.shape != (n, n):
        raise DimensionError("sym_eig needs a square matrix")
    if not np.allclose(S, S.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(S).max())):
        raise ContractError("sym_eig needs a symmetric matrix")
    if n == 1:
        return S.diagonal().copy(), np.ones((1, 1))
    m = n + (n % 2)
    A = np.zeros((m, m))
    A[:n, :n] = 0.5 * (S + S.T)
    V = np.eye(m)
    threshold = tol * max(1.0, np.linalg.norm(S))
    diag_mask = np.eye(m, dtype=bool)
    rounds = [(np.array([p for p, _ in r]), np.array([q for _, q in r])) for r in _round_robin(m)]
    for _ in range(max_sweeps):
        off = np.linalg.norm(A[~diag_mask])
        if off < threshold:
            break
        for p, q in rounds:
            apq = A[p, q]
            app, aqq = A[p, p], A[q, q]
            # rotations on negligible entries are skipped (they would only overflow tau)
            active = np.abs(apq) > 1e-300 + 1e-18 * (np.abs(app) + np.abs(aqq))
            tau = np.where(active, (aqq - app) / np.where(active, 2.0 * apq, 1.0), 0.0)
            t = np.where(active, np.sign(tau) / (np.abs(tau) + np.hypot(1.0, tau)), 0.0)
            t = np.where(active & (tau == 0.0), 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            c, s = c[:, None], s[:, None]
            rp, rq = A[p, :], A[q, :]
            A[p, :], A[q, :] = c * rp - s * rq, s * rp + c * rq
            cp, cq = A[:, p], A[:, q]
            A[:, p], A[:, q] = cp * c.T - cq * s.T, cp * s.T + cq * c.T
            vp, vq = V[:, p], V[:, q]
            V[:, p], V[:, q] = vp * c.T - vq * s.T, vp * s.T + vq * c.T
    vals = np.diag(A)[:n]
    vecs = V[:n, :n] if n == m else V[:n, :]
    if n != m:
        keep = np.argsort(np.abs(V[n, :]))[:n]  # drop the padding direction
        vals, vecs = np.diag(A)[keep], V[:n, keep]
    order = np.argsort(-vals, kind="stable")
    return vals[order], vecs[:, order]


def singular_values(M) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    G = M.T @ M if M.shape[0] >= M.shape[1] else M @ M.T
    vals, _ = sym_eig(G)
    return np.sqrt(np.clip(vals, 0.0, None))


def spectral_norm(M, tol=1e-15, max_iter=1000) -> float:
    """Largest singular value: power iteration on M^T M, started from the Jacobi top eigenvector."""
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    G = M.T @ M
    vals, vecs = sym_eig(G)
    if vals[0] <= 0.0:
        return 0.0
    x = vecs[:, 0]
    lam = vals[0]
    for _ in range(max_iter):
        y = G @ x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
        new = float(x @ G @ x)
        if abs(new - lam) <= tol * abs(new):
            lam = new
            break
        lam = new
    return math.sqrt(max(lam, 0.0))


def condition_number(M) -> float:
    s = singular_values(M)
    return float(s[0] / s[-1]) if s[-1] > 0 else math.inf


def effective_condition(S, rank_tol=RANK_TOL) -> float:
    """lambda_max / smallest eigenvalue above rank_tol * lambda_max, for a PSD matrix."""
    return _effective_condition_from(sym_eig(S)[0], rank_tol)


def _effective_condition_from(vals, rank_tol):
    if vals[0] <= 0.0:
        raise ContractError("effective_condition needs a nonzero PSD matrix")
    if vals[-1] < -1e-8 * vals[0]:
        raise ContractError("effective_condition needs a PSD matrix")
    pos = vals[vals > rank_tol * vals[0]]
    return float(pos[0] / pos[-1])


def numerical_rank(S, rank_tol=RANK_TOL) -> int:
    vals, _ = sym_eig(S)
    if vals[0] <= 0.0:
        return 0
    return int(np.sum(vals > rank_tol * vals[0]))


@dataclass
class ConditioningReport:
    epsilon: float
    kappa_A: float
    kappa_B: float
    kappa_eff: float
    kappa_eff_hessian: float
    bound_ratio: float | None
    bound_power: float | None
    bound_eps: float | None
    bound_exp: float | None
    holds_ratio: bool | None
    holds_power: bool | None
    holds_eps: bool | None
    holds_exp: bool | None
    rank: int
    controllable_dim: int
    gram_jacobian_error: float
    lemma_relative_gap: float
    sigma_max_A: float
    sigma_min_A: float
    horizon: int
    notes: list = field(default_factory=list)

    def as_row(self) -> dict:
        row = asdict(self)
        row["notes"] = "; ".join(self.notes)
        return row


def _holds(bound, value, rtol=1e-9):
    return None if bound is None else bool(value <= bound * (1 + rtol))


def analyze(sys: LinearSystem, rank_tol=RANK_TOL) -> ConditioningReport:
    K = sys.horizon
    J = rollout_jacobian(sys)
    W = gramian(sys)
    H = 2.0 * J.T @ J
    w_vals = sym_eig(W)[0]
    kappa_w = _effective_condition_from(w_vals, rank_tol)
    kappa_h = effective_condition(H, rank_tol)
    sA = singular_values(sys.A)
    smax_a, smin_a = float(sA[0]), float(sA[-1])
    eps = spectral_norm(sys.A - np.eye(sys.d))
    rank = int(np.sum(w_vals > rank_tol * w_vals[0]))
    square = sys.d_a == sys.d
    sB = singular_values(sys.B)
    kappa_b = float(sB[0] / sB[-1]) if sB[-1] > 0 else math.inf
    invertible_b = square and sB[-1] > rank_tol * sB[0]
    kappa_a = smax_a / smin_a if smin_a > 0 else math.inf
    notes = []
    bound_ratio = bound_power = bound_eps = bound_exp = None
    if invertible_b:
        k = np.arange(K)
        bound_ratio = kappa_b**2 * np.sum(smax_a ** (2 * k)) / np.sum(smin_a ** (2 * k)) if smin_a > 0 else None
        bound_power = kappa_b**2 * kappa_a ** (2 * (K - 1)) if smin_a > 0 else None
        if eps < 1:
            bound_eps = kappa_b**2 * ((1 + eps) / (1 - eps)) ** (2 * (K - 1))
        if eps <= 0.5:
            bound_exp = kappa_b**2 * math.exp(6 * eps * K)
    else:
        notes.append("B not square-invertible: no Gramian bound claimed; kappa_eff is over range(W)")
    return ConditioningReport(
        epsilon=eps,
        kappa_A=kappa_a,
        kappa_B=kappa_b,
        kappa_eff=kappa_w,
        kappa_eff_hessian=kappa_h,
        bound_ratio=bound_ratio,
        bound_power=bound_power,
        bound_eps=bound_eps,
        bound_exp=bound_exp,
        holds_ratio=_holds(bound_ratio, kappa_w),
        holds_power=_holds(bound_power, kappa_w),
        holds_eps=_holds(bound_eps, kappa_w),
        holds_exp=_holds(bound_exp, kappa_w),
        rank=rank,
        controllable_dim=rank,
        gram_jacobian_error=float(np.abs(W - J @ J.T).max()),
        lemma_relative_gap=abs(kappa_h - kappa_w) / kappa_w,
        sigma_max_A=smax_a,
        sigma_min_A=smin_a,
        horizon=K,
        notes=notes,
    )


def random_eps_straight(rng, d, eps):
    """A = I + eps * G / ||G||_2 with Gaussian G, so ||A - I||_2 == eps."""
    G = rng.standard_normal((d, d))
    return np.eye(d) + eps * G / spectral_norm(G)


SWEEP_COLUMNS = [
    "draw",
    "epsilon",
    "horizon",
    "kappa_eff",
    "kappa_eff_hessian",
    "bound_ratio",
    "bound_power",
    "bound_eps",
    "bound_exp",
    "holds_ratio",
    "holds_power",
    "holds_eps",
    "holds_exp",
    "gram_jacobian_error",
    "lemma_relative_gap",
]


def sweep_theorem(n_draws=1000, d=4, eps_values=(0.1, 0.25, 0.4), horizons=(2, 5, 10), noise=0.1, seed=0):
    """Randomized check of the conditioning bounds; returns one dict per draw."""
    rows = []
    for i in range(n_draws):
        rng = np.random.default_rng([seed, i])
        eps = eps_values[i % len(eps_values)]
        K = horizons[(i // len(eps_values)) % len(horizons)]
        A = random_eps_straight(rng, d, eps)
        B = np.eye(d) + noise * rng.standard_normal((d, d))
        rep = analyze(LinearSystem(A, B, K))
        row = {c: getattr(rep, c, None) for c in SWEEP_COLUMNS if c not in ("draw", "horizon")}
        row.update(draw=i, epsilon=rep.epsilon, horizon=K, target_epsilon=eps)
        rows.append(row)
    return rows


def sweep_violations(rows) -> int:
    """Count of draws where any evaluated bound fails."""
    keys = ("holds_ratio", "holds_power", "holds_eps", "holds_exp")
    return sum(any(r[k] is False for k in keys) for r in rows)


def write_csv(path, rows, columns=None):
    columns = columns or list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class ProxyReport:
    cosines: np.ndarray  # C_t, t = 0..K-2
    lhs: np.ndarray  # ||(A - I) v_hat_t||
    rhs: np.ndarray  # sqrt(2(1 - C_t)) + sigma_max(B) * delta_a / c
    speed: float  # c (exact) or the relaxed minimum speed
    constant_speed: bool
    delta_a: float
    violations: np.ndarray
    mean_lhs: float
    mean_rhs: float  # sqrt(2 eta) + sigma_max(B) delta_a / c with eta = 1 - mean C
    notes: list = field(default_factory=list)

    @property
    def gap(self):
        return self.rhs - self.lhs


def cosine_proxy_check(sys: LinearSystem, states, actions, speed_rtol=1e-9, atol=1e-12) -> ProxyReport:
    """Per-step check that high velocity cosine bounds (A - I) along visited directions."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64).reshape(len(states) - 1, -1)
    if len(states) < 3:
        raise ContractError("need at least three states for one cosine")
    v = np.diff(states, axis=0)
    speeds = np.linalg.norm(v, axis=1)
    if np.any(speeds <= 0):
        raise ContractError("cosine proxy needs speeds bounded away from zero")
    vhat = v / speeds[:, None]
    cos = np.sum(vhat[:-1] * vhat[1:], axis=1)
    notes = []
    constant = bool(np.all(np.abs(speeds - speeds[0]) <= speed_rtol * speeds[0]))
    c = float(speeds[0]) if constant else float(speeds.min())
    if not constant:
        notes.append("speed not constant: using c = min_t ||v_t||; bound is a relaxation and may fail")
    delta_a = float(np.max(np.linalg.norm(np.diff(actions, axis=0), axis=1))) if len(actions) > 1 else 0.0
    smax_b = spectral_norm(sys.B)
    drive = smax_b * delta_a / c
    M = sys.A - np.eye(sys.d)
    lhs = np.linalg.norm(vhat[:-1] @ M.T, axis=1)
    rhs = np.sqrt(np.clip(2.0 * (1.0 - cos), 0.0, None)) + drive
    eta = 1.0 - float(np.mean(cos))
    return ProxyReport(
        cosines=cos,
        lhs=lhs,
        rhs=rhs,
        speed=c,
        constant_speed=constant,
        delta_a=delta_a,
        violations=lhs > rhs + atol,
        mean_lhs=float(np.mean(lhs)),
        mean_rhs=math.sqrt(max(2.0 * eta, 0.0)) + drive,
        notes=notes,
    )


def rotation(theta) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])
