"""Cross-entropy (GRAS) balancing of an IO table with a consumption-outside-
households side constraint.

Every cell is its initial value times a positive factor: exp(lam_i + tau_j)
in the intermediate block, exp(lam_i) in final demand, exp(tau_j) in value
added, exp(lam_i - eta) / exp(tau_j + eta) in the shared column / row, with
the exponent negated for negative initial cells. Row multipliers ``lam``
and column multipliers ``tau`` are found by damped Newton on the row/column
sum residuals; ``eta`` is solved in closed form from the side constraint.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .table_model import DataError, IODimensions, IOTable

log = logging.getLogger(__name__)

_EXP_CLIP = 700.0


class InfeasibleError(DataError):
    pass


class SolverError(RuntimeError):
    def __init__(self, msg, best_residual=math.inf, best=None):
        super().__init__(msg)
        self.best_residual = best_residual
        self.best = best


@dataclass(frozen=True)
class SolverConfig:
    residual_tol: float = 1e-10
    max_iterations: int = 200
    max_halvings: int = 30
    fallback_sweeps: int = 50

    def __post_init__(self):
        if not self.residual_tol > 0:
            raise ValueError("residual_tol must be positive")


@dataclass(frozen=True, eq=False)
class BalanceProblem:
    dims: IODimensions
    p0: np.ndarray  # (K+L) x (K+M); lower-right block unused
    y: np.ndarray
    use_phi: bool = True

    @property
    def K(self):
        return self.dims.K

    def blocks(self):
        """Split p0 into (A, D, V, phi column, phi row); D/V exclude the
        phi column/row when the side constraint is active."""
        K, d = self.K, self.dims
        A = self.p0[:K, :K]
        D = self.p0[:K, K:]
        V = self.p0[K:, :K]
        if not self.use_phi:
            return A, D, V, np.zeros(K), np.zeros(K)
        Dm = np.delete(D, d.phi_fd, axis=1)
        Vm = np.delete(V, d.phi_gva, axis=0)
        return A, Dm, Vm, D[:, d.phi_fd], V[d.phi_gva, :]


@dataclass(frozen=True)
class Multipliers:
    exp_lambda: np.ndarray
    exp_tau: np.ndarray
    exp_eta: float = 1.0

    @classmethod
    def unit(cls, K: int) -> "Multipliers":
        return cls(np.ones(K), np.ones(K), 1.0)


@dataclass(frozen=True, eq=False)
class BalancedTable:
    p: np.ndarray
    max_residual: float
    iterations: int
    converged: bool
    objective: float


def build_problem(table: IOTable, gross_outputs, total: float, use_phi: bool = True) -> BalanceProblem:
    dims = table.dims
    K, L, M = dims.K, dims.L, dims.M
    Y = np.asarray(gross_outputs, dtype=np.float64)
    if Y.shape != (K,):
        raise DataError(f"gross outputs must have length {K}")
    if not (total > 0 and math.isfinite(total)):
        raise DataError(f"total must be positive and finite, got {total}")
    if np.any(~np.isfinite(Y)) or np.any(Y < 0):
        raise DataError("gross outputs must be finite and non-negative")
    if abs(math.fsum(Y) - total) > 1e-9 * total:
        raise DataError(f"gross outputs sum to {math.fsum(Y)!r}, not the total {total!r}")
    t = table.filled()
    cells = np.zeros((K + L, K + M))
    cells[:K, :K], cells[:K, K:], cells[K:, :K] = t.A, t.D, t.V
    if not np.all(np.isfinite(cells)):
        raise DataError("initial table has non-finite cells")
    p0 = cells / total
    y = Y / total
    prob = BalanceProblem(dims, p0, y, use_phi)
    for i in range(K):
        row, col = p0[i, :], p0[:, i]
        if y[i] == 0:
            if np.any(row != 0) or np.any(col != 0):
                raise InfeasibleError(f"industry {i + 1} has zero gross output but non-zero cells")
        elif not (np.any(row > 0) and np.any(col > 0)):
            raise InfeasibleError(f"industry {i + 1} has positive gross output but no positive "
                                  f"cell in its {'row' if not np.any(row > 0) else 'column'}")
    if use_phi:
        _, _, _, c, r = prob.blocks()
        up = np.sum(np.abs(r[r < 0])) + np.sum(c[c > 0])
        down = np.sum(r[r > 0]) + np.sum(np.abs(c[c < 0]))
        if (up > 0) != (down > 0):
            raise InfeasibleError("consumption outside households cannot be matched: "
                                  "one side has no cell of the required sign")
    if np.any(p0[:K, :K] < 0):
        log.warning("initial intermediate block has %d negative cell(s)", int(np.sum(p0[:K, :K] < 0)))
    return prob


def _exp(x):
    return np.exp(np.clip(x, -_EXP_CLIP, _EXP_CLIP))


def _signs(a):
    return np.where(a < 0, -1.0, 1.0)


def eta_closure(prob: BalanceProblem, lam: np.ndarray, tau: np.ndarray) -> float:
    """log exp(eta) making the phi column and row totals equal."""
    if not prob.use_phi:
        return 0.0
    _, _, _, c, r = prob.blocks()
    qc = c * _exp(_signs(c) * lam)
    qr = r * _exp(_signs(r) * tau)
    up = np.sum(-qr[qr < 0]) + np.sum(qc[qc > 0])
    down = np.sum(qr[qr > 0]) + np.sum(-qc[qc < 0])
    if up == 0 and down == 0:
        return 0.0
    return 0.5 * (math.log(up) - math.log(down))


def _cells(prob: BalanceProblem, lam, tau, eta):
    A, D, V, c, r = prob.blocks()
    pA = A * _exp(_signs(A) * (lam[:, None] + tau[None, :]))
    pD = D * _exp(_signs(D) * lam[:, None])
    pV = V * _exp(_signs(V) * tau[None, :])
    pc = c * _exp(_signs(c) * (lam - eta))
    pr = r * _exp(_signs(r) * (tau + eta))
    return pA, pD, pV, pc, pr


def _log_residuals(prob, lam, tau):
    eta = eta_closure(prob, lam, tau)
    pA, pD, pV, pc, pr = _cells(prob, lam, tau, eta)
    rows = pA.sum(axis=1) + pD.sum(axis=1) + pc - prob.y
    cols = pA.sum(axis=0) + pV.sum(axis=0) + pr - prob.y
    return np.concatenate([rows, cols]), eta


def residuals(prob: BalanceProblem, m: Multipliers) -> np.ndarray:
    """Row-sum then column-sum residuals (length 2K). ``m.exp_eta`` is not
    used: eta follows from the side constraint."""
    return _log_residuals(prob, np.log(m.exp_lambda), np.log(m.exp_tau))[0]


def _jacobian(prob, lam, tau, eta):
    K = prob.K
    _, _, _, c, r = prob.blocks()
    pA, pD, pV, pc, pr = _cells(prob, lam, tau, eta)
    aA, ac, ar = np.abs(pA), np.abs(pc), np.abs(pr)
    deta_dlam = np.zeros(K)
    deta_dtau = np.zeros(K)
    if prob.use_phi:
        qc = c * _exp(_signs(c) * lam)
        qr = r * _exp(_signs(r) * tau)
        up = np.sum(-qr[qr < 0]) + np.sum(qc[qc > 0])
        down = np.sum(qr[qr > 0]) + np.sum(-qc[qc < 0])
        if up > 0 and down > 0:
            deta_dlam = 0.5 * np.where(qc > 0, qc / up, -qc / down)
            deta_dtau = 0.5 * np.where(qr < 0, qr / up, -qr / down)
    J = np.zeros((2 * K, 2 * K))
    J[:K, :K] = np.diag(aA.sum(axis=1) + np.abs(pD).sum(axis=1) + ac) - np.outer(ac, deta_dlam)
    J[:K, K:] = aA - np.outer(ac, deta_dtau)
    J[K:, :K] = aA.T + np.outer(ar, deta_dlam)
    J[K:, K:] = np.diag(aA.sum(axis=0) + np.abs(pV).sum(axis=0) + ar) + np.outer(ar, deta_dtau)
    return J


def _sweep(prob, lam, tau):
    """One alternating GRAS pass: exact row solves, then column solves."""
    K = prob.K
    lam, tau = lam.copy(), tau.copy()
    A, D, V, c, r = prob.blocks()
    for side in ("row", "col"):
        eta = eta_closure(prob, lam, tau)
        if side == "row":
            parts = [A * _exp(_signs(A) * tau[None, :]), D, (c * _exp(-_signs(c) * eta))[:, None]]
        else:
            parts = [A.T * _exp(_signs(A.T) * lam[None, :]), V.T, (r * _exp(_signs(r) * eta))[:, None]]
        pos = sum(np.where(q > 0, q, 0).sum(axis=1) for q in parts)
        neg = sum(np.where(q < 0, -q, 0).sum(axis=1) for q in parts)
        target = lam if side == "row" else tau
        for i in range(K):
            if prob.y[i] > 0 and pos[i] > 0:
                x = (prob.y[i] + math.sqrt(prob.y[i] ** 2 + 4 * pos[i] * neg[i])) / (2 * pos[i])
                target[i] = math.log(x)
    return lam, tau


def solve(prob: BalanceProblem, cfg: SolverConfig = SolverConfig()) -> tuple[Multipliers, int]:
    """Return the multipliers and the iteration count."""
    K = prob.K
    active = prob.y > 0
    A, D, V, _, _ = prob.blocks()
    # with no final-demand or value-added cells outside phi, (lam + c, tau - c)
    # is a symmetry; pin the first active tau
    gauge = not (np.any(D[active] != 0) or np.any(V[:, active] != 0))
    free = np.concatenate([active, active])
    if gauge and active.any():
        free[K + int(np.argmax(active))] = False
    lam, tau = np.zeros(K), np.zeros(K)
    res, eta = _log_residuals(prob, lam, tau)
    best = (np.abs(res).max(), lam, tau)
    it = 0
    while it < cfg.max_iterations:
        norm = np.abs(res).max()
        if norm < cfg.residual_tol:
            return Multipliers(np.exp(lam), np.exp(tau), math.exp(eta)), it
        it += 1
        J = _jacobian(prob, lam, tau, eta)
        rows = np.concatenate([active, active])
        step = np.zeros(2 * K)
        step[free] = -np.linalg.lstsq(J[np.ix_(rows, free)], res[rows], rcond=None)[0]
        t = 1.0
        merit = np.linalg.norm(res)
        for _ in range(cfg.max_halvings + 1):
            nl, nt = lam + t * step[:K], tau + t * step[K:]
            nres, neta = _log_residuals(prob, nl, nt)
            if np.all(np.isfinite(nres)) and np.linalg.norm(nres) < merit:
                break
            t *= 0.5
        else:
            log.info("line search failed at iteration %d (residual %.3e); running %d GRAS sweeps",
                     it, norm, cfg.fallback_sweeps)
            nl, nt = lam, tau
            for _ in range(cfg.fallback_sweeps):
                nl, nt = _sweep(prob, nl, nt)
            nres, neta = _log_residuals(prob, nl, nt)
            if not np.abs(nres).max() < best[0]:
                raise SolverError(f"no progress after line search and {cfg.fallback_sweeps} sweeps",
                                  best[0], Multipliers(np.exp(best[1]), np.exp(best[2])))
        lam, tau, res, eta = nl, nt, nres, neta
        if np.abs(res).max() < best[0]:
            best = (np.abs(res).max(), lam, tau)
    if np.abs(res).max() < cfg.residual_tol:
        return Multipliers(np.exp(lam), np.exp(tau), math.exp(eta)), it
    raise SolverError(f"did not converge in {cfg.max_iterations} iterations "
                      f"(best residual {best[0]:.3e})", best[0],
                      Multipliers(np.exp(best[1]), np.exp(best[2])))


def objective(p0: np.ndarray, p: np.ndarray) -> float:
    """sum |p0| z (ln z - 1) with z = p / p0 over non-zero initial cells."""
    mask = np.isfinite(p0) & (p0 != 0)
    z = p[mask] / p0[mask]
    return float(np.sum(np.abs(p0[mask]) * z * (np.log(z) - 1.0)))


def reconstruct(prob: BalanceProblem, m: Multipliers, iterations: int = 0,
                tol: float = SolverConfig.residual_tol) -> BalancedTable:
    K, d = prob.K, prob.dims
    lam, tau, eta = np.log(m.exp_lambda), np.log(m.exp_tau), math.log(m.exp_eta)
    pA, pD, pV, pc, pr = _cells(prob, lam, tau, eta)
    p = np.zeros_like(prob.p0)
    p[:K, :K] = pA
    if prob.use_phi:
        D = np.insert(pD, d.phi_fd, pc, axis=1)
        V = np.insert(pV, d.phi_gva, pr, axis=0)
    else:
        D, V = pD, pV
    p[:K, K:] = D
    p[K:, :K] = V
    res = max_residual(prob, p)
    return BalancedTable(p, res, iterations, res < tol, objective(prob.p0, p))


def max_residual(prob: BalanceProblem, p: np.ndarray) -> float:
    K, d = prob.K, prob.dims
    rows = p[:K, :].sum(axis=1) - prob.y
    cols = p[:, :K].sum(axis=0) - prob.y
    out = max(np.abs(rows).max(), np.abs(cols).max())
    if prob.use_phi:
        out = max(out, abs(p[K + d.phi_gva, :K].sum() - p[:K, K + d.phi_fd].sum()))
    return float(out)


def balance_detailed(estimate: IOTable, gross_outputs, total: float,
                     cfg: SolverConfig = SolverConfig(), use_phi: bool = True):
    """Balance and return ``(table, BalancedTable, Multipliers)``."""
    prob = build_problem(estimate, gross_outputs, total, use_phi)
    m, it = solve(prob, cfg)
    bt = reconstruct(prob, m, it, cfg.residual_tol)
    K = prob.K
    p = bt.p * total
    table = IOTable(estimate.dims, p[:K, :K], p[:K, K:], p[K:, :K], np.asarray(gross_outputs, dtype=np.float64))
    return table, bt, m


def balance(estimate: IOTable, gross_outputs, total: float,
            cfg: SolverConfig = SolverConfig(), use_phi: bool = True) -> IOTable:
    return balance_detailed(estimate, gross_outputs, total, cfg, use_phi)[0]
