"""Damped Gauss-Newton (Levenberg-Marquardt) with Huber reweighting"""

import dataclasses
import logging

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from . import SolverDiverged


logger = logging.getLogger(__name__)


@dataclasses.dataclass
class SolverResult:
    """Outcome of a least squares solve"""

    x: np.ndarray
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    message: str = ''

    def to_dict(self):
        return {'initial_cost': float(self.initial_cost), 'final_cost': float(self.final_cost),
                'iterations': self.iterations, 'converged': self.converged, 'message': self.message}


def huber_cost(residuals, threshold=None):
    """Sum of squared residuals, or of the Huber function when threshold is given"""
    residuals = np.abs(residuals)
    if threshold is None:
        return 0.5 * float(residuals @ residuals)
    quadratic = residuals <= threshold
    return float(0.5 * np.sum(residuals[quadratic] ** 2)
                 + np.sum(threshold * residuals[~quadratic] - 0.5 * threshold ** 2))


def huber_weights(residuals, threshold=None):
    """IRLS weights of the Huber function"""
    if threshold is None:
        return np.ones(len(residuals))
    residuals = np.abs(residuals)
    return np.where(residuals <= threshold, 1.0, threshold / np.maximum(residuals, 1e-300))


def central_difference_jacobian(fun, x, step=1e-6):
    """Numerical Jacobian of fun at x by central differences"""
    x = np.asarray(x, dtype=float)
    columns = []
    for idx in range(len(x)):
        shift = np.zeros_like(x)
        shift[idx] = step
        columns.append((np.asarray(fun(x + shift)) - np.asarray(fun(x - shift))) / (2 * step))
    return np.column_stack(columns)


class LevenbergMarquardt:
    """Levenberg-Marquardt with monotone step acceptance

    A step is accepted only if it lowers the (robust) cost; otherwise the
    damping grows tenfold and the step is retried. The problem object
    must provide residuals(x) and jacobian(x); the Jacobian may be a dense
    array or a scipy sparse matrix.

    """

    def __init__(self, max_iter=50, huber=None, damping=1e-3, damping_range=(1e-10, 1e10),
                 ftol=1e-12, xtol=1e-12, gtol=1e-10):
        self.max_iter = max_iter
        self.huber = huber
        self.damping = damping
        self.damping_range = damping_range
        self.ftol = ftol
        self.xtol = xtol
        self.gtol = gtol

    def _step(self, jacobian, residuals, damping):
        weights = huber_weights(residuals, self.huber)
        if sp.issparse(jacobian):
            weighted = sp.diags(weights) @ jacobian
            hessian = (jacobian.T @ weighted).tocsc()
            gradient = np.asarray(weighted.T @ residuals).ravel()
            diagonal = hessian.diagonal()
            scale = np.maximum(diagonal, 1e-9 * max(diagonal.max(initial=0.0), 1.0))
            return gradient, lambda lam: -spsolve((hessian + sp.diags(lam * scale)).tocsc(), gradient)
        weighted = jacobian * weights[:, None]
        hessian = jacobian.T @ weighted
        gradient = weighted.T @ residuals
        diagonal = np.diag(hessian)
        scale = np.maximum(diagonal, 1e-9 * max(diagonal.max(initial=0.0), 1.0))

        def solve(lam):
            try:
                return -np.linalg.solve(hessian + np.diag(lam * scale), gradient)
            except np.linalg.LinAlgError:
                return -np.linalg.lstsq(hessian + np.diag(lam * scale), gradient, rcond=None)[0]
        return gradient, solve

    def solve(self, problem, x0):
        """Minimize the cost of problem starting from x0"""
        x = np.array(x0, dtype=float)
        residuals = problem.residuals(x)
        cost = huber_cost(residuals, self.huber)
        if not np.isfinite(cost):
            raise SolverDiverged("initial cost is not finite")
        initial_cost = cost
        damping = self.damping
        accepted = 0
        for iteration in range(1, self.max_iter + 1):
            gradient, solve = self._step(problem.jacobian(x), residuals, damping)
            if not np.all(np.isfinite(gradient)):
                raise SolverDiverged(f"gradient is not finite at iteration {iteration}")
            if np.abs(gradient).max(initial=0.0) <= self.gtol * (1.0 + cost):
                return SolverResult(x, initial_cost, cost, iteration - 1, True, 'gradient tolerance')
            while True:
                delta = solve(damping)
                candidate = x + delta
                new_residuals = problem.residuals(candidate)
                new_cost = huber_cost(new_residuals, self.huber)
                if np.isfinite(new_cost) and new_cost < cost:
                    break
                damping *= 10.0
                if damping > self.damping_range[1]:
                    if accepted == 0 and np.abs(gradient).max() > 1e-6 * (1.0 + cost):
                        raise SolverDiverged(f"no decrease from cost {cost:.6g} at maximum damping")
                    return SolverResult(x, initial_cost, cost, iteration - 1, True, 'maximum damping')
            accepted += 1
            decrease = cost - new_cost
            x, residuals, cost = candidate, new_residuals, new_cost
            damping = max(damping / 10.0, self.damping_range[0])
            logger.debug("iteration %s: cost %.6g damping %.1e", iteration, cost, damping)
            if decrease <= self.ftol * cost or np.linalg.norm(delta) <= self.xtol * (np.linalg.norm(x) + self.xtol):
                return SolverResult(x, initial_cost, cost, iteration, True, 'converged')
        return SolverResult(x, initial_cost, cost, self.max_iter, False, 'maximum iterations')
