import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse
from scipy.sparse import linalg as spla

from constants import *
from exceptions import RetrievabilityError

logger = logging.getLogger(__name__)


@dataclass
class WlsSolution:
    means: np.ndarray  # NaN where the variable is not retrievable
    covariance: np.ndarray  # full size; NaN rows/columns outside the retrievable set
    retrievable_mask: np.ndarray
    residual: float  # sum of squared, variance-weighted residuals / 2 at the solution
    line_ids: list = field(default_factory=list)

    @property
    def variances(self):
        return np.diag(self.covariance).copy()


@dataclass
class _NormalSolve:
    """Pseudo-inverse solve of the precision matrix with its null space."""
    solution: np.ndarray
    inverse: np.ndarray
    null_basis: np.ndarray  # columns span the unconstrained directions


class WlsManager:
    def __init__(self, grid_manager):
        self.grid_manager = grid_manager

    def measurement_matrix(self, graph):
        """Sparse factors x lines matrix of the linear measurement functions."""
        return sparse.csr_matrix((graph.edge_sign, (graph.edge_fac, graph.edge_var)),
                                 shape=(graph.n_factors, graph.n_variables))

    def _weights(self, graph):
        finite = np.isfinite(graph.fac_var)
        weights = np.zeros(graph.n_factors)
        weights[finite] = 1.0 / graph.fac_var[finite]
        readings = np.where(finite, graph.fac_z, 0.0)
        return weights, readings

    def precision_matrix(self, graph):
        H = self.measurement_matrix(graph)
        weights, _ = self._weights(graph)
        return (H.T @ sparse.diags(weights) @ H).tocsc()

    def _solve(self, A, b):
        n = A.shape[0]
        if n >= DENSE_SOLVER_LIMIT:
            solved = self._solve_sparse(A, b)
            if solved is not None:
                return solved
            logger.debug("Sparse factorization of %d x %d system is singular; using eigendecomposition", n, n)
        return self._solve_dense(A.toarray() if sparse.issparse(A) else A, b)

    def _solve_dense(self, A, b):
        eigenvalues, eigenvectors = linalg.eigh(A)
        largest = np.max(np.abs(eigenvalues)) if eigenvalues.size else 0.0
        kept = eigenvalues > RANK_THRESHOLD * largest if largest > 0 else np.zeros(eigenvalues.shape, dtype=bool)
        basis = eigenvectors[:, kept]
        inverse = (basis / eigenvalues[kept]) @ basis.T
        return _NormalSolve(solution=inverse @ b, inverse=inverse, null_basis=eigenvectors[:, ~kept])

    def _solve_sparse(self, A, b):
        try:
            factor = spla.splu(sparse.csc_matrix(A))
        except RuntimeError:
            return None
        pivots = np.abs(factor.U.diagonal())
        if pivots.size == 0 or pivots.min() <= RANK_THRESHOLD * pivots.max():
            return None
        inverse = factor.solve(np.eye(A.shape[0]))
        return _NormalSolve(solution=factor.solve(b), inverse=inverse,
                            null_basis=np.zeros((A.shape[0], 0)))

    def _retrievable_rows(self, rows, null_basis):
        """Rows of a (linear) read-out that are orthogonal to the null space."""
        if null_basis.shape[1] == 0:
            return np.ones(rows.shape[0], dtype=bool)
        leakage = np.linalg.norm(rows @ null_basis, axis=1)
        scale = np.maximum(np.linalg.norm(rows, axis=1), 1.0)
        return leakage < NULLSPACE_TOLERANCE * scale

    def wls_flows(self, graph):
        """Weighted least squares over the flow variables of the factor graph."""
        n = graph.n_variables
        weights, readings = self._weights(graph)
        if not np.any(weights > 0):
            logger.info("No finite-variance measurement; nothing is retrievable")
            return WlsSolution(means=np.full(n, np.nan), covariance=np.full((n, n), np.nan),
                               retrievable_mask=np.zeros(n, dtype=bool), residual=0.0, line_ids=list(graph.line_ids))

        H = self.measurement_matrix(graph)
        b = H.T @ (weights * readings)
        solved = self._solve(self.precision_matrix(graph), b)
        mask = self._retrievable_rows(np.eye(n), solved.null_basis)

        means = np.where(mask, solved.solution, np.nan)
        covariance = np.where(np.outer(mask, mask), solved.inverse, np.nan)
        return WlsSolution(means=means, covariance=covariance, retrievable_mask=mask,
                           residual=self.objective(graph, solved.solution), line_ids=list(graph.line_ids))

    def wls_angles(self, case, meas):
        """Least squares with bus angles as the state; returns the implied line flows.

        The lowest-numbered bus of each connected component is the angle reference.
        """
        grid_manager = self.grid_manager
        n_lines = case.n_lines
        coefficient = case.base_mva * case.susceptances
        rows = np.concatenate([np.arange(n_lines), np.arange(n_lines)])
        columns = np.concatenate([case.from_index, case.to_index])
        T = sparse.csr_matrix((np.concatenate([coefficient, -coefficient]), (rows, columns)),
                              shape=(n_lines, case.n_buses))

        slack = [case.bus_index[component[0]] for component in grid_manager.components(case)]
        free = np.setdiff1d(np.arange(case.n_buses), slack)
        T = T[:, free]
        H = sparse.vstack([T, grid_manager.incidence_matrix(case) @ T]).tocsr()

        variances = np.array([_variance(meas.flow.get(line_id)) for line_id in case.line_ids] +
                             [_variance(meas.injection.get(bus_id)) for bus_id in case.bus_ids])
        readings = np.array([_reading(meas.flow.get(line_id)) for line_id in case.line_ids] +
                            [_reading(meas.injection.get(bus_id)) for bus_id in case.bus_ids])
        finite = np.isfinite(variances)
        weights = np.zeros(variances.shape)
        weights[finite] = 1.0 / variances[finite]
        readings = np.where(finite, readings, 0.0)

        A = (H.T @ sparse.diags(weights) @ H).tocsc()
        b = H.T @ (weights * readings)
        solved = self._solve(A, b)

        T_dense = T.toarray()
        mask = self._retrievable_rows(T_dense, solved.null_basis)
        flows = T_dense @ solved.solution
        covariance = T_dense @ solved.inverse @ T_dense.T
        residual = 0.5 * float(np.sum(weights * (H @ solved.solution - readings) ** 2))
        return WlsSolution(means=np.where(mask, flows, np.nan),
                           covariance=np.where(np.outer(mask, mask), covariance, np.nan),
                           retrievable_mask=mask, residual=residual, line_ids=list(case.line_ids))

    def exact_covariance(self, graph, subset):
        """Posterior covariance of the listed lines; depends on the variances only, never on z."""
        n = graph.n_variables
        solved = self._solve(self.precision_matrix(graph), np.zeros(n))
        mask = self._retrievable_rows(np.eye(n), solved.null_basis)
        positions = []
        for line_id in subset:
            position = graph.var_index[line_id]
            if not mask[position]:
                raise RetrievabilityError(f"line {line_id} is not retrievable", line_id=line_id)
            positions.append(position)
        return solved.inverse[np.ix_(positions, positions)].copy()

    def objective(self, graph, x):
        """Sum over finite-variance factors of (f_a(x) - z_a)^2 / 2 sigma_a^2."""
        weights, readings = self._weights(graph)
        predicted = self.measurement_matrix(graph) @ np.asarray(x, dtype=float)
        return 0.5 * float(np.sum(weights * (predicted - readings) ** 2))

    def total_squared_error(self, means, case):
        """Sum of squared deviations of estimated flows from the DC ground truth (retrieved lines only)."""
        errors = np.asarray(means, dtype=float) - case.flows
        return float(np.nansum(errors ** 2))


def _variance(measurement):
    return np.inf if measurement is None else float(measurement.variance)


def _reading(measurement):
    return 0.0 if measurement is None else float(measurement.z)
