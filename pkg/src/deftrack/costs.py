"""Objective terms for warp estimation and their analytic gradients.

The total objective is a weighted sum of one data term (point-to-plane in
"icp" mode, point-to-point in "correspondence" mode) and two regularizers:
a smoothness term on neighboring graph nodes and a soft unit-norm penalty on
every quaternion. Costs are sums over entries, not means; the default weights
are calibrated for sums.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigurationError, NumericsError
from .geometry import knn_weights_batch, warp_normals, warp_points

logger = logging.getLogger(__name__)

MODE_ICP = "icp"
MODE_CORRESPONDENCE = "correspondence"

DEFAULT_LAMBDA_ICP = 1.0
DEFAULT_LAMBDA_REG = 10.0
DEFAULT_LAMBDA_CORR = 0.001


@dataclass
class CostWeights:
    """Term weights and the active data mode."""

    lambda_icp: float = DEFAULT_LAMBDA_ICP
    lambda_reg: float = DEFAULT_LAMBDA_REG
    lambda_corr: float = DEFAULT_LAMBDA_CORR
    mode: str = MODE_ICP

    def __post_init__(self):
        if min(self.lambda_icp, self.lambda_reg, self.lambda_corr) < 0:
            raise ConfigurationError("cost weights must be >= 0")
        if self.mode not in (MODE_ICP, MODE_CORRESPONDENCE):
            raise ConfigurationError(f"unknown cost mode {self.mode!r}")

    @property
    def data_weight(self):
        return self.lambda_icp if self.mode == MODE_ICP else self.lambda_corr


@dataclass
class CostBreakdown:
    """Per-term values for one evaluation, for logging and reports."""

    total: float
    data: float
    arap: float
    quat: float
    validity_fraction: float
    n_valid: int
    no_valid_warning: bool = False

    def to_dict(self):
        return {"total": self.total, "data": self.data, "arap": self.arap,
                "quat": self.quat,
                "validity_fraction": self.validity_fraction,
                "n_valid": self.n_valid}


class WarpModel:
    """A cloud bound to a graph with fixed skinning neighborhoods.

    Neighborhoods and weights are computed once per frame (before the solve)
    and held fixed while parameters move, which keeps the objective smooth.
    """

    def __init__(self, positions, normals, graph, binding=None):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64)
        self.normals = (None if normals is None
                        else np.ascontiguousarray(normals, dtype=np.float64))
        self.graph = graph
        self.binding = binding or knn_weights_batch(self.positions, graph)

    @property
    def n_points(self):
        return len(self.positions)

    def warp_positions(self, params):
        return warp_points(self.positions, self.binding, self.graph, params)

    def warp(self, params):
        warped = self.warp_positions(params)
        if self.normals is None:
            return warped, None
        unit, _ = warp_normals(self.normals, self.binding, self.graph, params)
        return warped, unit


def icp_cost(corr, warped_positions):
    """Sum of squared point-to-plane residuals over valid entries."""
    if not np.any(corr.valid):
        logger.warning("icp cost evaluated with zero valid correspondences")
        return 0.0
    diff = warped_positions[corr.valid] - corr.target_positions[corr.valid]
    along = np.sum(corr.target_normals[corr.valid] * diff, axis=1)
    return float(np.sum(along * along))


def corr_cost(corr, warped_positions):
    """Sum of squared point-to-point residuals over valid entries."""
    if not np.any(corr.valid):
        logger.warning("correspondence cost evaluated with zero valid entries")
        return 0.0
    diff = warped_positions[corr.valid] - corr.target_positions[corr.valid]
    return float(np.sum(diff * diff))


def data_cost(corr, warped_positions, mode):
    if mode == MODE_ICP:
        if corr.kind != "icp":
            raise ConfigurationError(
                "icp mode requires plane correspondences (position + normal)")
        return icp_cost(corr, warped_positions)
    if corr.kind != "correspondence":
        raise ConfigurationError(
            "correspondence mode requires point correspondences")
    return corr_cost(corr, warped_positions)


def data_cotangent(corr, warped_positions, mode):
    """d(data cost)/d(warped position) per surfel; zero rows where invalid."""
    vec = np.zeros_like(warped_positions)
    if not np.any(corr.valid):
        return vec
    diff = warped_positions[corr.valid] - corr.target_positions[corr.valid]
    if mode == MODE_ICP:
        n_o = corr.target_normals[corr.valid]
        along = np.sum(n_o * diff, axis=1)
        vec[corr.valid] = 2.0 * along[:, None] * n_o
    else:
        vec[corr.valid] = 2.0 * diff
    return vec


def _arap_residuals(graph, params):
    """Residuals of both directions of every edge, (2E, 3)."""
    e = graph.edges
    j = np.concatenate([e[:, 0], e[:, 1]])
    k = np.concatenate([e[:, 1], e[:, 0]])
    g_j = graph.positions[j]
    g_k = graph.positions[k]
    d = g_k - g_j
    rotated = kernels.rotate_vectors(params.node_q[j], d)
    return rotated + g_j + params.node_b[j] - g_k - params.node_b[k], j, k, d


def arap_cost(graph, params):
    """Smoothness: each node's motion applied to its neighbor should land on
    that neighbor's own motion. Zero under any shared rigid motion."""
    if len(graph.edges) == 0:
        return 0.0
    r, _, _, _ = _arap_residuals(graph, params)
    return float(np.sum(r * r))


def arap_gradient(graph, params):
    """Gradient of arap_cost in flat layout (7 per node + 7 global, zeros
    for the global block)."""
    n = graph.n_nodes
    flat = np.zeros(7 * (n + 1))
    if len(graph.edges) == 0:
        return flat
    r, j, k, d = _arap_residuals(graph, params)
    gq = 2.0 * kernels.rotation_gradient_dot(params.node_q[j], d, r)
    gb = 2.0 * r
    grad_q = np.zeros((n, 4))
    grad_b = np.zeros((n, 3))
    np.add.at(grad_q, j, gq)
    np.add.at(grad_b, j, gb)
    np.add.at(grad_b, k, -gb)
    flat[: 7 * n] = np.concatenate([grad_q, grad_b], axis=1).ravel()
    return flat


def quat_norm_cost(params):
    """Soft unit-sphere penalty over every quaternion, global included."""
    qs = np.vstack([params.node_q, params.global_q[None, :]])
    dev = np.sum(qs * qs, axis=1) - 1.0
    return float(np.sum(dev * dev))


def quat_norm_gradient(params):
    n = params.n_nodes
    flat = np.zeros(7 * (n + 1))
    qs = np.vstack([params.node_q, params.global_q[None, :]])
    dev = np.sum(qs * qs, axis=1) - 1.0
    grad = 4.0 * dev[:, None] * qs
    flat[: 7 * n] = np.concatenate(
        [grad[:n], np.zeros((n, 3))], axis=1).ravel()
    flat[7 * n: 7 * n + 4] = grad[n]
    return flat


def total_cost(model, params, corr, weights, warped_positions=None):
    """Evaluate the full objective. Returns (total, CostBreakdown)."""
    if warped_positions is None:
        warped_positions = model.warp_positions(params)
    data = data_cost(corr, warped_positions, weights.mode)
    arap = arap_cost(model.graph, params)
    quat = quat_norm_cost(params)
    total = weights.data_weight * data + weights.lambda_reg * (arap + quat)
    n_valid = int(np.count_nonzero(corr.valid))
    breakdown = CostBreakdown(
        total=total, data=data, arap=arap, quat=quat,
        validity_fraction=corr.validity_fraction, n_valid=n_valid,
        no_valid_warning=(n_valid == 0))
    if not np.isfinite(total):
        term = ("data" if not np.isfinite(data)
                else "arap" if not np.isfinite(arap) else "quat")
        raise NumericsError(f"non-finite cost (term: {term})")
    return total, breakdown
