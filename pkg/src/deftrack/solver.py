"""Gradient-descent estimation of warp parameters.

Fixed-step descent with halving backtracking: each iteration retries the
configured step size, halving up to ten times until the cost does not
increase, which makes the recorded cost sequence non-increasing while
correspondences are held fixed. In "icp" mode the correspondence provider is
re-queried on a fixed cadence; those iterations are marked in the report and
reset the descent baseline.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import dual, kernels
from .association import projective_associate
from .costs import (
    arap_gradient,
    data_cotangent,
    quat_norm_gradient,
    total_cost,
)
from .errors import (
    ConfigurationError,
    InvalidParameterError,
    NumericsError,
    SolverError,
)
from .geometry import WarpParams

logger = logging.getLogger(__name__)

GRADIENT_ANALYTIC = "analytic"
GRADIENT_FORWARD = "forward-mode"

MAX_HALVINGS = 10
# costs below this are floating-point dust for metric scenes (< (1e-10 m)^2
# per residual); the relative-tolerance test bottoms out here
COST_FLOOR = 1e-20


@dataclass
class SolverConfig:
    step_size: float = 1e-3
    max_iterations: int = 500
    relative_tolerance: float = 1e-7
    gradient_mode: str = GRADIENT_ANALYTIC
    reassociate_every: int = 10

    def __post_init__(self):
        if self.step_size <= 0:
            raise ConfigurationError("step_size must be positive")
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be >= 1")
        if self.relative_tolerance < 0:
            raise ConfigurationError("relative_tolerance must be >= 0")
        if self.gradient_mode not in (GRADIENT_ANALYTIC, GRADIENT_FORWARD):
            raise ConfigurationError(
                f"unknown gradient mode {self.gradient_mode!r}")
        if self.reassociate_every < 1:
            raise ConfigurationError("reassociate_every must be >= 1")

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in
                      ("step_size", "max_iterations", "relative_tolerance",
                       "gradient_mode", "reassociate_every") if k in d})


@dataclass
class IterationRecord:
    iteration: int
    breakdown: object            # CostBreakdown
    step_used: float
    reassociated: bool


@dataclass
class OptimizationReport:
    records: list = field(default_factory=list)
    initial_cost: float = 0.0
    final_params: WarpParams | None = None
    converged: bool = False

    @property
    def iterations_used(self):
        return len(self.records)

    @property
    def cost_history(self):
        return [r.breakdown.total for r in self.records]

    @property
    def final_cost(self):
        return (self.records[-1].breakdown.total if self.records
                else self.initial_cost)

    @property
    def final_validity_fraction(self):
        return (self.records[-1].breakdown.validity_fraction
                if self.records else 0.0)

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                row = {"iteration": r.iteration, "step": r.step_used,
                       "reassociated": r.reassociated}
                row.update(r.breakdown.to_dict())
                fh.write(json.dumps(row) + "\n")


class FixedCorrespondenceProvider:
    """Targets built once per frame and held fixed (correspondence mode)."""

    reassociates = False

    def __init__(self, corr):
        self.corr = corr

    def associate(self, positions, normals):
        return self.corr


class ProjectiveProvider:
    """Rebuilds projective ICP correspondences from current warped surfels."""

    reassociates = True

    def __init__(self, frame, normal_map, normal_valid, intr, **gates):
        self.frame = frame
        self.normal_map = normal_map
        self.normal_valid = normal_valid
        self.intr = intr
        self.gates = gates

    def associate(self, positions, normals):
        return projective_associate(positions, normals, self.frame,
                                    self.normal_map, self.normal_valid,
                                    self.intr, **self.gates)


def gradient(model, params, corr, weights):
    """Analytic gradient of the total cost, flat layout (7 per node + 7)."""
    warped = model.warp_positions(params)
    vec = data_cotangent(corr, warped, weights.mode)
    binding = model.binding
    flat = weights.data_weight * kernels.warp_jacobian_vec(
        model.positions, binding.indices, binding.weights,
        model.graph.positions,
        np.ascontiguousarray(params.node_q),
        np.ascontiguousarray(params.node_b),
        params.global_q, params.global_b, vec)
    flat += weights.lambda_reg * (arap_gradient(model.graph, params)
                                  + quat_norm_gradient(params))
    if not np.all(np.isfinite(flat)):
        total_cost(model, params, corr, weights)  # names the offending term
        raise NumericsError("non-finite gradient with finite cost")
    return flat


def finite_diff_gradient(model, params, corr, weights, h=1e-5):
    """Central-difference gradient with correspondences held fixed."""
    if h <= 0:
        raise InvalidParameterError("finite-difference step h must be > 0")
    flat0 = params.flatten()
    n_nodes = params.n_nodes
    out = np.empty_like(flat0)
    for i in range(flat0.size):
        fp = flat0.copy()
        fp[i] += h
        fm = flat0.copy()
        fm[i] -= h
        cp, _ = total_cost(model, WarpParams.from_flat(fp, n_nodes), corr,
                           weights)
        cm, _ = total_cost(model, WarpParams.from_flat(fm, n_nodes), corr,
                           weights)
        out[i] = (cp - cm) / (2.0 * h)
    return out


def _total_cost_dual(model, flat_dual, corr, weights):
    """Objective in dual arithmetic; mirrors costs.total_cost term by term."""
    graph = model.graph
    n = graph.n_nodes
    pn_val = flat_dual.val[: 7 * n].reshape(n, 7)
    pn_dot = flat_dual.dot[: 7 * n].reshape(n, 7)
    node_q = dual.Dual(pn_val[:, :4], pn_dot[:, :4])
    node_b = dual.Dual(pn_val[:, 4:], pn_dot[:, 4:])
    gq = flat_dual[7 * n: 7 * n + 4]
    gb = flat_dual[7 * n + 4:]

    idx = model.binding.indices
    w = model.binding.weights
    g = graph.positions[idx]
    rel = model.positions[:, None, :] - g
    local = dual.rotate(node_q[idx], rel) + g + node_b[idx]
    blended = dual.dsum(local * w[:, :, None], axis=1)
    warped = dual.rotate(gq, blended) + gb

    valid = corr.valid
    if np.any(valid):
        diff = warped[valid] - corr.target_positions[valid]
        if weights.mode == "icp":
            along = dual.dsum(diff * corr.target_normals[valid], axis=-1)
            data = dual.dsum(along * along)
        else:
            data = dual.dsum(diff * diff)
    else:
        data = dual.Dual(0.0)

    if len(graph.edges):
        e = graph.edges
        j = np.concatenate([e[:, 0], e[:, 1]])
        k = np.concatenate([e[:, 1], e[:, 0]])
        d = graph.positions[k] - graph.positions[j]
        r = (dual.rotate(node_q[j], d) + graph.positions[j] + node_b[j]
             - graph.positions[k] - node_b[k])
        arap = dual.dsum(r * r)
    else:
        arap = dual.Dual(0.0)

    qs = dual.concat([node_q, dual.Dual(gq.val[None, :], gq.dot[None, :])],
                     axis=0)
    dev = dual.dsum(qs * qs, axis=-1) - 1.0
    quat = dual.dsum(dev * dev)

    return (data * weights.data_weight
            + (arap + quat) * weights.lambda_reg)


def gradient_forward_mode(model, params, corr, weights):
    """Forward-mode gradient: one dual evaluation per parameter coordinate."""
    flat0 = params.flatten()
    out = np.empty_like(flat0)
    for i in range(flat0.size):
        seed = np.zeros_like(flat0)
        seed[i] = 1.0
        c = _total_cost_dual(model, dual.Dual(flat0, seed), corr, weights)
        out[i] = float(c.dot)
    return out


def optimize(model, provider, weights, config, initial_params=None):
    """Minimize the total cost over warp parameters.

    ``provider`` supplies correspondences: a FixedCorrespondenceProvider is
    queried once; a reassociating provider is re-queried every
    ``config.reassociate_every`` iterations from the current warped surfels.
    Returns (params, OptimizationReport). Raises SolverError (carrying the
    partial report) if the cost turns non-finite.
    """
    params = (initial_params.copy() if initial_params is not None
              else WarpParams.identity(model.graph.n_nodes))
    report = OptimizationReport()
    grad_fn = (gradient if config.gradient_mode == GRADIENT_ANALYTIC
               else gradient_forward_mode)

    corr = None
    prev_cost = None
    try:
        for it in range(config.max_iterations):
            reassociated = False
            if corr is None or (provider.reassociates
                                and it % config.reassociate_every == 0):
                warped_p, warped_n = model.warp(params)
                corr = provider.associate(warped_p, warped_n)
                prev_cost, bd = total_cost(model, params, corr, weights)
                reassociated = True
                if it == 0:
                    report.initial_cost = prev_cost

            grad = grad_fn(model, params, corr, weights)
            flat = params.flatten()

            step = config.step_size
            accepted = None
            for _ in range(MAX_HALVINGS + 1):
                trial = WarpParams.from_flat(flat - step * grad,
                                             params.n_nodes)
                try:
                    trial_cost, trial_bd = total_cost(model, trial, corr,
                                                      weights)
                except NumericsError:
                    trial_cost = np.inf
                if np.isfinite(trial_cost) and trial_cost <= prev_cost:
                    accepted = (trial, trial_cost, trial_bd, step)
                    break
                step *= 0.5

            if accepted is None:
                # no non-increasing step exists at this resolution: stop at
                # the current iterate rather than record an increase
                logger.debug("iteration %d: no improving step after %d "
                             "halvings, stopping", it, MAX_HALVINGS)
                _, bd = total_cost(model, params, corr, weights)
                report.records.append(IterationRecord(it, bd, 0.0,
                                                      reassociated))
                report.converged = True
                break

            params, cost, bd, step_used = accepted
            report.records.append(IterationRecord(it, bd, step_used,
                                                  reassociated))
            delta = prev_cost - cost
            prev_cost = cost
            if delta <= config.relative_tolerance * max(abs(cost),
                                                        COST_FLOOR):
                report.converged = True
                break
    except NumericsError as exc:
        report.final_params = params
        raise SolverError(f"optimization diverged: {exc}",
                          report=report) from exc

    report.final_params = params
    return params, report
