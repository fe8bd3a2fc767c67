"""Position-based dynamics for soft-tissue-like surfaces.

Velocities are integrated symplectically into predicted positions, handles
pin their particles to interpolated targets, and constraints are projected
with sequential Gauss-Seidel passes in a fixed order (distance blocks run
through the hot kernel; volume and shape-matching constraints are projected
per constraint). Stiffness is applied per pass without iteration-count
compensation, so effective stiffness depends on the solver iteration count.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import (
    ConfigurationError,
    DegenerateGeometryError,
    SimulationError,
)

logger = logging.getLogger(__name__)

DEFAULT_DT = 1.0 / 30.0
DEFAULT_SOLVER_ITERATIONS = 10
DEFAULT_DAMPING = 0.99


@dataclass
class Particle:
    """Scalar view of one particle's state."""

    position: np.ndarray
    predicted: np.ndarray
    velocity: np.ndarray
    inverse_mass: float


@dataclass
class TriMesh:
    """Triangulated surface over a subset of the particles.

    ``vertex_particles`` maps mesh vertices to particle indices; triangles
    index into the vertex list. Topology is fixed for a simulation's
    lifetime.
    """

    vertex_particles: np.ndarray   # (Vm,) int64
    triangles: np.ndarray          # (T, 3) int64, into vertex list
    rest_positions: np.ndarray     # (Vm, 3)

    def __post_init__(self):
        self.vertex_particles = np.asarray(self.vertex_particles,
                                           dtype=np.int64).reshape(-1)
        self.triangles = np.asarray(self.triangles,
                                    dtype=np.int64).reshape(-1, 3)
        self.rest_positions = np.asarray(self.rest_positions,
                                         dtype=np.float64).reshape(-1, 3)
        if len(self.triangles):
            if self.triangles.min() < 0 or (
                    self.triangles.max() >= len(self.vertex_particles)):
                raise ConfigurationError("triangle references unknown vertex")
            a = self.rest_positions[self.triangles[:, 0]]
            b = self.rest_positions[self.triangles[:, 1]]
            c = self.rest_positions[self.triangles[:, 2]]
            areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
            if np.any(areas < 1e-14):
                raise DegenerateGeometryError(
                    "mesh has zero-area rest triangles")

    @property
    def n_vertices(self):
        return len(self.vertex_particles)

    def vertex_positions(self, particle_positions):
        return particle_positions[self.vertex_particles]


@dataclass
class DistanceConstraint:
    i: int
    j: int
    rest_length: float
    stiffness: float = 1.0


@dataclass
class VolumeConstraint:
    triangles: np.ndarray          # (T, 3) particle indices, closed surface
    rest_volume: float
    stiffness: float = 1.0

    def __post_init__(self):
        self.triangles = np.asarray(self.triangles,
                                    dtype=np.int64).reshape(-1, 3)


@dataclass
class ShapeMatchingConstraint:
    indices: np.ndarray            # (n,) particle indices
    rest_positions: np.ndarray     # (n, 3)
    stiffness: float = 1.0

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.rest_positions = np.asarray(self.rest_positions,
                                         dtype=np.float64).reshape(-1, 3)
        if len(self.indices) < 3:
            raise ConfigurationError("shape-matching cluster needs >= 3 "
                                     "particles")


@dataclass
class Handle:
    """Kinematic grip: pins a particle to a time-stamped target trajectory."""

    particle: int
    times: np.ndarray              # (M,) seconds, ascending
    targets: np.ndarray            # (M, 3)
    _saved_inverse_mass: float | None = field(default=None, repr=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.targets = np.asarray(self.targets,
                                  dtype=np.float64).reshape(-1, 3)
        if len(self.times) != len(self.targets) or len(self.times) == 0:
            raise ConfigurationError("handle trajectory is empty or ragged")
        if np.any(np.diff(self.times) < 0):
            raise ConfigurationError("handle times must be ascending")

    def covers(self, t):
        return self.times[0] <= t <= self.times[-1]

    def target_at(self, t):
        return np.array([np.interp(t, self.times, self.targets[:, k])
                         for k in range(3)])


class PBDState:
    """Particle state, constraints, surface mesh, and active handles."""

    def __init__(self, positions, inverse_masses, constraints=None, mesh=None,
                 handles=None, velocities=None, gravity=(0.0, 0.0, 0.0),
                 damping=DEFAULT_DAMPING, time=0.0):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.inverse_masses = np.asarray(inverse_masses,
                                         dtype=np.float64).reshape(n)
        if np.any(self.inverse_masses < 0):
            raise ConfigurationError("inverse masses must be >= 0")
        self.velocities = (np.zeros((n, 3)) if velocities is None
                           else np.asarray(velocities,
                                           dtype=np.float64).reshape(n, 3))
        self.predicted = self.positions.copy()
        self.constraints = list(constraints or [])
        self.mesh = mesh
        self.handles = list(handles or [])
        for h in self.handles:
            if not (0 <= h.particle < n):
                raise ConfigurationError("handle references unknown particle")
        self.gravity = np.asarray(gravity, dtype=np.float64).reshape(3)
        self.damping = float(damping)
        self.time = float(time)
        self._plan = None
        self.degenerate_projections = 0

    @property
    def n_particles(self):
        return len(self.positions)

    def particle(self, i):
        return Particle(self.positions[i].copy(), self.predicted[i].copy(),
                        self.velocities[i].copy(),
                        float(self.inverse_masses[i]))

    def _projection_plan(self):
        """Group consecutive distance constraints for the batched kernel;
        the sequential projection order of the constraint list is preserved."""
        if self._plan is None:
            plan = []
            run = []
            for c in self.constraints:
                if isinstance(c, DistanceConstraint):
                    run.append(c)
                    continue
                if run:
                    plan.append(_distance_block(run))
                    run = []
                plan.append(("single", c))
            if run:
                plan.append(_distance_block(run))
            self._plan = plan
        return self._plan


def _distance_block(run):
    return ("distance",
            (np.array([c.i for c in run], dtype=np.int64),
             np.array([c.j for c in run], dtype=np.int64),
             np.array([c.rest_length for c in run]),
             np.array([c.stiffness for c in run])))


# ---------------------------------------------------------------------------
# constraint projections
# ---------------------------------------------------------------------------

def project_distance(p_i, p_j, w_i, w_j, rest_length, stiffness=1.0):
    """Corrections restoring the rest distance, split by inverse mass.

    Returns (dp_i, dp_j, degenerate); coincident endpoints produce zero
    corrections with the flag set.
    """
    p_i = np.asarray(p_i, dtype=np.float64)
    p_j = np.asarray(p_j, dtype=np.float64)
    wsum = w_i + w_j
    if wsum <= 0:
        return np.zeros(3), np.zeros(3), False
    d = p_i - p_j
    dist = np.linalg.norm(d)
    if dist < 1e-12:
        return np.zeros(3), np.zeros(3), True
    corr = stiffness * (dist - rest_length) / (dist * wsum) * d
    return -w_i * corr, w_j * corr, False


def signed_volume(positions, triangles):
    a = positions[triangles[:, 0]]
    b = positions[triangles[:, 1]]
    c = positions[triangles[:, 2]]
    return float(np.sum(np.cross(a, b) * c) / 6.0)


def project_volume(positions, triangles, weights, rest_volume, stiffness=1.0):
    """Corrections along the signed-volume gradient toward rest volume.

    ``triangles`` index rows of ``positions``. Returns (corrections,
    degenerate); a vanishing gradient yields zero corrections and the flag.
    """
    positions = np.asarray(positions, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    c_val = signed_volume(positions, triangles) - rest_volume
    grad = np.zeros_like(positions)
    a, b, c = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    np.add.at(grad, a, np.cross(positions[b], positions[c]) / 6.0)
    np.add.at(grad, b, np.cross(positions[c], positions[a]) / 6.0)
    np.add.at(grad, c, np.cross(positions[a], positions[b]) / 6.0)
    denom = np.sum(weights * np.sum(grad * grad, axis=1))
    if denom < 1e-18:
        return np.zeros_like(positions), True
    scale = -stiffness * c_val / denom
    return scale * weights[:, None] * grad, False


def project_shape_matching(positions, rest_positions, weights, stiffness=1.0):
    """Corrections toward the best-fit rigid placement of the rest shape.

    The rigid fit (polar-decomposed rotation plus centroid shift) uses the
    movable particles only, weighted by mass; pinned particles receive no
    correction and do not influence the fit. Returns (corrections,
    degenerate); an ill-determined rotation falls back to identity with the
    flag set.
    """
    positions = np.asarray(positions, dtype=np.float64)
    rest_positions = np.asarray(rest_positions, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    corrections = np.zeros_like(positions)
    movable = weights > 0
    if movable.sum() == 0:
        return corrections, False

    m = 1.0 / weights[movable]
    p = positions[movable]
    r = rest_positions[movable]
    total = m.sum()
    c_cur = (m[:, None] * p).sum(axis=0) / total
    c_rest = (m[:, None] * r).sum(axis=0) / total
    a_pq = (m[:, None, None] * (p - c_cur)[:, :, None]
            * (r - c_rest)[:, None, :]).sum(axis=0)

    degenerate = False
    u, s, vt = np.linalg.svd(a_pq)
    if s[1] <= 1e-12 * max(s[0], 1e-30):
        rot = np.eye(3)
        degenerate = True
    else:
        d = np.sign(np.linalg.det(u @ vt))
        rot = u @ np.diag([1.0, 1.0, d]) @ vt

    goals = (r - c_rest) @ rot.T + c_cur
    corrections[movable] = stiffness * (goals - p)
    return corrections, degenerate


def apply_handle(state, handle, t=None):
    """Pin or release one handle at time t (defaults to the state clock).

    While the trajectory covers t the particle's inverse mass is forced to
    zero and its predicted position is set to the interpolated target; once
    t leaves the trajectory the saved inverse mass is restored.
    """
    t = state.time if t is None else t
    i = handle.particle
    if handle.covers(t):
        if handle._saved_inverse_mass is None:
            handle._saved_inverse_mass = float(state.inverse_masses[i])
        state.inverse_masses[i] = 0.0
        state.predicted[i] = handle.target_at(t)
    elif handle._saved_inverse_mass is not None:
        state.inverse_masses[i] = handle._saved_inverse_mass
        handle._saved_inverse_mass = None
    return state


def step(state, dt=DEFAULT_DT, solver_iterations=DEFAULT_SOLVER_ITERATIONS):
    """Advance the simulation by one time step (mutates and returns state)."""
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    if solver_iterations < 1:
        raise ConfigurationError("solver_iterations must be >= 1")

    movable = state.inverse_masses > 0
    state.velocities[movable] += dt * state.gravity
    state.predicted = state.positions + dt * state.velocities

    t_new = state.time + dt
    for handle in state.handles:
        apply_handle(state, handle, t_new)

    plan = state._projection_plan()
    for _ in range(solver_iterations):
        for kind, payload in plan:
            if kind == "distance":
                idx_i, idx_j, rest, stiff = payload
                state.degenerate_projections += kernels.distance_pass(
                    state.predicted, state.inverse_masses, idx_i, idx_j,
                    rest, stiff)
            else:
                c = payload
                if isinstance(c, VolumeConstraint):
                    corr, flag = project_volume(
                        state.predicted, c.triangles, state.inverse_masses,
                        c.rest_volume, c.stiffness)
                    state.predicted += corr
                elif isinstance(c, ShapeMatchingConstraint):
                    corr, flag = project_shape_matching(
                        state.predicted[c.indices], c.rest_positions,
                        state.inverse_masses[c.indices], c.stiffness)
                    state.predicted[c.indices] += corr
                else:
                    raise ConfigurationError(
                        f"unknown constraint type {type(c).__name__}")
                if flag:
                    state.degenerate_projections += 1

    state.velocities = (state.predicted - state.positions) / dt
    state.positions = state.predicted.copy()
    state.velocities *= state.damping
    state.time = t_new

    if not (np.all(np.isfinite(state.positions))
            and np.all(np.isfinite(state.velocities))):
        raise SimulationError(f"non-finite particle state at t={state.time}")
    return state


def export_mesh(state, path):
    """Write the current surface as an OBJ file with a stable vertex order."""
    if state.mesh is None or state.mesh.n_vertices == 0:
        raise DegenerateGeometryError("state has no mesh to export")
    verts = state.mesh.vertex_positions(state.positions)
    path = Path(path)
    with open(path, "w") as fh:
        for v in verts:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in state.mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
    return path


# ---------------------------------------------------------------------------
# scenario files
# ---------------------------------------------------------------------------

def _mesh_edges(triangles):
    e = np.vstack([triangles[:, [0, 1]], triangles[:, [1, 2]],
                   triangles[:, [2, 0]]])
    return np.unique(np.sort(e, axis=1), axis=0)


def build_state(scenario):
    """Construct a PBDState (plus run settings) from a scenario dict.

    Constraints are created in a fixed order: the distance block, then the
    volume constraint, then shape-matching clusters. "auto" distance
    constraints cover every unique mesh edge; "auto" shape-matching builds
    one cluster per vertex from its 1-ring.
    """
    particles = scenario["particles"]
    positions = np.array([p["x"] for p in particles], dtype=np.float64)
    inv_mass = np.array([p.get("inv_mass", 1.0) for p in particles])

    mesh_spec = scenario.get("mesh") or {}
    triangles = np.asarray(mesh_spec.get("triangles", []),
                           dtype=np.int64).reshape(-1, 3)
    mesh = None
    if len(triangles):
        vertex_particles = np.arange(len(positions), dtype=np.int64)
        mesh = TriMesh(vertex_particles, triangles, positions.copy())

    cons_spec = scenario.get("constraints", {})
    constraints = []

    dist_spec = cons_spec.get("distance", "auto" if mesh else [])
    dist_stiff = float(cons_spec.get("distance_stiffness", 1.0))
    if isinstance(dist_spec, str) and dist_spec == "auto":
        if mesh is None:
            raise ConfigurationError("distance=auto requires a mesh")
        pairs = _mesh_edges(triangles)
    else:
        pairs = np.asarray(dist_spec, dtype=np.int64).reshape(-1, 2)
    for i, j in pairs:
        rest = float(np.linalg.norm(positions[i] - positions[j]))
        constraints.append(DistanceConstraint(int(i), int(j), rest,
                                              dist_stiff))

    if cons_spec.get("volume", False):
        if mesh is None:
            raise ConfigurationError("volume constraint requires a mesh")
        rest_vol = signed_volume(positions, triangles)
        constraints.append(VolumeConstraint(
            triangles, rest_vol, float(cons_spec.get("volume_stiffness",
                                                     1.0))))

    shape_spec = cons_spec.get("shape_matching", [])
    shape_stiff = float(cons_spec.get("shape_stiffness", 1.0))
    if isinstance(shape_spec, str) and shape_spec == "auto":
        if mesh is None:
            raise ConfigurationError("shape_matching=auto requires a mesh")
        rings = {i: {i} for i in range(len(positions))}
        for i, j in _mesh_edges(triangles):
            rings[int(i)].add(int(j))
            rings[int(j)].add(int(i))
        clusters = [sorted(r) for r in rings.values() if len(r) >= 3]
    else:
        clusters = [list(c) for c in shape_spec]
    for cluster in clusters:
        idx = np.asarray(cluster, dtype=np.int64)
        constraints.append(ShapeMatchingConstraint(idx, positions[idx],
                                                   shape_stiff))

    handles = [Handle(particle=int(h["particle"]),
                      times=[s[0] for s in h["trajectory"]],
                      targets=[s[1:] for s in h["trajectory"]])
               for h in scenario.get("handles", [])]

    state = PBDState(
        positions, inv_mass, constraints=constraints, mesh=mesh,
        handles=handles, gravity=scenario.get("gravity", (0.0, 0.0, 0.0)),
        damping=float(scenario.get("damping", DEFAULT_DAMPING)))
    settings = {
        "dt": float(scenario.get("dt", DEFAULT_DT)),
        "iterations": int(scenario.get("iterations",
                                       DEFAULT_SOLVER_ITERATIONS)),
        "steps": int(scenario.get("steps", 1)),
        "export_every": int(scenario.get("export_every", 1)),
    }
    return state, settings


def load_scenario(path):
    with open(path) as fh:
        return json.load(fh)


def run_scenario(scenario, out_dir):
    """Simulate a scenario and write numbered OBJ frames plus a manifest.

    Frame 0 is the rest state; afterwards one frame per ``export_every``
    steps. Returns the manifest dict.
    """
    state, settings = build_state(scenario)
    if state.mesh is None:
        raise ConfigurationError("scenario needs a mesh to export frames")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    frames = []

    def export(index):
        path = out / f"frame_{index:04d}.obj"
        export_mesh(state, path)
        frames.append({"index": index, "time": state.time,
                       "path": path.name})

    export(0)
    n_exported = 1
    for s in range(1, settings["steps"] + 1):
        step(state, settings["dt"], settings["iterations"])
        if s % settings["export_every"] == 0:
            export(n_exported)
            n_exported += 1

    manifest = {"frames": frames, "dt": settings["dt"],
                "iterations": settings["iterations"]}
    with open(out / "frames.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest
