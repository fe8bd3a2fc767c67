"""Particle simulation: integration, constraint projection, handles, export."""

import numpy as np
import pytest

from deftrack.errors import (
    ConfigurationError,
    DegenerateGeometryError,
    SimulationError,
)
from deftrack.io import load_mesh_obj
from deftrack.pbd import (
    DistanceConstraint,
    Handle,
    PBDState,
    ShapeMatchingConstraint,
    TriMesh,
    VolumeConstraint,
    apply_handle,
    build_state,
    export_mesh,
    project_distance,
    project_shape_matching,
    project_volume,
    run_scenario,
    signed_volume,
    step,
)

from helpers import grid_sheet, quat_rotation_matrix, axis_angle_quat

UNIT_TETRA = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
# outward-oriented faces of the unit tetrahedron
TETRA_FACES = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])


class TestStep:
    def test_free_rest_state_unchanged(self):
        state = PBDState(np.array([[0.1, 0.2, 0.3]]), np.ones(1))
        x0 = state.positions.copy()
        step(state, dt=0.01, solver_iterations=3)
        assert np.allclose(state.positions, x0)
        assert state.time == pytest.approx(0.01)

    def test_gravity_symplectic_first_step(self):
        g = np.array([0.0, -9.81, 0.0])
        state = PBDState(np.zeros((1, 3)), np.ones(1), gravity=g)
        dt = 1.0 / 30.0
        step(state, dt=dt, solver_iterations=1)
        assert np.allclose(state.positions[0], dt * dt * g, atol=1e-15)
        # damping applies to the post-step velocity
        assert np.allclose(state.velocities[0], 0.99 * dt * g, atol=1e-15)

    def test_pinned_particle_ignores_gravity(self):
        state = PBDState(np.zeros((1, 3)), np.zeros(1),
                         gravity=(0, -9.81, 0))
        for _ in range(5):
            step(state, dt=0.01)
        assert np.allclose(state.positions[0], 0.0)

    def test_validation(self):
        state = PBDState(np.zeros((1, 3)), np.ones(1))
        with pytest.raises(ConfigurationError):
            step(state, dt=0.0)
        with pytest.raises(ConfigurationError):
            step(state, dt=0.01, solver_iterations=0)

    def test_nonfinite_state_raises(self):
        state = PBDState(np.zeros((2, 3)), np.ones(2))
        state.velocities[0, 0] = np.inf
        with pytest.raises(SimulationError):
            step(state, dt=0.01)


class TestDistanceProjection:
    def test_symmetric_split(self):
        dpi, dpj, flag = project_distance([2.0, 0, 0], [0.0, 0, 0], 1.0, 1.0,
                                          rest_length=1.0, stiffness=1.0)
        assert not flag
        assert np.allclose(dpi, [-0.5, 0, 0])
        assert np.allclose(dpj, [0.5, 0, 0])
        # resulting separation is exactly the rest length
        assert np.linalg.norm(([2.0, 0, 0] + dpi) - ([0.0, 0, 0] + dpj)) \
            == pytest.approx(1.0)

    def test_pinned_endpoint_moves_other_fully(self):
        dpi, dpj, _ = project_distance([2.0, 0, 0], [0.0, 0, 0], 0.0, 1.0,
                                       rest_length=1.0, stiffness=1.0)
        assert np.allclose(dpi, 0.0)
        assert np.allclose(dpj, [1.0, 0, 0])

    def test_satisfied_constraint_zero(self):
        dpi, dpj, _ = project_distance([1.0, 0, 0], [0.0, 0, 0], 1.0, 1.0,
                                       rest_length=1.0)
        assert np.allclose(dpi, 0.0) and np.allclose(dpj, 0.0)

    def test_coincident_flagged(self):
        dpi, dpj, flag = project_distance([0.0, 0, 0], [0.0, 0, 0], 1.0, 1.0,
                                          rest_length=1.0)
        assert flag
        assert np.allclose(dpi, 0.0) and np.allclose(dpj, 0.0)

    def test_projection_never_increases_own_residual(self):
        # each constraint's residual, measured at the moment it is
        # projected, must not grow across Gauss-Seidel passes
        rng = np.random.default_rng(7)
        n = 12
        pts = rng.normal(size=(n, 3))
        w = np.ones(n)
        cons = [(i, (i + 1) % n, 0.8, float(s))
                for i, s in zip(range(n), rng.uniform(0.3, 1.0, size=n))]
        for _ in range(5):
            for i, j, rest, stiff in cons:
                before = abs(np.linalg.norm(pts[i] - pts[j]) - rest)
                dpi, dpj, _ = project_distance(pts[i], pts[j], w[i], w[j],
                                               rest, stiff)
                pts[i] += dpi
                pts[j] += dpj
                after = abs(np.linalg.norm(pts[i] - pts[j]) - rest)
                assert after <= before + 1e-12

    def test_two_particle_residual_below_tolerance_within_50_passes(self):
        state = PBDState(np.array([[0.0, 0, 0], [2.0, 0, 0]]), np.ones(2),
                         constraints=[DistanceConstraint(0, 1, 1.0, 1.0)])
        state.predicted = state.positions.copy()
        for _ in range(50):
            plan = state._projection_plan()
            for kind, payload in plan:
                idx_i, idx_j, rest, stiff = payload
                from deftrack import kernels
                kernels.distance_pass(state.predicted, state.inverse_masses,
                                      idx_i, idx_j, rest, stiff)
        sep = np.linalg.norm(state.predicted[0] - state.predicted[1])
        assert abs(sep - 1.0) < 1e-6


class TestVolumeProjection:
    def test_satisfied_zero(self):
        rest = signed_volume(UNIT_TETRA, TETRA_FACES)
        corr, flag = project_volume(UNIT_TETRA, TETRA_FACES, np.ones(4),
                                    rest, 1.0)
        assert not flag
        assert np.allclose(corr, 0.0, atol=1e-15)

    def test_scaled_tetra_monotone_restoration(self):
        rest = signed_volume(UNIT_TETRA, TETRA_FACES)
        pts = UNIT_TETRA * 1.1
        residuals = [abs(signed_volume(pts, TETRA_FACES) - rest)]
        for _ in range(30):
            corr, _ = project_volume(pts, TETRA_FACES, np.ones(4), rest, 1.0)
            pts = pts + corr
            residuals.append(abs(signed_volume(pts, TETRA_FACES) - rest))
        assert all(residuals[i + 1] <= residuals[i] + 1e-12
                   for i in range(len(residuals) - 1))
        assert residuals[-1] < 1e-6

    def test_all_pinned_zero(self):
        rest = signed_volume(UNIT_TETRA, TETRA_FACES)
        corr, _ = project_volume(UNIT_TETRA * 1.2, TETRA_FACES, np.zeros(4),
                                 rest, 1.0)
        assert np.allclose(corr, 0.0)


class TestShapeMatching:
    def _cluster(self, rng, n=8):
        rest = rng.normal(size=(n, 3))
        return rest

    def test_rigid_translation_zero_corrections(self):
        rng = np.random.default_rng(0)
        rest = self._cluster(rng)
        current = rest + np.array([0.3, -0.1, 0.2])
        corr, flag = project_shape_matching(current, rest, np.ones(8), 1.0)
        assert not flag
        assert np.allclose(corr, 0.0, atol=1e-12)

    def test_rigid_rotation_zero_corrections(self):
        # oracle: polar decomposition must exactly recover a hand-built
        # rotation, leaving goals equal to current positions
        rng = np.random.default_rng(1)
        rest = self._cluster(rng)
        rot = quat_rotation_matrix(axis_angle_quat([0.2, 1.0, -0.4], 0.8))
        current = rest @ rot.T + np.array([0.05, 0.02, -0.01])
        corr, flag = project_shape_matching(current, rest, np.ones(8), 1.0)
        assert not flag
        assert np.max(np.abs(corr)) < 1e-9

    def test_displaced_particle_centroid_preserved(self):
        rng = np.random.default_rng(2)
        rest = self._cluster(rng)
        current = rest.copy()
        current[3] += [0.05, 0.0, 0.0]
        corr, _ = project_shape_matching(current, rest, np.ones(8), 1.0)
        # displaced particle moves toward its goal (back along x)
        assert corr[3, 0] < 0
        # equal-and-opposite mass-weighted adjustments keep the centroid
        assert np.allclose(corr.mean(axis=0), 0.0, atol=1e-9)

    def test_pinned_particles_receive_no_correction(self):
        rng = np.random.default_rng(3)
        rest = self._cluster(rng)
        current = rest + rng.normal(size=(8, 3)) * 0.1
        w = np.ones(8)
        w[2] = 0.0
        corr, _ = project_shape_matching(current, rest, w, 1.0)
        assert np.allclose(corr[2], 0.0)

    def test_degenerate_cluster_flagged_identity_fallback(self):
        rest = np.stack([np.linspace(0, 1, 5), np.zeros(5),
                         np.zeros(5)], axis=1)  # collinear
        current = rest.copy()
        current[:, 1] += 1e-3  # still essentially collinear
        corr, flag = project_shape_matching(current, rest, np.ones(5), 1.0)
        assert flag
        assert np.all(np.isfinite(corr))

    def test_cluster_size_validation(self):
        with pytest.raises(ConfigurationError):
            ShapeMatchingConstraint(np.array([0, 1]), np.zeros((2, 3)))


class TestHandles:
    def test_static_target_no_motion(self):
        x0 = np.array([[0.2, 0.0, 0.5]])
        state = PBDState(x0.copy(), np.ones(1),
                         handles=[Handle(0, [0.0, 10.0],
                                         [x0[0], x0[0]])])
        for _ in range(10):
            step(state, dt=0.05)
        assert np.allclose(state.positions[0], x0[0], atol=1e-12)

    def test_linear_trajectory_tracked_exactly(self):
        a = np.zeros(3)
        b = np.array([0.1, 0.0, 0.0])
        state = PBDState(a[None, :].copy(), np.ones(1),
                         handles=[Handle(0, [0.0, 1.0], [a, b])])
        dt = 0.125
        for k in range(1, 9):
            step(state, dt=dt)
            expected = a + (b - a) * (k * dt)
            assert np.allclose(state.positions[0], expected, atol=1e-12)
        assert state.inverse_masses[0] == 0.0

    def test_release_restores_mass_and_velocity(self):
        a = np.zeros(3)
        b = np.array([0.1, 0.0, 0.0])
        state = PBDState(a[None, :].copy(), np.full(1, 2.0),
                         handles=[Handle(0, [0.0, 0.5], [a, b])])
        dt = 0.1
        for _ in range(5):  # handle active through t=0.5
            step(state, dt=dt)
        assert state.inverse_masses[0] == 0.0
        v_handled = (b - a) / 0.5
        step(state, dt=dt)  # t=0.6: released
        assert state.inverse_masses[0] == 2.0
        # free flight continues with the damped handle velocity
        assert np.allclose(state.velocities[0], 0.99 * 0.99 * v_handled,
                           rtol=1e-9)

    def test_inactive_before_start(self):
        state = PBDState(np.zeros((1, 3)), np.ones(1),
                         handles=[Handle(0, [5.0, 6.0],
                                         [[0, 0, 0], [1, 0, 0]])])
        step(state, dt=0.01)
        assert state.inverse_masses[0] == 1.0
        assert np.allclose(state.positions[0], 0.0)

    def test_apply_handle_directly(self):
        handle = Handle(0, [0.0, 1.0], [[0, 0, 0], [0.2, 0, 0]])
        state = PBDState(np.zeros((1, 3)), np.full(1, 3.0),
                         handles=[handle])
        apply_handle(state, handle, t=0.5)
        assert state.inverse_masses[0] == 0.0
        assert np.allclose(state.predicted[0], [0.1, 0, 0])
        # outside the trajectory, the saved inverse mass is restored
        apply_handle(state, handle, t=2.0)
        assert state.inverse_masses[0] == 3.0
        # a time before the window keeps it inactive (no error)
        apply_handle(state, handle, t=-1.0)
        assert state.inverse_masses[0] == 3.0


class TestPinnedInvariant:
    def test_pinned_never_moves_under_constraints(self):
        positions, tris = grid_sheet(4, 4, 0.1, 0.0)
        inv_mass = np.ones(16)
        inv_mass[0] = 0.0
        scenario = {
            "particles": [{"x": p.tolist(),
                           "inv_mass": float(inv_mass[i])}
                          for i, p in enumerate(positions)],
            "mesh": {"triangles": tris.tolist()},
            "constraints": {"distance": "auto", "shape_matching": "auto"},
            "gravity": [0, 0, -9.81],
        }
        state, _ = build_state(scenario)
        x0 = state.positions[0].copy()
        for _ in range(20):
            step(state, dt=1 / 60)
        assert np.allclose(state.positions[0], x0, atol=1e-15)


class TestExportAndScenario:
    def _tetra_state(self):
        mesh = TriMesh(np.arange(4), TETRA_FACES, UNIT_TETRA.copy())
        return PBDState(UNIT_TETRA.copy(), np.ones(4), mesh=mesh)

    def test_obj_round_trip(self, tmp_path):
        state = self._tetra_state()
        path = export_mesh(state, tmp_path / "m.obj")
        verts, faces = load_mesh_obj(path)
        assert np.allclose(verts, UNIT_TETRA, atol=1e-6)
        assert np.array_equal(faces, TETRA_FACES)

    def test_topology_constant_across_frames(self, tmp_path):
        state = self._tetra_state()
        state.gravity = np.array([0, 0, -1.0])
        export_mesh(state, tmp_path / "f0.obj")
        step(state, dt=0.1)
        export_mesh(state, tmp_path / "f1.obj")
        v0, f0 = load_mesh_obj(tmp_path / "f0.obj")
        v1, f1 = load_mesh_obj(tmp_path / "f1.obj")
        assert np.array_equal(f0, f1)
        assert not np.allclose(v0, v1)

    def test_empty_mesh_errors(self, tmp_path):
        state = PBDState(np.zeros((1, 3)), np.ones(1))
        with pytest.raises(DegenerateGeometryError):
            export_mesh(state, tmp_path / "m.obj")

    def test_scenario_auto_constraints(self):
        positions, tris = grid_sheet(3, 3, 0.1, 0.0)
        scenario = {
            "particles": [{"x": p.tolist()} for p in positions],
            "mesh": {"triangles": tris.tolist()},
            "constraints": {"distance": "auto", "shape_matching": "auto"},
        }
        state, settings = build_state(scenario)
        n_dist = sum(isinstance(c, DistanceConstraint)
                     for c in state.constraints)
        n_shape = sum(isinstance(c, ShapeMatchingConstraint)
                      for c in state.constraints)
        # unique edges of a 3x3 two-triangle grid: 12 axis + 4 diagonals
        assert n_dist == 16
        assert n_shape == 9
        assert settings["dt"] == pytest.approx(1 / 30)

    def test_run_scenario_writes_frames(self, tmp_path):
        positions, tris = grid_sheet(3, 3, 0.05, 0.4)
        scenario = {
            "particles": [{"x": p.tolist()} for p in positions],
            "mesh": {"triangles": tris.tolist()},
            "constraints": {"distance": "auto"},
            "handles": [{"particle": 4,
                         "trajectory": [[0.0, 0.0, 0.0, 0.4],
                                        [1.0, 0.05, 0.0, 0.4]]}],
            "dt": 0.1, "steps": 5, "export_every": 1,
        }
        manifest = run_scenario(scenario, tmp_path / "sim")
        assert len(manifest["frames"]) == 6
        for fr in manifest["frames"]:
            assert (tmp_path / "sim" / fr["path"]).exists()

    def test_volume_constraint_in_scenario(self):
        scenario = {
            "particles": [{"x": p.tolist()} for p in UNIT_TETRA],
            "mesh": {"triangles": TETRA_FACES.tolist()},
            "constraints": {"distance": "auto", "volume": True},
        }
        state, _ = build_state(scenario)
        vols = [c for c in state.constraints
                if isinstance(c, VolumeConstraint)]
        assert len(vols) == 1
        assert vols[0].rest_volume == pytest.approx(
            signed_volume(UNIT_TETRA, TETRA_FACES))
