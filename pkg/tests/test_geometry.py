import numpy as np
import pytest

from taco.errors import AlreadyPerturbed, NoGroundTruth, UnknownTask
from taco.geometry import (
    GridInstance,
    TaskSpec,
    apply_map,
    make_grid_instance,
    make_task,
    perturb,
    rotation,
)
from taco.measures import Seed, marginals


def small_spec(name, **kw):
    return TaskSpec(name, n_reference=256, n_new=256, seed=Seed(0), **kw)


class TestMaps:
    def test_simple_anticorrelation(self):
        task = make_task(small_spec("simple"))
        assert np.allclose(apply_map(task, np.array([1.0, 1.0])), [-1.0, -1.0])
        assert np.allclose(apply_map(task, np.array([2.0, -3.0])), [-2.0, 3.0])

    def test_radial_warp_formula(self):
        task = make_task(small_spec("radial_warp"))
        assert np.allclose(apply_map(task, np.array([1.0, 0.0])), [1.5, 0.0])
        assert np.allclose(apply_map(task, np.array([0.0, 0.0])), [0.0, 0.0])

    def test_polar_twist_fixes_pi(self):
        task = make_task(small_spec("polar_twist"))
        out = apply_map(task, np.array([np.pi, 0.0]))
        assert np.allclose(out, [np.pi, 0.0], atol=1e-12)

    def test_polar_twist_preserves_radius(self):
        task = make_task(small_spec("polar_twist"))
        rng = np.random.default_rng(0)
        x = rng.normal(size=(20, 2)) * 3
        out = apply_map(task, x)
        assert np.allclose(np.linalg.norm(out, axis=1), np.linalg.norm(x, axis=1))

    def test_moon_has_no_map(self):
        task = make_task(small_spec("moon"))
        with pytest.raises(NoGroundTruth):
            apply_map(task, np.zeros(2))


class TestMakeTask:
    def test_unknown_task(self):
        with pytest.raises(UnknownTask):
            TaskSpec("nope")

    def test_deterministic(self):
        a = make_task(small_spec("medium"))
        b = make_task(small_spec("medium"))
        assert np.array_equal(a.reference_coupling.x, b.reference_coupling.x)
        assert np.array_equal(a.mu_new.points, b.mu_new.points)

    def test_seed_changes_data(self):
        a = make_task(small_spec("medium"))
        b = make_task(TaskSpec("medium", 256, 256, Seed(1)))
        assert not np.array_equal(a.mu_new.points, b.mu_new.points)

    @pytest.mark.parametrize("name", ["simple", "medium", "complex", "circle",
                                      "radial_warp", "polar_twist"])
    def test_reference_consistent_with_map(self, name):
        # y-side of the reference coupling is T(x) up to the coupling noise
        task = make_task(small_spec(name))
        if name == "circle":
            return  # reference uses the ref-circle split; checked separately
        ref = task.reference_coupling
        err = np.sqrt(np.mean(np.sum((apply_map(task, ref.x) - ref.y) ** 2, axis=1)))
        assert err < 3 * 0.15

    def test_pushforward_matches_nu(self):
        task = make_task(small_spec("simple"))
        pushed = apply_map(task, task.mu_new.points)
        # both clouds come from the same mixture; compare means coarsely
        assert np.allclose(np.sort(pushed[:, 0])[128], np.sort(task.nu_new.points[:, 0])[128], atol=1.5)

    def test_simple_new_marginals_at_corners(self):
        task = make_task(small_spec("simple"))
        pts = task.mu_new.points
        labels = pts[:, 0] > 0
        assert np.allclose(pts[labels].mean(axis=0), [10, 10], atol=0.3)
        assert np.allclose(pts[~labels].mean(axis=0), [-10, -10], atol=0.3)


class TestPerturb:
    def test_simple_shift(self):
        task = make_task(small_spec("simple"))
        pert = perturb(task)
        assert np.allclose(pert.nu_new.points, task.nu_new.points + 2.0)
        assert pert.ground_truth_map is None
        assert pert.spec.perturbed

    def test_rotation_about_centroid(self):
        task = make_task(small_spec("medium"))
        pert = perturb(task)
        pts = task.nu_new.points
        centroid = pts.mean(axis=0)
        expect = (pts - centroid) @ rotation(10.0).T + centroid
        assert np.allclose(pert.nu_new.points, expect)

    def test_rotation_matrix_oracle(self):
        # unit vector about the origin -> (cos10, sin10)
        R = rotation(10.0)
        out = np.array([1.0, 0.0]) @ R.T
        assert np.allclose(out, [0.9848, 0.1736], atol=5e-4)

    def test_double_perturb_rejected(self):
        task = make_task(small_spec("simple", perturbed=True))
        with pytest.raises(AlreadyPerturbed):
            perturb(task)

    def test_perturbation_moves_nu(self):
        task = make_task(small_spec("complex"))
        pert = perturb(task)
        assert np.max(np.abs(pert.nu_new.points - task.nu_new.points)) > 0.1


class TestGrid1D:
    def test_reference_plan_is_eot_of_its_marginals(self):
        # FOC: log plan minus separable part is -C/eps plus a constant
        task = make_task(small_spec("gaussian_1d_grid"))
        plan = task.reference_coupling
        P = plan.weights
        mu, nu = marginals(plan)
        resid = np.log(P) + task.cost_fn(plan.x, plan.y) / task.epsilon
        # residual should be separable: phi(x) + psi(y) + const exactly
        r = resid - resid.mean(axis=1, keepdims=True) - resid.mean(axis=0, keepdims=True) + resid.mean()
        assert np.max(np.abs(r)) < 1e-9

    def test_strictly_positive(self):
        task = make_task(small_spec("gaussian_1d_grid"))
        assert np.all(task.reference_coupling.weights > 0)
        assert np.all(task.mu_new.weights > 0)

    def test_resolution_override(self):
        task = make_task(small_spec("gaussian_1d_grid"), grid_resolution=48)
        assert task.mu_new.resolution == 48

    def test_no_perturbed_variant(self):
        task = make_task(small_spec("gaussian_1d_grid"))
        with pytest.raises(UnknownTask):
            perturb(task)


class TestGridInstance:
    def test_simple_instance_shapes(self):
        inst = make_grid_instance("simple", resolution=12)
        assert isinstance(inst, GridInstance)
        n = 12 * 12
        assert inst.reference_plan.weights.shape == (n, n)
        assert np.all(inst.reference_plan.weights > 0)
        assert np.all(inst.mu_new.weights > 0)

    def test_reference_marginals_consistent(self):
        inst = make_grid_instance("simple", resolution=12)
        mx, my = marginals(inst.reference_plan)
        assert np.allclose(mx.weights, inst.mu_ref.weights)
        assert np.allclose(my.weights, inst.nu_ref.weights)

    def test_reference_supported_near_origin(self):
        inst = make_grid_instance("simple", resolution=16)
        mx, _ = marginals(inst.reference_plan)
        mean = (mx.points * mx.weights[:, None]).sum(axis=0)
        assert np.linalg.norm(mean) < 1.0

    def test_unknown(self):
        with pytest.raises(UnknownTask):
            make_grid_instance("moon")
