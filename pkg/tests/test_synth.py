import numpy as np
import pytest
from hypothesis import given, strategies as st

from kprefine.align import eval_flow
from kprefine.optimize import SolverOptions
from kprefine.pipeline import refine_graph
from kprefine.synth import (
    SceneError, absolute_rms, apply_homography, evaluate_mma, generate_scene, homography_jacobian,
    oracle_flow_field, oracle_flows, oracle_grid, perturb_keypoints, random_homography,
    reprojection_rms, scene_graph, scene_pair_errors, synthetic_family,
)

SMALL = dict(num_views=3, image_size=(96, 96), num_keypoints=8)


def test_scene_is_deterministic():
    a = generate_scene(seed=4, **SMALL)
    b = generate_scene(seed=4, **SMALL)
    assert np.array_equal(a.homographies, b.homographies)
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a.images, b.images))
    assert np.array_equal(a.true_keypoints, b.true_keypoints)
    c = generate_scene(seed=5, **SMALL)
    assert not np.array_equal(a.true_keypoints, c.true_keypoints)


def test_identity_homographies():
    s = generate_scene(seed=1, homographies=[np.eye(3)] * 3, **SMALL)
    assert all(np.array_equal(s.images[0].pixels, im.pixels) for im in s.images)
    assert np.array_equal(s.true_keypoints[1], s.canonical_points)


def test_translation_homographies():
    hs = [np.eye(3) for _ in range(3)]
    hs[1][:2, 2] = (3.0, -2.0)
    hs[2][:2, 2] = (-1.5, 0.5)
    s = generate_scene(seed=1, homographies=hs, **SMALL)
    assert np.allclose(s.true_keypoints[1] - s.true_keypoints[0], [3.0, -2.0], atol=1e-12)
    assert np.allclose(s.true_keypoints[2] - s.true_keypoints[0], [-1.5, 0.5], atol=1e-12)


def test_keypoints_respect_margin():
    s = generate_scene(seed=2, margin=20.0, **SMALL)
    assert np.all(s.true_keypoints >= 20.0) and np.all(s.true_keypoints <= 95 - 20.0)
    with pytest.raises(SceneError):
        generate_scene(seed=2, num_views=2, image_size=(40, 40), num_keypoints=1, margin=30.0)


def test_rendered_views_follow_homography():
    s = generate_scene(seed=3, **SMALL)
    # a texture feature seen in view 0 reappears at H_01 of its location in view 1
    h = s.pair_homography(0, 1)
    from scipy.ndimage import map_coordinates

    ys, xs = np.mgrid[30:60, 30:60].astype(float)
    pts = np.stack([xs.ravel(), ys.ravel()], 1)
    warped = apply_homography(h, pts)
    v1 = map_coordinates(s.images[1].pixels, [warped[:, 1], warped[:, 0]], order=1)
    v0 = s.images[0].pixels[30:60, 30:60].ravel()
    assert np.corrcoef(v0, v1)[0, 1] > 0.95


@given(st.integers(0, 2 ** 31 - 1))
def test_homography_jacobian_finite_difference(seed):
    rng = np.random.default_rng(seed)
    h = random_homography(rng, (200, 200), 1.0)
    x = rng.uniform(0, 200, (4, 2))
    j = homography_jacobian(h, x)
    eps = 1e-5
    for k in range(2):
        e = np.zeros(2)
        e[k] = eps
        fd = (apply_homography(h, x + e) - apply_homography(h, x - e)) / (2 * eps)
        assert np.allclose(j[:, :, k], fd, rtol=1e-6, atol=1e-8)


def test_random_homography_zero_magnitude():
    assert np.allclose(random_homography(np.random.default_rng(0), (64, 64), 0.0), np.eye(3))


def test_oracle_grid_examples(rng):
    assert np.array_equal(oracle_grid(np.eye(3), (10.0, 20.0), (10.0, 20.0)), np.zeros((3, 3, 2)))
    h = np.eye(3)
    h[:2, 2] = (2.5, -1.0)
    g = oracle_grid(h, (10.0, 20.0), (11.0, 18.0))
    assert np.allclose(g, np.array([10 + 2.5 - 11, 20 - 1 - 18]), atol=1e-12)
    h = random_homography(rng, (128, 128), 1.0)
    u0, v0 = np.array([40.0, 70.0]), np.array([43.0, 69.0])
    grid = oracle_grid(h, u0, v0)
    from kprefine.align import FlowField

    d, _ = eval_flow(FlowField(grid), (0.0, 0.0))
    assert np.array_equal(d, apply_homography(h, u0[None])[0] - v0)


def test_oracle_flows_zero_residual():
    s = generate_scene(seed=6, **SMALL)
    g = scene_graph(s, seed=0)
    flows = oracle_flows(s, g)
    x = s.true_keypoints.reshape(-1, 2) - g.initial_positions
    from kprefine.align import eval_flow_batch

    d, _ = eval_flow_batch(flows.grids, flows.spacing, x[g.src])
    r = x[g.dst] - x[g.src] - d
    assert np.abs(r).max() < 1e-9
    noisy = oracle_flows(s, g, sigma=0.3, seed=1)
    again = oracle_flows(s, g, sigma=0.3, seed=1)
    assert np.array_equal(noisy.grids, again.grids)
    assert 0.2 < np.std(noisy.grids - flows.grids) < 0.4
    field = oracle_flow_field(s, 0, g.initial_positions[0], 1, g.initial_positions[8])
    assert np.allclose(field.grid, flows.grids[0])


def test_perturbation_statistics():
    s = generate_scene(seed=0, num_views=2, image_size=(96, 96), num_keypoints=1)
    assert np.array_equal(perturb_keypoints(s, "uniform", 0.0), s.true_keypoints)
    from kprefine.synth import SyntheticScene

    big = SyntheticScene(0, s.texture, s.texture_pad, s.homographies, s.images,
                         np.zeros((5000, 2)), np.zeros((2, 5000, 2)))
    noise = perturb_keypoints(big, "uniform", 3.0, seed=9)
    rms = np.sqrt(np.mean(noise ** 2))
    assert abs(rms - 3 / np.sqrt(3)) < 0.05 * 3 / np.sqrt(3)
    assert np.array_equal(noise, perturb_keypoints(big, "uniform", 3.0, seed=9))
    g = perturb_keypoints(big, "gaussian", 0.5, seed=2)
    assert abs(np.std(g) - 0.5) < 0.02
    with pytest.raises(ValueError):
        perturb_keypoints(big, "uniform", 17.0)
    with pytest.raises(ValueError):
        perturb_keypoints(big, "laplace", 1.0)


def test_error_metrics():
    s = generate_scene(seed=1, **SMALL)
    assert absolute_rms(s, s.true_keypoints) == 0.0
    assert reprojection_rms(s, s.true_keypoints) < 1e-9
    shifted = s.true_keypoints + np.array([1.0, 0.0])
    assert absolute_rms(s, shifted) == pytest.approx(1.0)
    # a per-track rigid shift in plane coordinates costs nothing in the gauge-free metric
    from kprefine.synth import apply_homography as ap

    moved = np.stack([ap(h, s.canonical_points + [2.0, -1.0]) for h in s.homographies])
    assert reprojection_rms(s, moved) < 1e-9 < absolute_rms(s, moved)


def test_mma_examples():
    c = evaluate_mma([np.array([0.5, 3.0])], thresholds=[1.0])
    assert c.accuracy.tolist() == [0.5]
    c = evaluate_mma([np.zeros(4), np.zeros(2)])
    assert np.all(c.accuracy == 1.0) and all(v == 1.0 for v in c.auc.values())
    c = evaluate_mma([np.array([1.0]), np.array([])])
    assert c.num_pairs == 1 and c.excluded_pairs == 1
    with pytest.raises(ValueError):
        evaluate_mma([np.array([-1.0])])
    with pytest.raises(ValueError):
        evaluate_mma([np.array([1.0])], thresholds=[2.0, 1.0])


def test_mma_hand_trapezoid():
    # one pair, errors 0.5, 1.5, 4: accuracy 0 at 0, 1/3 at 1, 2/3 at 2..3, 1 from 4
    c = evaluate_mma([np.array([0.5, 1.5, 4.0])])
    assert c.accuracy.tolist() == pytest.approx([1 / 3, 2 / 3, 2 / 3, 1] + [1] * 6)
    # AUC(2): points (0,0) (1,1/3) (2,2/3): area 1/6 + 1/2 = 2/3, over 2
    assert c.auc[2.0] == pytest.approx(1 / 3, abs=1e-15)
    # AUC(5): add (3,2/3) (4,1) (5,1): 2/3 + 2/3 + 5/6 + 1 = 19/6, over 5
    assert c.auc[5.0] == pytest.approx(19 / 30, abs=1e-15)


@given(st.lists(st.lists(st.floats(0, 20), max_size=15), min_size=1, max_size=6))
def test_mma_monotone(pairs):
    c = evaluate_mma([np.array(p) for p in pairs])
    assert np.all(np.diff(c.accuracy) >= 0)
    assert np.all((c.accuracy >= 0) & (c.accuracy <= 1))


def test_scene_pair_errors():
    s = generate_scene(seed=1, **SMALL)
    errs = scene_pair_errors(s, s.true_keypoints)
    assert len(errs) == 2 and max(e.max() for e in errs) < 1e-9


def test_synthetic_family_consistent():
    fam = synthetic_family(seed=0, num_tracks=20, views=5, matches_per_track=6, sigma=0.0)
    assert fam.graph.num_nodes == 100 and fam.graph.num_edges == 240
    from kprefine.align import eval_flow_batch

    x = fam.true_offsets
    d, _ = eval_flow_batch(fam.flows.grids, fam.flows.spacing, x[fam.graph.src])
    assert np.abs(x[fam.graph.dst] - x[fam.graph.src] - d).max() < 1e-9


def test_exact_oracle_exact_initial():
    s = generate_scene(seed=7, num_views=4, image_size=(96, 96), num_keypoints=6)
    g = scene_graph(s, seed=0)
    res = refine_graph(g, oracle_flows(s, g), SolverOptions())
    assert res.final_objective < 1e-12
    assert np.abs(res.offsets).max() <= 1e-6
