import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ngransac.errors import MissingGroundTruth, NonFiniteLoss
from ngransac.geometry import ModelKind
from ngransac.guidance import GuidanceNet, GuidanceNetSpec, TabularGuidance, unflatten
from ngransac.oracles import (
    NgRansacToyOracle,
    central_difference,
    relative_error,
    toy_line_example,
)
from ngransac.sampling import make_rng
from ngransac.synthdata import EpipolarSceneConfig, gen_epipolar_scene
from ngransac.training import (
    AdamState,
    EpipolarTask,
    PointLineTask,
    TrainConfig,
    adam_step,
    kl_divergence,
    kl_init_step,
    kl_target,
    line_task_loss,
    ng_dsac_gradient,
    ng_ransac_gradient,
    robust_line_loss,
    task_loss,
    train_loop,
)


@pytest.fixture(scope="module")
def toy():
    return NgRansacToyOracle(toy_line_example())


@pytest.fixture(scope="module")
def logits():
    return np.random.default_rng(1).normal(0.0, 1.0, 6)


class ConstantLossTask(PointLineTask):
    def __init__(self, value=1.0):
        super().__init__()
        self.value = value

    def loss(self, model, example, observations):
        return self.value


# ---------------------------------------------------------------- NG-RANSAC gradient
def test_identical_losses_give_zero_gradient(logits):
    ex = toy_line_example()
    g, loss = ng_ransac_gradient(ex, TabularGuidance(logits), TrainConfig(K=8, M=2, objective="line"),
                                 make_rng(0), ConstantLossTask(0.7))
    assert loss == pytest.approx(0.7)
    assert not np.any(g)


def test_enumerated_gradient_matches_finite_differences(toy, logits):
    exact = toy.expected_gradient(logits)
    fd = central_difference(toy.expected_loss, logits)
    assert relative_error(exact, fd).max() < 1e-5


def test_enumeration_covers_all_pools(toy, logits):
    # 30 ordered pairs, so 900 pools of two; their probabilities sum to one
    from ngransac.oracles import pool_logq_coefficients

    assert toy.sets.shape == (30, 2) and toy.pools.shape == (900, 2)
    q, _ = pool_logq_coefficients(toy.weights(logits), toy.sets, toy.pools)
    assert q.sum() == pytest.approx(1.0, abs=1e-12)


def test_baseline_leaves_enumerated_gradient_unchanged(toy, logits):
    plain = toy.expected_gradient(logits)
    for b in (toy.expected_loss(logits), 0.3, -2.0):
        assert np.abs(toy.expected_gradient(logits, b) - plain).max() < 1e-10


def test_monte_carlo_error_halves_at_four_times_k(toy, logits):
    exact = toy.expected_gradient(logits)
    task = PointLineTask()
    net = TabularGuidance(logits)
    rms = []
    for k in (500, 2000):
        errs = []
        for r in range(20):
            g, _ = ng_ransac_gradient(toy.example, net, TrainConfig(K=k, M=2, objective="line"),
                                      make_rng(1000 * k + r), task)
            errs.append(np.sum((g - exact) ** 2))
        rms.append(math.sqrt(np.mean(errs)))
    assert 1.5 < rms[0] / rms[1] < 2.7


def test_draw_counts_differ_from_exact_coefficient_by_a_constant(toy, logits):
    # counts and d log q / d log w differ by M times the expected counts, the same
    # vector for every pool, which the mean baseline cancels
    from ngransac.oracles import pool_logq_coefficients
    from ngransac.sampling import GuidanceDistribution, SamplerConfig, sample_pool

    w = toy.weights(logits)
    task = PointLineTask()
    offsets = []
    for seed in range(5):
        pool = sample_pool(toy.example.points, GuidanceDistribution(w), SamplerConfig(2, 2, seed),
                           task.solver, task.score_fn, make_rng(seed))
        row = toy.sample_pool_index(pool.minimal_sets)
        _, coef = pool_logq_coefficients(w, toy.sets, toy.pools[row:row + 1])
        offsets.append(pool.draw_counts - coef[0])
    np.testing.assert_allclose(offsets, np.broadcast_to(offsets[0], (5, 6)), atol=1e-14)
    np.testing.assert_allclose(offsets[0].sum(), 4.0, atol=1e-12)


# ---------------------------------------------------------------- NG-DSAC gradient
def _collinear_dsac_example(offset):
    xs = np.array([0.1, 0.35, 0.6, 0.85])
    line = np.array([0.2, -1.0, 0.4]) / math.hypot(0.2, 1.0)
    centers = np.column_stack([xs, -(line[0] * xs + line[2]) / line[1]])
    gt = line.copy()
    gt[2] += offset * -line[1]  # shifts the line vertically by offset
    spec = GuidanceNetSpec(4, 6, 1, "points_and_weights")
    net = GuidanceNet(spec, seed=2)
    p = unflatten(net.params, spec)
    p["points.w"][...] = 0.0
    p["points.b"][...] = 0.0
    p["weights.w"][...] = np.random.default_rng(3).normal(size=p["weights.w"].shape)
    feats = np.random.default_rng(4).normal(size=(4, 4))
    return SimpleNamespace(features=feats, centers=centers, gt_line=gt), net


def test_dsac_equal_losses_leave_only_direct_term():
    ex, net = _collinear_dsac_example(0.1)
    g, mean_loss = ng_dsac_gradient(ex, net, TrainConfig(K=4, M=3, objective="line"), make_rng(0))
    assert mean_loss == pytest.approx(0.1, abs=1e-12)
    views = unflatten(g, net.spec)
    scale = np.abs(g).max()
    assert scale > 0
    assert np.abs(views["weights.w"]).max() < 1e-10 * scale
    assert np.abs(views["weights.b"]).max() < 1e-10 * scale
    assert np.abs(views["points.w"]).max() > 1e-3 * scale


def test_dsac_constant_loss_gives_zero_gradient():
    # a ground-truth line far outside the image clamps every hypothesis loss
    ex, net = _collinear_dsac_example(5.0)
    g, mean_loss = ng_dsac_gradient(ex, net, TrainConfig(K=4, M=3, objective="line"), make_rng(1))
    assert mean_loss == pytest.approx(0.25, abs=1e-15)
    assert np.abs(g).max() < 1e-12


def test_dsac_needs_ground_truth():
    ex, net = _collinear_dsac_example(0.0)
    ex.gt_line = None
    with pytest.raises(MissingGroundTruth):
        ng_dsac_gradient(ex, net, TrainConfig(objective="line"), make_rng(0))


# ---------------------------------------------------------------- KL initialization
def test_kl_target_concentrates_on_zero_error():
    t = kl_target([0.0, 1e-4, 1e-2, 0.5], sigma=1e-3)
    assert t[0] == pytest.approx(1.0, abs=1e-20)
    assert t.sum() == pytest.approx(1.0, abs=1e-15)


def test_kl_zero_when_distributions_match():
    target = np.random.default_rng(0).dirichlet(np.ones(7))
    assert kl_divergence(target, target) == 0.0
    # logits whose normalized sigmoids reproduce the target
    s = 0.5 * target / target.max()
    tab = TabularGuidance(np.log(s / (1 - s)))
    fw = tab.forward()
    np.testing.assert_allclose(fw.weights, target, atol=1e-14)
    assert np.abs(tab.backward(fw.cache, -target)).max() < 1e-14


@given(st.integers(0, 10_000), st.integers(2, 30))
def test_kl_non_negative(seed, n):
    rng = np.random.default_rng(seed)
    t, w = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
    assert kl_divergence(t, w) >= -1e-12
    assert abs(kl_divergence(t, t)) <= 1e-12


def test_kl_decreases_monotonically():
    monotone = 0
    for seed in range(100):
        scene = gen_epipolar_scene(EpipolarSceneConfig(100, 0.5, 1e-3, side_info="informative", seed=seed))
        net = GuidanceNet(GuidanceNetSpec(5, 8, 1), seed=seed)
        state = AdamState.zeros_like(net.params)
        kls = []
        for _ in range(100):
            g, kl = kl_init_step(scene, net)
            kls.append(kl)
            net.params, state = adam_step(net.params, g, state, 1e-3)
        monotone += bool(np.all(np.diff(kls) < 0))
    assert monotone >= 95


def test_kl_needs_ground_truth():
    scene = gen_epipolar_scene(EpipolarSceneConfig(50, 0.5, seed=0)).unlabeled()
    with pytest.raises(MissingGroundTruth):
        kl_init_step(scene, GuidanceNet(GuidanceNetSpec(4), seed=0))


# ---------------------------------------------------------------- task losses
def test_line_loss_examples():
    gt = np.array([0.1, -1.0, 0.4]) / math.hypot(0.1, 1.0)
    assert line_task_loss(gt, gt)[0] == 0.0
    assert line_task_loss(-3 * gt, gt)[0] == pytest.approx(0.0, abs=1e-15)
    assert robust_line_loss(1.0)[0] == 0.25
    # shifted up by 0.1 everywhere
    h = gt.copy()
    h[2] -= 0.1 * -gt[1]
    assert line_task_loss(h, gt)[0] == pytest.approx(0.1, abs=1e-12)


def test_robust_loss_knee_is_verbatim():
    assert robust_line_loss(0.2499)[0] == 0.2499
    assert robust_line_loss(0.25)[0] == pytest.approx(0.125)


@given(st.floats(0, 0.2499), st.floats(0, 0.2499), st.floats(0.25, 10), st.floats(0.25, 10))
def test_robust_loss_monotone_on_each_branch(a, b, c, d):
    a, b = sorted((a, b))
    c, d = sorted((c, d))
    assert robust_line_loss(a)[0] <= robust_line_loss(b)[0]
    assert robust_line_loss(c)[0] <= robust_line_loss(d)[0]


def test_line_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    gt = np.array([0.1, -1.0, 0.4]) / math.hypot(0.1, 1.0)
    checked = 0
    for _ in range(200):
        h = gt + rng.normal(0, 0.05, 3)
        raw = max(abs(-(h[0] * x + h[2]) / h[1] + (gt[0] * x + gt[2]) / gt[1]) for x in (0, 1))
        if abs(raw - 0.25) < 0.01 or raw > 0.99:
            continue
        fd = central_difference(lambda z: line_task_loss(z, gt)[0], h, 1e-7)
        assert relative_error(line_task_loss(h, gt)[1], fd, 1e-6).max() < 1e-4
        checked += 1
    assert checked > 100


def test_line_loss_clamped_has_zero_gradient():
    gt = np.array([0.0, -1.0, 0.5])
    value, grad = line_task_loss(np.array([0.0, -1.0, 3.0]), gt)
    assert value == 0.25 and not np.any(grad)


def test_inlier_objective_counts():
    scene = gen_epipolar_scene(EpipolarSceneConfig(100, 0.5, 0.0, seed=2))
    v = task_loss(scene.gt_essential, "inliers", observations=scene.corrs, tau=1e-3)
    labeled = np.count_nonzero(scene.labels)
    assert v.value <= -labeled and v.kind == "inliers"
    assert labeled == 50
    # normalized variant divides by the set size
    vn = task_loss(scene.gt_essential, "inliers", observations=scene.corrs, tau=1e-3, normalize=True)
    assert vn.value == v.value / 100


def test_inlier_objective_exact_fifty():
    scene = gen_epipolar_scene(EpipolarSceneConfig(50, 0.0, 0.0, seed=3))
    assert task_loss(scene.gt_essential, "inliers", observations=scene.corrs, tau=1e-3).value == -50


def test_supervised_objectives_need_ground_truth():
    scene = gen_epipolar_scene(EpipolarSceneConfig(50, 0.0, 0.0, seed=3))
    with pytest.raises(MissingGroundTruth):
        task_loss(scene.gt_essential, "pose", observations=scene.corrs, tau=1e-3)
    with pytest.raises(MissingGroundTruth):
        task_loss(scene.gt_essential, "fscore", observations=scene.corrs, tau=1e-3)
    with pytest.raises(MissingGroundTruth):
        task_loss(np.zeros(3), "line")


def test_pose_objective_zero_at_truth():
    scene = gen_epipolar_scene(EpipolarSceneConfig(100, 0.2, 0.0, seed=4))
    v = task_loss(scene.gt_essential, "pose", observations=scene.corrs, gt_pose=scene.gt_pose, tau=1e-3)
    assert v.value < 1e-6


# ---------------------------------------------------------------- optimizer
@given(st.integers(0, 1000), st.integers(0, 50))
def test_adam_zero_gradient_is_identity(seed, t):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=5)
    state = AdamState(np.zeros(5), rng.uniform(0, 1, 5), t)
    new, _ = adam_step(p, np.zeros(5), state, 0.1)
    np.testing.assert_array_equal(new, p)


def test_adam_first_step_is_signed_learning_rate():
    g = np.array([3.0, -0.5, 1e3])
    p, _ = adam_step(np.zeros(3), g, AdamState.zeros_like(np.zeros(3)), 1e-2)
    assert np.abs(p + 1e-2 * np.sign(g)).max() < 1e-6 * 1e-2 * 10


def test_adam_constant_gradient_step_tends_to_lr():
    p = np.zeros(2)
    state = AdamState.zeros_like(p)
    for _ in range(5000):
        prev = p
        p, state = adam_step(p, np.array([2.0, -0.1]), state, 1e-3)
    np.testing.assert_allclose(np.abs(p - prev), 1e-3, rtol=1e-6)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(np.zeros(3), np.zeros(2), AdamState.zeros_like(np.zeros(3)), 0.1)


# ---------------------------------------------------------------- loop
def _toy_dataset(n=4):
    out = []
    for seed in range(n):
        ex = toy_line_example(seed)
        ex.points = np.vstack([ex.points, np.random.default_rng(seed).uniform(0, 1, (4, 2))])
        out.append(ex)
    return out


def _loop(lr, seed=0, task=None):
    net = GuidanceNet(GuidanceNetSpec(2, 4, 1), seed=1)
    unflatten(net.params, net.spec)["weights.w"][...] = 0.3
    start = net.params.copy()
    cfg = TrainConfig(K=2, M=4, learning_rate=lr, batch_size=2, iterations=3, objective="pose", seed=seed)
    net, recs = train_loop(_toy_dataset(), net, cfg, task=task or PointLineTask())
    return start, net, recs


def test_zero_learning_rate_keeps_params_bitwise():
    start, net, recs = _loop(0.0)
    assert net.params.tobytes() == start.tobytes()
    assert len(recs) == 3


def test_loop_is_deterministic():
    _, a, ra = _loop(1e-2, seed=5)
    _, b, rb = _loop(1e-2, seed=5)
    assert [r.loss for r in ra] == [r.loss for r in rb]
    assert a.params.tobytes() == b.params.tobytes()


def test_callbacks_see_every_record():
    seen = []
    net = GuidanceNet(GuidanceNetSpec(2, 4, 1), seed=1)
    cfg = TrainConfig(K=2, M=4, batch_size=1, iterations=2, objective="pose")
    train_loop(_toy_dataset(1), net, cfg, callbacks=[seen.append], task=PointLineTask())
    assert [r.iteration for r in seen] == [0, 1]
    assert all(r.phase == "expected" and r.seconds >= 0 for r in seen)


def test_nonfinite_losses_are_skipped_then_abort():
    with pytest.raises(NonFiniteLoss):
        net = GuidanceNet(GuidanceNetSpec(2, 4, 1), seed=1)
        cfg = TrainConfig(K=2, M=4, batch_size=4, iterations=30, objective="pose", max_nonfinite=100)
        train_loop(_toy_dataset(), net, cfg, task=ConstantLossTask(math.nan))
    net = GuidanceNet(GuidanceNetSpec(2, 4, 1), seed=1)
    cfg = TrainConfig(K=2, M=4, batch_size=4, iterations=2, objective="pose", max_nonfinite=100)
    _, recs = train_loop(_toy_dataset(), net, cfg, task=ConstantLossTask(math.nan))
    assert [r.skipped for r in recs] == [4, 4]


def test_kl_phase_records():
    scenes = [gen_epipolar_scene(EpipolarSceneConfig(60, 0.5, side_info="informative", seed=s)) for s in range(3)]
    net = GuidanceNet(GuidanceNetSpec(5, 4, 1), seed=0)
    cfg = TrainConfig(K=1, M=2, batch_size=2, iterations=0, kl_iterations=5, kl_learning_rate=1e-2)
    _, recs = train_loop(scenes, net, cfg)
    assert [r.phase for r in recs] == ["kl"] * 5
    assert recs[-1].kl < recs[0].kl


def test_self_supervised_rejects_kl_and_strips_labels():
    scenes = [gen_epipolar_scene(EpipolarSceneConfig(60, 0.3, side_info="informative", seed=s)) for s in range(2)]
    net = GuidanceNet(GuidanceNetSpec(5, 4, 1), seed=0)
    with pytest.raises(ValueError):
        train_loop(scenes, net, TrainConfig(objective="inliers", kl_iterations=1))

    class Guarded(EpipolarTask):
        def loss(self, model, scene, observations):
            assert scene.labels is None and scene.gt_essential is None and scene.gt_pose is None
            return super().loss(model, scene, observations)

    cfg = TrainConfig(K=2, M=2, batch_size=2, iterations=2, objective="inliers")
    train_loop(scenes, net, cfg, task=Guarded(objective="inliers"))


def test_empty_dataset():
    with pytest.raises(ValueError):
        train_loop([], GuidanceNet(GuidanceNetSpec(2), seed=0), TrainConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(K=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(objective="nope")
    with pytest.raises(ValueError):
        TrainConfig(baseline="moving")
    assert TrainConfig(learning_rate=0.0).learning_rate == 0.0


def test_epipolar_task_validation():
    with pytest.raises(ValueError):
        EpipolarTask(ModelKind.FUNDAMENTAL, objective="pose")
    with pytest.raises(ValueError):
        EpipolarTask(objective="line")
    assert EpipolarTask(ModelKind.FUNDAMENTAL, 7, objective="fscore").solver.sample_size == 7
