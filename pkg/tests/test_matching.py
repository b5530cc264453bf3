"""Statistics, discrepancies, inner trajectories and the objective."""
import numpy as np
import pytest

from iwd import autodiff as ad
from iwd import data as dt
from iwd import matching as mt
from iwd import models as md
from iwd.errors import ContractError

from test_autodiff import max_rel_err

ARCH = md.ArchDescriptor(kind="mlp", input_dim=2, classes=2, hidden=(8,))
LINEAR = md.ArchDescriptor(kind="linear", input_dim=2, classes=2)
GRAD_GLOBAL = mt.StatisticKind("gradient", layerwise=False, per_class=False)
GRAD_LAYER = mt.StatisticKind("gradient", layerwise=True, per_class=False)
GRAD_CLASS = mt.StatisticKind("gradient")
FEAT = mt.StatisticKind("feature-mean")
PRED = mt.StatisticKind("prediction-loss")
COS = mt.DiscrepancyKind("layer-cosine")
L2 = mt.DiscrepancyKind("squared-l2")


def grouped_dataset(n_per_class=4, seed=0):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.standard_normal((n_per_class, 2)) - 1,
                        rng.standard_normal((n_per_class, 2)) + 1])
    y = np.repeat([0, 1], n_per_class)
    return dt.WeightedDataset(x, y, dt.uniform_weights(2 * n_per_class), 2)


def make_cfg(**kw):
    defaults = dict(arch=ARCH, s_inner="S", steps=1,
                    inner_sgd=md.SgdConfig(lr=0.05), init=md.InitDistribution(),
                    init_samples=1)
    defaults.update(kw)
    return mt.TrajectoryConfig(**defaults)


def test_stat_real_uniform_equals_mean_gradient():
    ds = grouped_dataset()
    m = md.init_model(ARCH, md.InitDistribution(), seed=1)
    st = mt.stat_real(GRAD_GLOBAL, m, ds)
    mean_grad = ad.grad(md.make_loss(ARCH, ds.x, ds.y, dt.uniform_weights(ds.n)), m.theta)
    assert np.array_equal(st.blocks[0], mean_grad)


def test_stat_real_one_hot_weight():
    ds = grouped_dataset()
    j = 5
    w = np.zeros(ds.n)
    w[j] = 1.0
    ds_j = dt.with_weights(ds, w)
    m = md.init_model(ARCH, md.InitDistribution(), seed=2)
    st = mt.stat_real(GRAD_GLOBAL, m, ds_j)
    single = ad.grad(
        md.make_loss(ARCH, ds.x[j : j + 1], ds.y[j : j + 1], np.array([1.0])), m.theta
    )
    assert max_rel_err(st.blocks[0], single, floor=1e-14) < 1e-12


def test_stat_real_feature_mean_linear():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    ds = dt.WeightedDataset(x, np.array([0, 1]), np.array([0.5, 0.5]), 2)
    m = md.ModelState(LINEAR, np.zeros(md.param_count(LINEAR)))
    st = mt.stat_real(FEAT, m, ds)
    assert np.array_equal(st.blocks[0], np.array([0.5, 0.5]))


def test_stat_real_empty_batch():
    ds = grouped_dataset()
    m = md.init_model(ARCH, md.InitDistribution(), seed=3)
    with pytest.raises(ContractError):
        mt.stat_real(GRAD_GLOBAL, m, ds, batch=np.array([], dtype=int))


def test_stat_syn_matches_real_on_replica():
    ds = grouped_dataset(n_per_class=2)
    s = dt.SyntheticSet(ds.x, ds.y, eta=0.05, ipc=2, class_count=2)
    m = md.init_model(ARCH, md.InitDistribution(), seed=4)
    for kind in (GRAD_CLASS, GRAD_GLOBAL, FEAT, PRED):
        a = mt.stat_syn(kind, m, s)
        b = mt.stat_real(kind, m, ds)
        assert len(a.blocks) == len(b.blocks)
        for ba, bb in zip(a.blocks, b.blocks):
            assert np.array_equal(ba, bb)


def test_stat_syn_zero_model_symmetric_bias():
    v = np.array([[0.7, -0.3]])
    s = dt.SyntheticSet(
        np.concatenate([v, -v]), np.array([0, 1]), eta=0.05, ipc=1, class_count=2
    )
    m = md.ModelState(LINEAR, np.zeros(md.param_count(LINEAR)))
    st = mt.stat_syn(GRAD_LAYER, m, s)
    w_block, b_block = st.blocks
    assert np.array_equal(b_block, np.zeros(2))
    assert not np.allclose(w_block, 0.0)


def test_stat_block_shapes_consistent():
    ds = grouped_dataset()
    s = dt.init_synthetic(ds, ipc=2, mode="random-real", seed=5)
    m = md.init_model(ARCH, md.InitDistribution(), seed=6)
    for kind in (GRAD_CLASS, GRAD_GLOBAL, GRAD_LAYER, FEAT, PRED):
        a = mt.stat_syn(kind, m, s)
        b = mt.stat_real(kind, m, ds)
        assert [blk.shape for blk in a.blocks] == [blk.shape for blk in b.blocks]


def _random_stat(rng, shapes):
    return mt.Statistic(blocks=[rng.standard_normal(s) for s in shapes], step_index=0)


def test_discrepancy_identity_zero():
    rng = np.random.default_rng(7)
    a = _random_stat(rng, [(5,), (3,)])
    same = mt.Statistic(blocks=[b.copy() for b in a.blocks], step_index=0)
    assert mt.discrepancy(COS, a, same).value == 0.0
    assert mt.discrepancy(L2, a, same).value == 0.0
    pts = rng.standard_normal((4, 3))
    wts = dt.uniform_weights(4)
    pa = mt.Statistic(blocks=[], step_index=0, points=pts, point_weights=wts)
    pb = mt.Statistic(blocks=[], step_index=0, points=pts.copy(), point_weights=wts.copy())
    assert mt.discrepancy(mt.DiscrepancyKind("mmd-rbf"), pa, pb).value == 0.0


def test_discrepancy_l2_example():
    a = mt.Statistic(blocks=[np.array([1.0, 0.0])], step_index=0)
    b = mt.Statistic(blocks=[np.array([0.0, 1.0])], step_index=0)
    assert mt.discrepancy(L2, a, b).value == 2.0


def test_discrepancy_cosine_scale_invariant():
    rng = np.random.default_rng(8)
    a = _random_stat(rng, [(6,)])
    doubled = mt.Statistic(blocks=[2.0 * a.blocks[0]], step_index=0)
    assert mt.discrepancy(COS, a, doubled).value == 0.0


def test_discrepancy_zero_norm_flagged():
    a = mt.Statistic(blocks=[np.zeros(3), np.array([1.0, 2.0])], step_index=0)
    b = mt.Statistic(blocks=[np.array([1.0, 1.0, 1.0]), np.array([1.0, 2.0])], step_index=0)
    res = mt.discrepancy(COS, a, b)
    assert res.zero_norm_blocks == [0]
    assert res.value == 0.0  # surviving block is identical


def test_discrepancy_structure_mismatch():
    a = mt.Statistic(blocks=[np.zeros(3)], step_index=0)
    b = mt.Statistic(blocks=[np.zeros(4)], step_index=0)
    with pytest.raises(ContractError):
        mt.discrepancy(L2, a, b)


def test_discrepancy_nonneg_random():
    rng = np.random.default_rng(9)
    for _ in range(100):
        a = _random_stat(rng, [(4,), (2,)])
        b = _random_stat(rng, [(4,), (2,)])
        assert mt.discrepancy(COS, a, b).value >= -1e-12
        assert mt.discrepancy(L2, a, b).value >= 0.0
        pa = mt.Statistic([], 0, points=rng.standard_normal((3, 2)), point_weights=dt.uniform_weights(3))
        pb = mt.Statistic([], 0, points=rng.standard_normal((5, 2)), point_weights=dt.uniform_weights(5))
        assert mt.discrepancy(mt.DiscrepancyKind("mmd-rbf"), pa, pb).value >= -1e-12


@pytest.mark.parametrize("kind", [COS, L2])
def test_discrepancy_grads_match_fd(kind):
    rng = np.random.default_rng(10)
    shapes = [(4,), (3,)]
    a = _random_stat(rng, shapes)
    b = _random_stat(rng, shapes)
    res = mt.discrepancy(kind, a, b)

    h = 1e-6
    for side, stat, grads in (("a", a, res.grad_first), ("b", b, res.grad_second)):
        for bi, block in enumerate(stat.blocks):
            for i in range(block.size):
                orig = block[i]
                block[i] = orig + h
                up = mt.discrepancy(kind, a, b).value
                block[i] = orig - h
                dn = mt.discrepancy(kind, a, b).value
                block[i] = orig
                fd = (up - dn) / (2 * h)
                assert max_rel_err(grads[bi][i], fd, floor=1e-7) < 1e-5


def test_mmd_grads_match_fd():
    rng = np.random.default_rng(11)
    kind = mt.DiscrepancyKind("mmd-rbf", bandwidth=1.3)
    a = mt.Statistic([], 0, points=rng.standard_normal((3, 2)), point_weights=dt.uniform_weights(3))
    b = mt.Statistic([], 0, points=rng.standard_normal((4, 2)), point_weights=dt.uniform_weights(4))
    res = mt.discrepancy(kind, a, b)
    h = 1e-6
    for stat, grad in ((a, res.grad_first[0]), (b, res.grad_second[0])):
        pts = stat.points
        for i in range(pts.shape[0]):
            for j in range(pts.shape[1]):
                orig = pts[i, j]
                pts[i, j] = orig + h
                up = mt.discrepancy(kind, a, b).value
                pts[i, j] = orig - h
                dn = mt.discrepancy(kind, a, b).value
                pts[i, j] = orig
                fd = (up - dn) / (2 * h)
                assert max_rel_err(grad[i, j], fd, floor=1e-7) < 1e-5


def test_stat_affine_in_weights():
    ds = grouped_dataset()
    m = md.init_model(ARCH, md.InitDistribution(), seed=12)
    eps = 2.0 ** -10
    j = 3
    bump = np.zeros(ds.n)
    bump[j] = eps
    base = mt.stat_real(GRAD_GLOBAL, m, ds, normalize=False)
    bumped = mt.stat_real(GRAD_GLOBAL, m, dt.with_weights(ds, ds.w + bump), normalize=False)
    phi_j = ad.grad(md.make_loss(ARCH, ds.x[j : j + 1], ds.y[j : j + 1], np.array([1.0])), m.theta)
    assert max_rel_err(bumped.blocks[0] - base.blocks[0], eps * phi_j, floor=1e-14) < 1e-10


def test_trajectory_zero_steps():
    ds = grouped_dataset()
    s = dt.init_synthetic(ds, ipc=1, mode="random-real", seed=13)
    traj = mt.run_inner_trajectory(make_cfg(steps=0), s, ds, seed=14)
    assert len(traj) == 1


def test_trajectory_zero_lr():
    ds = grouped_dataset()
    s = dt.init_synthetic(ds, ipc=1, mode="random-real", seed=15)
    cfg = make_cfg(s_inner="D", steps=3, inner_sgd=md.SgdConfig(lr=0.0))
    traj = mt.run_inner_trajectory(cfg, s, ds, seed=16)
    assert len(traj) == 4
    for state in traj[1:]:
        assert np.array_equal(state.theta, traj[0].theta)


def test_trajectory_s_vs_d_diverge():
    ds = grouped_dataset()
    s = dt.init_synthetic(ds, ipc=1, mode="noise", seed=17)
    t_s = mt.run_inner_trajectory(make_cfg(s_inner="S", steps=2), s, ds, seed=18)
    t_d = mt.run_inner_trajectory(
        make_cfg(s_inner="D", steps=2, inner_sgd=md.SgdConfig(lr=s.eta)), s, ds, seed=18
    )
    assert np.array_equal(t_s[0].theta, t_d[0].theta)
    assert not np.array_equal(t_s[1].theta, t_d[1].theta)


def test_objective_zero_on_replica():
    ds = grouped_dataset(n_per_class=2)
    s = dt.SyntheticSet(ds.x, ds.y, eta=0.05, ipc=2, class_count=2)
    for disc in (COS, L2):
        val = mt.objective(s, ds, make_cfg(steps=2), GRAD_CLASS, disc, seed=19)
        assert val == 0.0


def test_objective_single_term_at_init():
    ds = grouped_dataset()
    s = dt.init_synthetic(ds, ipc=2, mode="random-real", seed=20)
    cfg = make_cfg(steps=0)
    val = mt.objective(s, ds, cfg, GRAD_CLASS, COS, seed=21)
    state = md.init_model(ARCH, cfg.init, mt.draw_seeds(21, 1)[0])
    a = mt.stat_syn(GRAD_CLASS, state, s)
    b = mt.stat_real(GRAD_CLASS, state, ds)
    assert val == mt.discrepancy(COS, a, b).value


def test_objective_grad_matches_fd_frozen_d_trajectory():
    # the s_inner=D trajectory ignores the synthetic features, so the frozen
    # gradient is the full derivative
    ds = grouped_dataset(n_per_class=3)
    s = dt.init_synthetic(ds, ipc=1, mode="random-real", seed=22)
    cfg = make_cfg(s_inner="D", steps=2, inner_sgd=md.SgdConfig(lr=0.1))
    val, gx, geta = mt.objective_with_grad(s, ds, cfg, GRAD_CLASS, COS, seed=23)
    assert val == mt.objective(s, ds, cfg, GRAD_CLASS, COS, seed=23)
    assert geta == 0.0
    h = 1e-5
    for i in range(s.m):
        for j in range(s.d):
            xp = s.x.copy(); xp[i, j] += h
            xm = s.x.copy(); xm[i, j] -= h
            up = mt.objective(dt.SyntheticSet(xp, s.y, s.eta, s.ipc, s.class_count), ds, cfg, GRAD_CLASS, COS, seed=23)
            dn = mt.objective(dt.SyntheticSet(xm, s.y, s.eta, s.ipc, s.class_count), ds, cfg, GRAD_CLASS, COS, seed=23)
            fd = (up - dn) / (2 * h)
            assert max_rel_err(gx[i, j], fd, floor=1e-7) < 1e-4


def test_objective_grad_unrolled_matches_fd():
    ds = grouped_dataset(n_per_class=3)
    s = dt.init_synthetic(ds, ipc=1, mode="random-real", seed=24, eta0=0.05)
    cfg = make_cfg(s_inner="S", steps=2, unroll=True)
    val, gx, geta = mt.objective_with_grad(s, ds, cfg, GRAD_CLASS, L2, seed=25)
    h = 1e-5
    for i in range(s.m):
        for j in range(s.d):
            xp = s.x.copy(); xp[i, j] += h
            xm = s.x.copy(); xm[i, j] -= h
            up = mt.objective(dt.SyntheticSet(xp, s.y, s.eta, s.ipc, s.class_count), ds, cfg, GRAD_CLASS, L2, seed=25)
            dn = mt.objective(dt.SyntheticSet(xm, s.y, s.eta, s.ipc, s.class_count), ds, cfg, GRAD_CLASS, L2, seed=25)
            fd = (up - dn) / (2 * h)
            assert max_rel_err(gx[i, j], fd, floor=1e-7) < 1e-4
    up = mt.objective(dt.SyntheticSet(s.x, s.y, s.eta + h, s.ipc, s.class_count), ds, cfg, GRAD_CLASS, L2, seed=25)
    dn = mt.objective(dt.SyntheticSet(s.x, s.y, s.eta - h, s.ipc, s.class_count), ds, cfg, GRAD_CLASS, L2, seed=25)
    assert max_rel_err(geta, (up - dn) / (2 * h), floor=1e-7) < 1e-4


def test_objective_descends_under_gradient_steps():
    ds = dt.gen_two_moons(n=64, noise=0.1, seed=26)
    s = dt.init_synthetic(ds, ipc=2, mode="random-real", seed=27, eta0=0.05)
    cfg = make_cfg(steps=1)
    initial = mt.objective(s, ds, cfg, GRAD_CLASS, COS, seed=28)
    x = s.x.copy()
    lr = 0.5
    for _ in range(50):
        cur = dt.SyntheticSet(x, s.y, s.eta, s.ipc, s.class_count)
        _, gx, _ = mt.objective_with_grad(cur, ds, cfg, GRAD_CLASS, COS, seed=28)
        x = x - lr * gx
    final = mt.objective(dt.SyntheticSet(x, s.y, s.eta, s.ipc, s.class_count), ds, cfg, GRAD_CLASS, COS, seed=28)
    assert final < 0.5 * initial


def test_objective_threads_bit_identical():
    ds = grouped_dataset()
    s = dt.init_synthetic(ds, ipc=2, mode="random-real", seed=29)
    cfg = make_cfg(steps=1, init_samples=4)
    a = mt.objective(s, ds, cfg, GRAD_CLASS, COS, seed=30, threads=1)
    b = mt.objective(s, ds, cfg, GRAD_CLASS, COS, seed=30, threads=4)
    assert a == b


def test_unroll_step_cap():
    with pytest.raises(ContractError):
        make_cfg(steps=6, unroll=True)
