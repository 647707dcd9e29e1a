import numpy as np
import pytest

from gradlab import tensor as T
from gradlab.attack import (Adam, AttackConfig, grad_matching_loss,
                            run_attack, total_objective)
from gradlab.harness import (DatasetConfig, TemplateDataset,
                             batch_from_indices, expose_gradients)
from gradlab.imaging import gt_baseline_point
from gradlab.labels import column_sums
from gradlab.models import VictimSpec, make_victim
from gradlab.tensor import NumericsError, Tensor, backward


SMALL = VictimSpec(in_channels=1, conv_channels=4, block_channels=8,
                   num_classes=5, input_hw=8, activation="silu")
SMALL_DS = DatasetConfig(num_classes=5, size=40, image_hw=8, seed=3)


def small_scenario(seed=0, indices=(5,)):
    ds = TemplateDataset(SMALL_DS)
    net = make_victim(SMALL, seed=seed)
    batch = batch_from_indices(ds, list(indices))
    return ds, net, batch, expose_gradients(net, batch)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = Tensor(np.array([1.0, -2.0]))
        opt = Adam([p], lr=0.1)
        opt.step([Tensor(np.zeros(2))])
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_signlike(self):
        p = Tensor(np.zeros(3))
        opt = Adam([p], lr=0.01)
        g = np.array([0.5, -2.0, 1e-3])
        opt.step([Tensor(g)])
        assert np.allclose(p.data, -0.01 * np.sign(g), rtol=1e-3)

    def test_converges_on_quadratic(self):
        p = Tensor(np.array([3.0]))
        opt = Adam([p], lr=1e-2)
        for _ in range(2000):
            opt.step([Tensor(2.0 * p.data)])
        assert abs(p.data[0]) < 1e-3


class TestMatchingLoss:
    def test_closed_loop_cosine_zero(self):
        ds, net, batch, cap = small_scenario()
        x = Tensor(batch.images, requires_grad=True)
        loss = grad_matching_loss(net, x, batch.labels, cap, cost_fn="cosine")
        assert abs(loss.item()) < 1e-10

    def test_closed_loop_l2_zero(self):
        ds, net, batch, cap = small_scenario()
        x = Tensor(batch.images, requires_grad=True)
        loss = grad_matching_loss(net, x, batch.labels, cap, cost_fn="l2")
        assert abs(loss.item()) < 1e-12

    def test_antiparallel_cosine_is_two(self):
        ds, net, batch, cap = small_scenario()
        flipped = type(cap)(grads={k: -v for k, v in cap.grads.items()},
                            fc_grad=-cap.fc_grad, batch_size_hint=1)
        x = Tensor(batch.images, requires_grad=True)
        loss = grad_matching_loss(net, x, batch.labels, flipped, cost_fn="cosine")
        assert loss.item() == pytest.approx(2.0, abs=1e-10)

    def test_gradient_matches_fd(self):
        from gradlab.checks import numeric_grad
        ds, net, batch, cap = small_scenario(seed=2)
        x0 = np.full(batch.images.shape, 0.5)

        def f(arr, cost):
            x = Tensor(arr, requires_grad=True)
            return grad_matching_loss(net, x, batch.labels, cap, cost_fn=cost), x

        for cost in ("cosine", "l2"):
            loss, x = f(x0, cost)
            ana = backward(loss, [x])[x].data
            num = numeric_grad(lambda a: f(a, cost)[0].item(), x0)
            assert np.allclose(ana, num, rtol=1e-3, atol=1e-6), cost

    def test_cosine_loss_stays_in_range(self):
        rng = np.random.default_rng(0)
        ds, net, batch, cap = small_scenario(seed=4)
        for _ in range(10):
            x = Tensor(rng.uniform(size=batch.images.shape), requires_grad=True)
            val = grad_matching_loss(net, x, batch.labels, cap).item()
            assert 0.0 <= val <= 2.0

    def test_exclude_bias_changes_value(self):
        rng = np.random.default_rng(1)
        ds, net, batch, cap = small_scenario(seed=5)
        x = Tensor(rng.uniform(size=batch.images.shape), requires_grad=True)
        full = grad_matching_loss(net, x, batch.labels, cap).item()
        nobias = grad_matching_loss(net, x, batch.labels, cap, exclude_bias=True).item()
        assert full != nobias

    def test_per_layer_mode_runs(self):
        ds, net, batch, cap = small_scenario(seed=6)
        x = Tensor(batch.images, requires_grad=True)
        loss = grad_matching_loss(net, x, batch.labels, cap, per_layer=True)
        assert abs(loss.item()) < 1e-10


class TestTotalObjective:
    def test_zero_weights_reduce_to_match(self):
        ds, net, batch, cap = small_scenario(seed=7)
        cfg = AttackConfig(alpha_tv=0.0, alpha_mean=0.0, alpha_ca=0.0, seed=0)
        x = Tensor(np.full(batch.images.shape, 0.5), requires_grad=True)
        ca = gt_baseline_point(column_sums(cap.fc_grad), (8, 8))
        loss, total, parts = total_objective(net, x, batch.labels, cap, cfg,
                                             np.array([0.5]), ca)
        match = grad_matching_loss(net, Tensor(x.data, requires_grad=True),
                                   batch.labels, cap).item()
        assert total == pytest.approx(match, abs=1e-12)
        assert parts["tv"] == parts["mean"] == parts["canny"] == 0.0

    def test_constant_image_contributes_no_tv(self):
        ds, net, batch, cap = small_scenario(seed=8)
        cfg = AttackConfig(alpha_tv=1.0, alpha_mean=0.0, alpha_ca=0.0, seed=0)
        x = Tensor(np.full(batch.images.shape, 0.5), requires_grad=True)
        ca = gt_baseline_point(column_sums(cap.fc_grad), (8, 8))
        _, total, parts = total_objective(net, x, batch.labels, cap, cfg,
                                          np.array([0.5]), ca)
        assert parts["tv"] == 0.0

    def test_term_decomposition_sums(self):
        ds, net, batch, cap = small_scenario(seed=9)
        cfg = AttackConfig(seed=0)
        rng = np.random.default_rng(2)
        x = Tensor(rng.uniform(size=batch.images.shape), requires_grad=True)
        ca = gt_baseline_point(column_sums(cap.fc_grad), (8, 8))
        _, total, parts = total_objective(net, x, batch.labels, cap, cfg,
                                          np.array([0.5]), ca)
        recomposed = (parts["match"] + cfg.alpha_tv * parts["tv"] +
                      cfg.alpha_mean * parts["mean"] + cfg.alpha_ca * parts["canny"])
        assert total == pytest.approx(recomposed, abs=1e-12)


class TestRunAttack:
    def test_l2_at_truth_is_fixed_point(self):
        # zero loss and zero gradient: the first Adam step must not move
        ds, net, batch, cap = small_scenario(seed=10)
        cfg = AttackConfig(alpha_tv=0.0, alpha_mean=0.0, alpha_ca=0.0,
                           cost_fn="l2", max_iters=1, seed=0)
        x = Tensor(np.asarray(batch.images).copy(), requires_grad=True)
        loss = grad_matching_loss(net, x, batch.labels, cap, cost_fn="l2")
        grad = backward(loss, [x])[x]
        opt = Adam([x], lr=cfg.lr)
        opt.step([grad])
        assert np.allclose(x.data, batch.images, atol=1e-12)

    def test_report_structure_and_clamp(self):
        ds, net, batch, cap = small_scenario(seed=11)
        cfg = AttackConfig(max_iters=40, seed=3, record_every=10)
        report = run_attack(net, cap, sorted(batch.labels), cfg,
                            ground_truth=batch.images)
        assert report.best_image.shape == batch.images.shape
        assert report.best_image.min() >= 0.0 and report.best_image.max() <= 1.0
        assert report.metrics is not None and "psnr" in report.metrics
        assert report.trajectory[0]["iter"] == 0
        running = np.inf
        for row in report.trajectory:
            running = min(running, row["total"])
            assert row["best"] <= running + 1e-12

    def test_deterministic_replay(self):
        ds, net, batch, cap = small_scenario(seed=12)
        cfg = AttackConfig(max_iters=30, seed=5, record_every=5)
        r1 = run_attack(net, cap, sorted(batch.labels), cfg)
        r2 = run_attack(net, cap, sorted(batch.labels), cfg)
        assert r1.best_loss == r2.best_loss
        assert np.array_equal(r1.best_image, r2.best_image)
        assert r1.trajectory == r2.trajectory

    def test_restarts_keep_global_best(self):
        ds, net, batch, cap = small_scenario(seed=13)
        single = run_attack(net, cap, sorted(batch.labels),
                            AttackConfig(max_iters=25, seed=4, init="random"))
        double = run_attack(net, cap, sorted(batch.labels),
                            AttackConfig(max_iters=25, seed=4, init="random", restarts=2))
        assert double.best_loss <= single.best_loss + 1e-15

    def test_callback_invoked_on_schedule(self):
        ds, net, batch, cap = small_scenario(seed=14)
        seen = []
        run_attack(net, cap, sorted(batch.labels),
                   AttackConfig(max_iters=21, seed=0, record_every=10),
                   callback=lambda it, row: seen.append(it))
        assert seen == [0, 10, 20]

    def test_lr_decay_flag_changes_trajectory(self):
        ds, net, batch, cap = small_scenario(seed=15)
        a = run_attack(net, cap, sorted(batch.labels),
                       AttackConfig(max_iters=40, seed=1, record_every=39))
        b = run_attack(net, cap, sorted(batch.labels),
                       AttackConfig(max_iters=40, seed=1, record_every=39, lr_decay=True))
        assert a.trajectory[-1] != b.trajectory[-1]

    def test_gray_and_random_inits(self):
        ds, net, batch, cap = small_scenario(seed=16)
        gray = run_attack(net, cap, sorted(batch.labels),
                          AttackConfig(max_iters=1, seed=0))
        rand = run_attack(net, cap, sorted(batch.labels),
                          AttackConfig(max_iters=1, seed=0, init="random"))
        assert not np.array_equal(gray.best_image, rand.best_image)

    def test_soft_canny_mode_runs(self):
        ds, net, batch, cap = small_scenario(seed=17)
        report = run_attack(net, cap, sorted(batch.labels),
                            AttackConfig(max_iters=10, seed=0, canny_mode="soft"))
        assert np.isfinite(report.best_loss)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AttackConfig(alpha_tv=-1.0)
        with pytest.raises(ValueError):
            AttackConfig(cost_fn="l1")
        with pytest.raises(ValueError):
            AttackConfig(max_iters=0)
