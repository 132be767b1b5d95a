import math
import os

import numpy as np
import pytest

from dashssl import dash, data, models
from dashssl.augment import AugmentPolicy
from dashssl.dash import (ALGO_DASH, ALGO_DASH_PL, ALGO_FIXMATCH, ALGO_PL,
                          GRAD_WITH_LABELED, LR_COSINE, MODE_PRACTICE,
                          MODE_THEORY, DashConfig, SelectionStats,
                          ThresholdSchedule, dash_train,
                          estimate_rho_hat_practical, load_checkpoint,
                          read_metrics_csv, rho_hat_theoretical,
                          save_checkpoint, select, threshold,
                          truncated_gradient, truncated_gradient_with_labeled,
                          warmup, write_metrics_csv)
from dashssl.errors import (CapExceededError, ConfigError, DivergenceError,
                            InfeasibleConstantsError)


def tiny_bundle(seed=0, n=120, labels=4, q=0.8, test_n=40):
    pool = data.make_two_moons(n, 0.08, seed)
    test = data.make_two_moons(test_n, 0.08, seed + 1)
    spec = data.SplitSpec(labels_per_class=labels, q=q,
                          ood_kind=data.OOD_LABEL_FLIP)
    return data.split_ssl(pool, spec, seed + 2, test=test)


def pseudo_batch(model, n, seed):
    rng = np.random.default_rng(seed)
    return [(rng.standard_normal(model.input_dim),
             models.one_hot(int(rng.integers(model.num_classes)),
                            model.num_classes))
            for _ in range(n)]


class TestThresholdSchedule:
    def test_validation(self):
        with pytest.raises(ValueError):
            ThresholdSchedule(C=1.0, gamma=1.27)
        with pytest.raises(ValueError):
            ThresholdSchedule(C=2.0, gamma=1.0)
        with pytest.raises(ValueError):
            ThresholdSchedule(C=2.0, gamma=1.27, rho_hat=0.0)
        with pytest.raises(ValueError):
            ThresholdSchedule(C=2.0, gamma=1.27, floor=-0.1)
        with pytest.raises(ValueError):
            ThresholdSchedule(C=2.0, gamma=1.27, decay_every_epochs=0)

    def test_infinite_before_activation(self):
        s = ThresholdSchedule(C=2.0, gamma=1.5, rho_hat=1.0,
                              activation_epoch=3, steps_per_epoch=4)
        assert all(math.isinf(threshold(t, s)) for t in range(1, 13))
        assert threshold(13, s) == pytest.approx(2.0)

    def test_per_step_decay(self):
        s = ThresholdSchedule(C=1.5, gamma=2.0, rho_hat=4.0)
        assert threshold(1, s) == pytest.approx(6.0)
        assert threshold(2, s) == pytest.approx(3.0)
        assert threshold(3, s) == pytest.approx(1.5)

    def test_per_epoch_decay(self):
        s = ThresholdSchedule(C=2.0, gamma=2.0, rho_hat=1.0,
                              activation_epoch=1, decay_every_epochs=2,
                              steps_per_epoch=3)
        # epochs 1-2 -> k=0; epochs 3-4 -> k=1
        assert threshold(4, s) == pytest.approx(2.0)
        assert threshold(9, s) == pytest.approx(2.0)
        assert threshold(10, s) == pytest.approx(1.0)

    def test_floor_clamp(self):
        s = ThresholdSchedule(C=1.5, gamma=2.0, rho_hat=1.0, floor=0.2)
        assert threshold(10, s) == 0.2

    def test_needs_rho_hat(self):
        s = ThresholdSchedule(C=2.0, gamma=1.5)
        with pytest.raises(ValueError):
            threshold(1, s)
        with pytest.raises(ValueError):
            threshold(0, ThresholdSchedule(C=2.0, gamma=1.5, rho_hat=1.0))


class TestSelect:
    def test_boundary_inclusive(self):
        mask = select(np.array([0.5, 0.5 + 1e-9, 0.1]), 0.5)
        assert mask.tolist() == [True, False, True]

    def test_infinite_threshold_selects_all(self):
        assert select(np.array([1e300, 0.0]), math.inf).all()


class TestTruncatedGradient:
    def test_matches_mean_over_selected(self):
        m = models.init_model(models.MLP_1HIDDEN, 3, 2, hidden=4, seed=0)
        batch = pseudo_batch(m, 8, seed=1)
        losses = np.array([models.cross_entropy(t, models.forward(m, x))
                           for x, t in batch])
        rho = float(np.median(losses))
        grad, mask, got_losses = truncated_gradient(m, batch, rho)
        assert np.allclose(got_losses, losses, atol=1e-12)
        assert mask.tolist() == (losses <= rho).tolist()
        sel = [batch[i] for i in np.flatnonzero(mask)]
        _, want = models.loss_and_grad(m, sel)
        assert np.allclose(grad.values, want.values, atol=1e-12)

    def test_empty_selection_gives_zero_vector(self):
        m = models.init_model(models.SOFTMAX_LINEAR, 3, 2, seed=0)
        batch = pseudo_batch(m, 4, seed=2)
        grad, mask, _ = truncated_gradient(m, batch, 1e-12)
        assert not mask.any()
        assert np.all(grad.values == 0.0)
        assert grad.values.size == m.params.size

    def test_empty_batch_rejected(self):
        m = models.init_model(models.SOFTMAX_LINEAR, 3, 2, seed=0)
        with pytest.raises(ValueError):
            truncated_gradient(m, [], 1.0)


class TestTruncatedGradientWithLabeled:
    def test_pooled_average(self):
        m = models.init_model(models.SOFTMAX_LINEAR, 3, 2, seed=0)
        batch = pseudo_batch(m, 10, seed=3)
        labeled = pseudo_batch(m, 3, seed=4)
        rho = 10.0  # select everything
        grad, mask, _ = truncated_gradient_with_labeled(m, batch, labeled, rho)
        assert mask.all()
        _, g_u = models.loss_and_grad(m, batch)
        _, g_s = models.loss_and_grad(m, labeled)
        want = (10 * g_u.values + 3 * g_s.values) / 13
        assert np.allclose(grad.values, want, atol=1e-12)

    def test_nothing_selected_keeps_labeled_part(self):
        m = models.init_model(models.SOFTMAX_LINEAR, 3, 2, seed=0)
        batch = pseudo_batch(m, 10, seed=3)
        labeled = pseudo_batch(m, 3, seed=4)
        grad, mask, _ = truncated_gradient_with_labeled(m, batch, labeled, 1e-12)
        assert not mask.any()
        _, g_s = models.loss_and_grad(m, labeled)
        assert np.allclose(grad.values, g_s.values, atol=1e-12)

    def test_batch_must_outnumber_labeled(self):
        m = models.init_model(models.SOFTMAX_LINEAR, 3, 2, seed=0)
        with pytest.raises(ConfigError):
            truncated_gradient_with_labeled(m, pseudo_batch(m, 3, 0),
                                            pseudo_batch(m, 3, 1), 1.0)


class TestRhoHat:
    def test_practical_is_mean_labeled_loss(self):
        bundle = tiny_bundle()
        m = models.init_model(models.SOFTMAX_LINEAR, 2, 2, seed=0)
        got = estimate_rho_hat_practical(m, bundle.labeled)
        pairs = [(ex.x, models.one_hot(ex.true_label, 2)) for ex in bundle.labeled]
        assert got == pytest.approx(models.mean_loss(m, pairs), rel=1e-12)

    def test_theoretical_worked_example(self):
        got = rho_hat_theoretical(a=0.5, G=1.0, delta=0.1, mu=1.0, m=5,
                                  a0=0.05, b0=2.0)
        assert got == pytest.approx(320.0, rel=1e-12)

    def test_theoretical_lower_clamp(self):
        assert rho_hat_theoretical(a=1e6, G=1.0, delta=0.1, mu=1.0, m=5,
                                   a0=0.05, b0=2.0) == 1e6

    def test_nonpositive_a0_is_infeasible(self):
        with pytest.raises(InfeasibleConstantsError):
            rho_hat_theoretical(a=0.5, G=1.0, delta=0.1, mu=1.0, m=5,
                                a0=0.0, b0=2.0)


class TestDashConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            DashConfig(mode="quantum")
        with pytest.raises(ValueError):
            DashConfig(algorithm="meanteacher")
        with pytest.raises(ValueError):
            DashConfig(momentum=1.0)
        with pytest.raises(ValueError):
            DashConfig(tau=1.0)
        with pytest.raises(ValueError):
            DashConfig(m=0)

    def test_theory_step_size_condition(self):
        with pytest.raises(ValueError):
            DashConfig(mode=MODE_THEORY, eta=0.9, eta0=0.9, smoothness=2.0)
        DashConfig(mode=MODE_THEORY, eta=0.5, eta0=0.5, smoothness=2.0)


class TestWarmup:
    def test_zero_steps_copies_model(self):
        bundle = tiny_bundle()
        m = models.init_model(models.SOFTMAX_LINEAR, 2, 2, seed=0)
        cfg = DashConfig(T0=0)
        out = warmup(m, bundle.labeled, cfg, np.random.default_rng(0))
        assert out is not m
        assert np.array_equal(out.params.values, m.params.values)

    def test_training_reduces_labeled_loss(self):
        bundle = tiny_bundle()
        m = models.init_model(models.SOFTMAX_LINEAR, 2, 2, seed=0)
        cfg = DashConfig(T0=50, m0=8, eta0=0.5)
        out = warmup(m, bundle.labeled, cfg, np.random.default_rng(0))
        before = estimate_rho_hat_practical(m, bundle.labeled)
        after = estimate_rho_hat_practical(out, bundle.labeled)
        assert after < before

    def test_deterministic(self):
        bundle = tiny_bundle()
        m = models.init_model(models.MLP_1HIDDEN, 2, 2, hidden=4, seed=0)
        cfg = DashConfig(T0=10, m0=4, eta0=0.2)
        a = warmup(m, bundle.labeled, cfg, np.random.default_rng(5))
        b = warmup(m, bundle.labeled, cfg, np.random.default_rng(5))
        assert np.array_equal(a.params.values, b.params.values)


def base_config(algo=ALGO_DASH, mode=MODE_PRACTICE, T=8, **kw):
    sched = kw.pop("schedule", None) or ThresholdSchedule(
        C=3.0, gamma=1.27, floor=0.05, activation_epoch=1, decay_every_epochs=9)
    pol = kw.pop("augment", None) or AugmentPolicy(weak_noise=0.05,
                                                   strong_noise=0.15,
                                                   strong_mask_prob=0.05)
    kw.setdefault("eta", 0.2)
    return DashConfig(mode=mode, algorithm=algo, schedule=sched, T=T, m=16,
                      seed=11, augment=pol, **kw)


class TestDashTrain:
    def test_stats_shape_and_epochs(self):
        bundle = tiny_bundle()
        model = models.init_model(models.MLP_1HIDDEN, 2, 2, hidden=8, seed=1)
        spe = math.ceil(len(bundle.unlabeled) / 16)
        _, stats, log = dash_train(bundle, base_config(T=3 * spe), model)
        assert len(stats) == 3 * spe
        assert [s.step for s in stats] == list(range(1, 3 * spe + 1))
        assert stats[0].epoch == 0 and stats[-1].epoch == 2
        assert log["steps_per_epoch"] == spe

    def test_input_model_not_mutated(self):
        bundle = tiny_bundle()
        model = models.init_model(models.MLP_1HIDDEN, 2, 2, hidden=8, seed=1)
        before = model.params.values.copy()
        dash_train(bundle, base_config(T=4), model)
        assert np.array_equal(model.params.values, before)

    def test_deterministic_rerun(self):
        bundle = tiny_bundle()
        model = models.init_model(models.MLP_1HIDDEN, 2, 2, hidden=8, seed=1)
        m1, s1, _ = dash_train(bundle, base_config(T=10), model)
        m2, s2, _ = dash_train(bundle, base_config(T=10), model)
        assert np.array_equal(m1.params.values, m2.params.values)
        assert all(a.row() == b.row() for a, b in zip(s1, s2))

    def test_fixmatch_logs_fixed_level(self):
        bundle = tiny_bundle()
        model = models.init_model(models.SOFTMAX_LINEAR, 2, 2, seed=1)
        _, stats, _ = dash_train(bundle, base_config(algo=ALGO_FIXMATCH, T=5),
                                 model)
        level = -math.log(0.95)
        assert all(s.rho_t == pytest.approx(level, rel=1e-15) for s in stats)

    def test_pl_uses_raw_view(self):
        # with zero-noise policy, pl and dash-pl should see identical
        # confidences on the first step regardless of augment settings
        bundle = tiny_bundle()
        model = models.init_model(models.SOFTMAX_LINEAR, 2, 2, seed=1)
        quiet = AugmentPolicy()
        noisy = AugmentPolicy(weak_noise=0.3, strong_noise=0.9,
                              strong_mask_prob=0.5)
        _, s_quiet, _ = dash_train(bundle, base_config(algo=ALGO_PL, T=1,
                                                       augment=quiet), model)
        _, s_noisy, _ = dash_train(bundle, base_config(algo=ALGO_PL, T=1,
                                                       augment=noisy), model)
        assert s_quiet[0].n_selected == s_noisy[0].n_selected

    def test_theory_mode_batch_growth(self):
        bundle = tiny_bundle()
        model = models.init_model(models.SOFTMAX_LINEAR, 2, 2, seed=1)
        sched = ThresholdSchedule(C=2.0, gamma=1.5, rho_hat=5.0)
        cfg = base_config(mode=MODE_THEORY, T=6, schedule=sched,
                          augment=AugmentPolicy())
        _, stats, _ = dash_train(bundle, cfg, model)
        want = [int(math.floor(16 * 1.5 ** t + 1e-9)) for t in range(6)]
        assert [s.n_sampled for s in stats] == want

    def test_theory_mode_cap(self):
        bundle = tiny_bundle()
        model = models.init_model(models.SOFTMAX_LINEAR, 2, 2, seed=1)
        sched = ThresholdSchedule(C=2.0, gamma=2.0, rho_hat=5.0)
        cfg = base_config(mode=MODE_THEORY, T=6, schedule=sched,
                          augment=AugmentPolicy(), n_cap=40)
        with pytest.raises(CapExceededError) as ei:
            dash_train(bundle, cfg, model)
        assert ei.value.step == 3  # 16, 32, then 64 > 40

    def test_theory_zero_selection_skips_update(self):
        bundle = tiny_bundle()
        model = models.init_model(models.SOFTMAX_LINEAR, 2, 2, seed=1)
        sched = ThresholdSchedule(C=1.0001, gamma=1.27, rho_hat=1e-12)
        cfg = base_config(mode=MODE_THEORY, T=4, schedule=sched,
                          augment=AugmentPolicy())
        trained, stats, _ = dash_train(bundle, cfg, model)
        assert all(s.n_selected == 0 for s in stats)
        assert np.array_equal(trained.params.values, model.params.values)

    def test_with_labeled_form_requires_bigger_batches(self):
        bundle = tiny_bundle()  # 8 labeled
        model = models.init_model(models.SOFTMAX_LINEAR, 2, 2, seed=1)
        sched = ThresholdSchedule(C=2.0, gamma=1.5, rho_hat=5.0)
        cfg = DashConfig(mode=MODE_THEORY, algorithm=ALGO_DASH, schedule=sched,
                         gradient_form=GRAD_WITH_LABELED, T=2, m=4, seed=0,
                         augment=AugmentPolicy())
        with pytest.raises(ConfigError):
            dash_train(bundle, cfg, model)

    def test_model_bundle_shape_mismatch(self):
        bundle = tiny_bundle()
        model = models.init_model(models.SOFTMAX_LINEAR, 3, 2, seed=1)
        with pytest.raises(ValueError):
            dash_train(bundle, base_config(T=1), model)

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_divergence_raises_with_step(self):
        bundle = tiny_bundle()
        model = models.init_model(models.SOFTMAX_LINEAR, 2, 2, seed=1)
        cfg = base_config(T=6, eta=1e160, weight_decay=1.0)
        with pytest.raises(DivergenceError) as ei:
            dash_train(bundle, cfg, model)
        assert ei.value.step >= 1
        assert "step" in str(ei.value)

    def test_counts_are_consistent(self):
        bundle = tiny_bundle()
        model = models.init_model(models.MLP_1HIDDEN, 2, 2, hidden=8, seed=1)
        _, stats, _ = dash_train(bundle, base_config(T=12), model)
        for s in stats:
            assert s.n_selected == s.n_sel_P + s.n_sel_Q
            assert s.n_selected == s.n_sel_correct + s.n_sel_wrong
            assert 0 <= s.n_selected <= s.n_sampled

    def test_cosine_lr_recorded(self):
        bundle = tiny_bundle()
        model = models.init_model(models.SOFTMAX_LINEAR, 2, 2, seed=1)
        cfg = base_config(T=8, lr_schedule=LR_COSINE)
        _, stats, _ = dash_train(bundle, cfg, model)
        want = [0.2 * math.cos(7 * math.pi * t / (16 * 8)) for t in range(8)]
        assert np.allclose([s.lr for s in stats], want, atol=1e-15)
        assert stats[0].lr == pytest.approx(0.2)


class TestSelectionStats:
    def test_count_invariants_enforced(self):
        with pytest.raises(ValueError):
            SelectionStats(step=1, epoch=0, rho_t=1.0, n_sampled=4, n_selected=3,
                           n_sel_correct=1, n_sel_wrong=1, n_sel_P=2, n_sel_Q=1,
                           labeled_loss=0.0, unlabeled_loss=0.0, test_error=0.0,
                           lr=0.1)
        with pytest.raises(ValueError):
            SelectionStats(step=1, epoch=0, rho_t=1.0, n_sampled=2, n_selected=3,
                           n_sel_correct=2, n_sel_wrong=1, n_sel_P=2, n_sel_Q=1,
                           labeled_loss=0.0, unlabeled_loss=0.0, test_error=0.0,
                           lr=0.1)


class TestMetricsCsv:
    def make_stats(self):
        return [SelectionStats(step=1, epoch=0, rho_t=math.inf, n_sampled=4,
                               n_selected=4, n_sel_correct=3, n_sel_wrong=1,
                               n_sel_P=3, n_sel_Q=1, labeled_loss=0.6931,
                               unlabeled_loss=0.25, test_error=0.5, lr=0.1),
                SelectionStats(step=2, epoch=0, rho_t=1.5, n_sampled=4,
                               n_selected=2, n_sel_correct=2, n_sel_wrong=0,
                               n_sel_P=2, n_sel_Q=0, labeled_loss=0.5,
                               unlabeled_loss=0.125, test_error=0.25, lr=0.09)]

    def test_round_trip(self, tmp_path):
        path = str(tmp_path / "metrics.csv")
        write_metrics_csv(self.make_stats(), path)
        cols = read_metrics_csv(path)
        assert list(cols) == dash.METRICS_COLUMNS
        assert cols["step"].tolist() == [1, 2]
        assert math.isinf(cols["rho_t"][0])
        assert cols["rho_t"][1] == 1.5
        assert cols["unlabeled_loss"].tolist() == [0.25, 0.125]

    def test_header_written_exactly(self, tmp_path):
        path = str(tmp_path / "metrics.csv")
        write_metrics_csv(self.make_stats(), path)
        with open(path) as fh:
            first = fh.readline().rstrip("\n")
        assert first == ("step,epoch,rho_t,n_sampled,n_selected,n_sel_correct,"
                         "n_sel_wrong,n_sel_P,n_sel_Q,labeled_loss,"
                         "unlabeled_loss,test_error,lr")

    def test_rejects_tampered_header(self, tmp_path):
        path = str(tmp_path / "metrics.csv")
        write_metrics_csv(self.make_stats(), path)
        body = open(path).read().replace("rho_t", "rho")
        open(path, "w").write(body)
        with pytest.raises(ValueError):
            read_metrics_csv(path)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = models.init_model(models.MLP_1HIDDEN, 3, 2, hidden=4, seed=9)
        path = str(tmp_path / "checkpoint.bin")
        save_checkpoint(m.params, path)
        back = load_checkpoint(path)
        assert np.array_equal(back, m.params.values)

    def test_file_layout(self, tmp_path):
        m = models.init_model(models.SOFTMAX_LINEAR, 2, 2, seed=0)
        path = str(tmp_path / "checkpoint.bin")
        save_checkpoint(m.params, path)
        raw = open(path, "rb").read()
        assert raw[:8] == b"DASHMODL"
        assert len(raw) == 16 + 8 * m.params.size

    def test_rejects_bad_magic(self, tmp_path):
        path = str(tmp_path / "c.bin")
        open(path, "wb").write(b"NOTMAGIC" + b"\0" * 16)
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_rejects_truncated(self, tmp_path):
        m = models.init_model(models.SOFTMAX_LINEAR, 2, 2, seed=0)
        path = str(tmp_path / "c.bin")
        save_checkpoint(m.params, path)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:-8])
        with pytest.raises(ValueError):
            load_checkpoint(path)
