from decimal import Decimal, localcontext

import numpy as np
import pytest

from atflrec.errors import ConfigError, DivergenceError, ScheduleRangeError, TrainingContractError
from atflrec.model import collate
from atflrec.tensor import Tensor
from atflrec.train import Adam, TrainConfig, TrainHistory, lr_at, train, train_step, validation_auc

from conftest import fake_samples, randomize_adapters, tiny_model


def closed_form(i, w, total, lr0=1e-3, floor=1e-9):
    """Piecewise-linear schedule in 60-digit decimal, rounded once to float."""
    with localcontext() as ctx:
        ctx.prec = 60
        lr0, floor = Decimal(lr0), Decimal(floor)
        if i <= w:
            return float(floor + (lr0 - floor) * Decimal(i) / Decimal(w))
        return float(lr0 * Decimal(total - i) / Decimal(total - w))


class TestSchedule:
    cfg = TrainConfig()

    def test_anchors(self):
        assert lr_at(0, self.cfg, 600) == 1e-9
        assert lr_at(50, self.cfg, 600) == 1e-3
        assert lr_at(600, self.cfg, 600) == 0.0

    def test_midpoints(self):
        assert lr_at(25, self.cfg, 600) == pytest.approx((1e-9 + 1e-3) / 2, rel=1e-15)
        assert lr_at(325, self.cfg, 600) == pytest.approx(5e-4, rel=1e-15)

    @pytest.mark.parametrize("total", np.random.default_rng(6).integers(51, 5000, 5).tolist())
    def test_bit_exact(self, total):
        for i in range(total + 1):
            assert lr_at(i, self.cfg, total) == closed_form(i, 50, total)

    def test_piecewise_linear(self):
        lrs = np.array([lr_at(i, self.cfg, 300) for i in range(301)])
        np.testing.assert_allclose(np.diff(lrs[:51]), np.diff(lrs[:51])[0], rtol=1e-9)
        np.testing.assert_allclose(np.diff(lrs[50:]), np.diff(lrs[50:])[0], rtol=1e-9)

    def test_warmup_must_fit(self):
        with pytest.raises(ConfigError):
            lr_at(0, self.cfg, 50)

    @pytest.mark.parametrize("i", [-1, 601])
    def test_out_of_range(self, i):
        with pytest.raises(ScheduleRangeError):
            lr_at(i, self.cfg, 600)

    def test_step_schedule(self):
        cfg = TrainConfig(schedule="step", step_every=10, step_gamma=0.5)
        assert lr_at(55, cfg, 200) == 1e-3
        assert lr_at(60, cfg, 200) == 5e-4
        assert lr_at(75, cfg, 200) == 2.5e-4
        assert lr_at(200, cfg, 200) == 0.0

    def test_epoch_defaults(self):
        assert TrainConfig(k_shot=100).n_epochs == 50
        assert TrainConfig(k_shot=500).n_epochs == 30
        assert TrainConfig(k_shot=500, epochs=3).n_epochs == 3

    def test_steps_per_epoch(self):
        cfg = TrainConfig()
        assert cfg.steps_per_epoch(35) == 1
        assert cfg.steps_per_epoch(500) == 16
        assert cfg.steps_per_epoch(100) == 3


class TestAdam:
    def test_first_step_is_sign(self, rng):
        p = Tensor(rng.normal(size=6), requires_grad=True)
        start = p.data.copy()
        p.grad = rng.normal(size=6)
        Adam({"p": p}).step(1e-3)
        np.testing.assert_allclose(p.data - start, -1e-3 * np.sign(p.grad), rtol=1e-4)

    def test_zero_grad_keeps_params(self, rng):
        p = Tensor(rng.normal(size=4), requires_grad=True)
        start = p.data.copy()
        p.grad = np.zeros(4)
        Adam({"p": p}).step(1e-2)
        np.testing.assert_array_equal(p.data, start)

    def test_missing_grad(self):
        with pytest.raises(TrainingContractError, match="p"):
            Adam({"p": Tensor(np.zeros(2), requires_grad=True)}).step(1e-3)

    def test_deterministic(self, rng):
        g = rng.normal(size=(5, 3, 2))

        def run():
            p = Tensor(np.ones(2), requires_grad=True)
            opt = Adam({"p": p})
            for step in g:
                p.grad = step[0]
                opt.step(1e-2)
            return p.data

        np.testing.assert_array_equal(run(), run())


class TestAccumulation:
    @pytest.mark.parametrize("variant", ["DualLora", "SingleLoraFused", "TextOnlyLora"])
    def test_four_by_eight_equals_thirty_two(self, variant):
        rng = np.random.default_rng(3)
        samples = fake_samples(rng, 32)
        audio = variant != "TextOnlyLora"
        models = []
        for groups in (4, 1):
            m = tiny_model(variant, seed=1)
            m.bn_use_running_stats = True
            randomize_adapters(m, np.random.default_rng(9))
            size = 32 // groups
            micro = [collate(samples[g * size : (g + 1) * size], audio) for g in range(groups)]
            train_step(m, micro, Adam(m.trainable_parameters()), 1e-2)
            models.append(m)
        a, b = (m.trainable_parameters() for m in models)
        for name in a:
            np.testing.assert_allclose(a[name].data, b[name].data, rtol=0, atol=1e-9, err_msg=name)


class TestTrain:
    def test_too_few_samples(self, rng):
        with pytest.raises(TrainingContractError):
            train(tiny_model(), fake_samples(rng, 7), [], TrainConfig(epochs=60))

    def test_one_step_per_epoch(self, rng):
        res = train(tiny_model("TextOnlyLora"), fake_samples(rng, 35), [], TrainConfig(epochs=60))
        assert len(res.history.steps) == 60
        assert [s[0] for s in res.history.steps] == list(range(60))

    def test_partial_group_steps(self, rng):
        # 6 micro-batches, accumulation 4: one full and one partial group per epoch
        res = train(tiny_model("TextOnlyLora"), fake_samples(rng, 48), [], TrainConfig(epochs=30))
        assert len(res.history.steps) == 60

    def test_history_lr_matches_schedule(self, rng):
        cfg = TrainConfig(epochs=60)
        res = train(tiny_model("TextOnlyLora"), fake_samples(rng, 35), [], cfg)
        for it, lr, _, _ in res.history.steps:
            assert lr == lr_at(it, cfg, 60)

    def test_frozen_weights_untouched(self, rng):
        m = tiny_model("DualLora")
        before = m.frozen_checksum()
        train(m, fake_samples(rng, 40), fake_samples(rng, 10), TrainConfig(epochs=60))
        assert m.frozen_checksum() == before

    def test_memorizes_small_set(self):
        rng = np.random.default_rng(0)
        samples = fake_samples(rng, 16)
        cfg = TrainConfig(initial_lr=1e-2, batch_size=8, accum_every=1, epochs=300)
        res = train(tiny_model("DualLora"), samples, [], cfg)
        assert np.mean([s[2] for s in res.history.steps[-2:]]) < 0.05

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, rng):
        m = tiny_model("TextOnlyLora")
        m.head_w.data[...] = np.nan
        with pytest.raises(DivergenceError):
            train(m, fake_samples(rng, 16), [], TrainConfig(epochs=60))

    def test_restores_best_epoch(self, rng):
        train_set, val = fake_samples(rng, 32), fake_samples(rng, 12)
        cfg = TrainConfig(epochs=30, patience=3, warmup_iters=5)
        res = train(tiny_model("DualLora"), train_set, val, cfg)
        best = max(a for _, a in res.history.epochs)
        assert res.history.epochs[res.history.best_epoch][1] == best
        assert validation_auc(res.model, val) == best

    def test_early_stop(self, rng):
        # random labels leave nothing to learn, so validation AUC stalls
        res = train(tiny_model("TextOnlyLora"), fake_samples(rng, 16), fake_samples(rng, 10), TrainConfig(epochs=200, patience=2))
        assert res.history.stopped_early
        assert len(res.history.epochs) < 200

    def test_bit_identical_reruns(self, rng, tmp_path):
        train_set, val = fake_samples(rng, 24), fake_samples(rng, 8)
        outs = []
        for run in range(2):
            res = train(tiny_model("DualLora", seed=4), train_set, val, TrainConfig(epochs=30, seed=4, warmup_iters=5))
            res.history.write_csv(tmp_path / f"h{run}.csv")
            outs.append((tmp_path / f"h{run}.csv").read_bytes())
        assert outs[0] == outs[1]
        back = TrainHistory.read_csv(tmp_path / "h0.csv")
        assert back.steps == res.history.steps
