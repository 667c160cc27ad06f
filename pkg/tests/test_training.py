import numpy as np
import pytest

from vswno import data as D
from vswno import operator as O
from vswno import tensor as T
from vswno import training as TR


def make_dataset(n=64, n_train=12, n_test=4, seed=0):
    arrays, meta = D.generate_burgers_dataset(
        n=n, n_train=n_train, n_test=n_test, nu=0.1, t_end=1.0,
        grf={"scale": 625.0, "tau2": 25.0, "power": 2.0}, seed=seed)
    return TR.TrainingData(
        train_x=arrays["train_x"].astype(np.float64),
        train_y=arrays["train_y"].astype(np.float64),
        test_x=arrays["test_x"].astype(np.float64),
        test_y=arrays["test_y"].astype(np.float64),
        grid=(n,), input_range=tuple(meta["input_range"]), metadata=meta,
        config_echo={"grid": [n], "problem": "burgers"})


def tiny_model(n=64, kind="vsn", sigma="identity", seed=0, trainable=True, gh=16):
    cfg = O.WnoConfig(grid=(n,), d_u=8, g_hidden=gh, L=2, wavelet="db4", m=3,
                      wavelet_mode="periodic", neuron_kind=kind, sigma=sigma, sts=1,
                      neuron_params_trainable=trainable)
    return O.build_model(cfg, seed=seed)


class TestRelativeL2:
    def test_exact_match_is_zero(self):
        x = np.random.default_rng(0).standard_normal((3, 10))
        assert TR.relative_l2_percent(x, x) == 0.0

    def test_zero_prediction_is_hundred(self):
        t = np.random.default_rng(1).standard_normal((4, 7))
        assert abs(TR.relative_l2_percent(np.zeros_like(t), t) - 100.0) < 1e-12

    def test_hand_norms(self):
        pred = np.array([[1.0, 1.0]])
        truth = np.array([[1.0, 0.0]])
        assert abs(TR.relative_l2_percent(pred, truth) - 100.0) < 1e-12

    def test_scale_invariance(self):
        rng = np.random.default_rng(2)
        p, t = rng.standard_normal((5, 9)), rng.standard_normal((5, 9))
        a = TR.relative_l2_percent(p, t)
        b = TR.relative_l2_percent(3.7 * p, 3.7 * t)
        assert abs(a - b) < 1e-9

    def test_zero_norm_sample_names_index(self):
        t = np.ones((3, 4))
        t[1] = 0.0
        with pytest.raises(ValueError, match="sample 1"):
            TR.relative_l2_percent(np.ones((3, 4)), t)

    def test_batch_loss_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        pred_data = rng.standard_normal((4, 6, 1))
        truth = rng.standard_normal((4, 6))
        pred = T.Tensor(pred_data, requires_grad=True)
        with T.Tape() as tape:
            T.backward(TR.batch_loss(pred, truth), tape)
        h = 1e-6
        flat = pred.data.reshape(-1)
        gflat = pred.grad.reshape(-1)
        for idx in rng.choice(flat.size, 6, replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = float(TR.batch_loss(T.Tensor(pred.data), truth).data)
            flat[idx] = orig - h
            fm = float(TR.batch_loss(T.Tensor(pred.data), truth).data)
            flat[idx] = orig
            fd = (fp - fm) / (2 * h)
            assert abs(fd - gflat[idx]) / max(abs(fd), abs(gflat[idx]), 1e-8) < 1e-5


class TestSpikingLoss:
    def report(self, s_sites):
        counters = [(s / 100.0 * 80, 80) for s in s_sites]
        return TR.spike_activity(counters)

    def test_gamma_zero_reduces_to_base_loss(self):
        rep = self.report([50.0, 10.0])
        assert TR.spiking_loss(0.37, rep, alpha=1.0, gamma=0.0) == 0.37

    def test_hand_arithmetic(self):
        rep = self.report([50.0, 50.0, 50.0, 50.0])
        assert abs(TR.spiking_loss(0.1, rep, alpha=1.0, gamma=0.5) - 1.1) < 1e-12

    def test_gamma_linearity(self):
        rep = self.report([30.0, 20.0])
        base = TR.spiking_loss(0.0, rep, alpha=1.0, gamma=0.25)
        assert abs(TR.spiking_loss(0.0, rep, alpha=1.0, gamma=0.5) - 2 * base) < 1e-12

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            TR.spiking_loss(0.1, self.report([10.0]), alpha=-1.0, gamma=0.0)

    def test_soft_term_backpropagates(self):
        x = T.Tensor(np.array([0.5, -0.5, 0.2]), requires_grad=True)
        with T.Tape() as tape:
            spikes = T.spike_threshold(x)
            soft = T.reduce_mean(spikes)
            rep = TR.SpikeReport([], [], 0.0, soft_s_tilde=soft)
            loss = TR.spiking_loss(T.Tensor(0.0), rep, alpha=1.0, gamma=2.0)
            T.backward(loss, tape)
        assert np.all(x.grad > 0)  # surrogate pressure on every element


class TestSpikeActivity:
    def test_formula(self):
        rep = TR.spike_activity([(6.0, 8)])
        assert rep.s_per_site == [75.0]

    def test_bounds(self):
        assert TR.spike_activity([(0.0, 10)]).s_per_site == [0.0]
        assert TR.spike_activity([(10.0, 10)]).s_per_site == [100.0]

    def test_reported_aggregate(self):
        sites = [42.18, 32.35, 19.75, 2.46]
        rep = TR.spike_activity([(s * 10, 1000) for s in sites])
        assert abs(rep.s_tilde - 0.9674) < 1e-12

    def test_zero_slots_rejected(self):
        with pytest.raises(ValueError, match="site 1"):
            TR.spike_activity([(0.0, 0)])


class TestEnergyModel:
    def test_break_even_constants(self):
        est = TR.energy_estimate([1.0], [4])
        assert abs(est.lif_break_even - 12.0 / 7.0) < 1e-12
        assert est.vsn_break_even == 1.0

    def test_closed_forms_on_random_counts(self):
        rng = np.random.default_rng(4)
        n_s = rng.uniform(0, 3, 5).tolist()
        n_mt = rng.integers(1, 64, 5).tolist()
        est = TR.energy_estimate(n_s, n_mt)
        for i in range(5):
            assert est.artificial[i] == 12.0 * n_mt[i]
            assert est.lif[i] == 7.0 * n_mt[i] * n_s[i]
            assert est.vsn[i] == 12.0 * n_mt[i] * n_s[i]

    def test_zero_spikes_cost_nothing_for_spiking_kinds(self):
        est = TR.energy_estimate([0.0], [16])
        assert est.lif[0] == 0.0 and est.vsn[0] == 0.0
        assert est.artificial[0] == 192.0

    def test_break_even_equalities(self):
        est = TR.energy_estimate([12.0 / 7.0, 1.0], [8, 8])
        assert abs(est.lif[0] - est.artificial[0]) < 1e-9
        assert abs(est.vsn[1] - est.artificial[1]) < 1e-9

    def test_misaligned_sites_rejected(self):
        with pytest.raises(ValueError, match="align"):
            TR.energy_estimate([1.0], [2, 3])


class TestAdam:
    def test_first_step_magnitude(self):
        p = T.Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([1.0])
        state = TR.AdamState([p], lr=1e-3)
        TR.adam_step(state)
        delta = float(p.data[0]) - 1.0
        assert abs(delta + 1e-3) < 2e-6  # ~ -lr * g/|g| modulo eps

    def test_zero_gradient_no_motion(self):
        p = T.Tensor(np.array([2.0]), requires_grad=True)
        p.grad = np.zeros(1)
        TR.adam_step(TR.AdamState([p], lr=1e-3, weight_decay=0.0))
        assert p.data[0] == 2.0

    def test_decay_pulls_toward_zero(self):
        p = T.Tensor(np.array([5.0]), requires_grad=True)
        p.grad = np.zeros(1)
        TR.adam_step(TR.AdamState([p], lr=1e-3, weight_decay=1e-2))
        assert 0.0 < p.data[0] < 5.0

    def test_matches_scalar_reference_over_100_steps(self):
        rng = np.random.default_rng(5)
        for trial in range(5):
            g_seq = rng.standard_normal(100)
            lr, wd = 10 ** rng.uniform(-4, -2), 10 ** rng.uniform(-5, -3)
            p = T.Tensor(np.array([rng.standard_normal()]), requires_grad=True)
            ref = float(p.data[0])
            m = v = 0.0
            state = TR.AdamState([p], lr=lr, weight_decay=wd)
            for t, g in enumerate(g_seq, start=1):
                p.grad = np.array([g])
                TR.adam_step(state)
                gt = g + wd * ref
                m = 0.9 * m + 0.1 * gt
                v = 0.999 * v + 0.001 * gt * gt
                m_hat = m / (1 - 0.9**t)
                v_hat = v / (1 - 0.999**t)
                ref -= lr * m_hat / (np.sqrt(v_hat) + 1e-8)
                assert abs(float(p.data[0]) - ref) < 1e-12, f"trial {trial} step {t}"

    def test_shape_mismatch_rejected(self):
        p = T.Tensor(np.zeros(3), requires_grad=True)
        state = TR.AdamState([p])
        with pytest.raises(ValueError, match="shape"):
            TR.adam_step(state, [p], [np.zeros(2)])


class TestTrainLoop:
    def test_zero_epochs_is_a_no_op(self):
        ds = make_dataset()
        model = tiny_model()
        before = [p.data.copy() for _, p in model.parameters()]
        log = TR.train(model, ds, TR.Schedule(epochs=0, batch_size=4, seed=0))
        assert log.rows == []
        for (_, p), b in zip(model.parameters(), before):
            assert np.array_equal(p.data, b)

    def test_identical_seeds_identical_logs(self):
        ds = make_dataset()
        sched = TR.Schedule(epochs=3, batch_size=4, seed=11)
        log1 = TR.train(tiny_model(seed=2), ds, sched)
        log2 = TR.train(tiny_model(seed=2), ds, sched)
        for r1, r2 in zip(log1.rows, log2.rows):
            assert r1[:-1] == r2[:-1]  # wall_seconds is timing, everything else bit-equal

    def test_overfits_tiny_dataset(self):
        # ten samples of a band-limited smoothing map; capacity far exceeds
        # the data, so the fit should become tight within 200 epochs
        spec = D.GrfSpec(scale=625.0, tau2=25.0, power=2.0, seed=3)
        u0 = D.sample_grf_1d_batch(spec, 64, 12)
        k = np.fft.rfftfreq(64, d=1 / 64)
        y = np.fft.irfft(np.fft.rfft(u0) * np.exp(-((k / 6.0) ** 2)), 64)
        ds = TR.TrainingData(
            train_x=u0[:10], train_y=y[:10], test_x=u0[10:], test_y=y[10:],
            grid=(64,), input_range=(float(u0[:10].min()), float(u0[:10].max())),
            metadata={}, config_echo={"grid": [64]})
        cfg = O.WnoConfig(grid=(64,), d_u=16, g_hidden=32, L=2, wavelet="db4", m=2,
                          wavelet_mode="periodic", neuron_kind="vsn", sigma="identity", sts=1)
        model = O.build_model(cfg, seed=4)
        sched = TR.Schedule(epochs=200, batch_size=2, lr=3e-3, weight_decay=0.0, seed=0)
        TR.train(model, ds, sched)
        result = TR.evaluate(model, ds.train_x, ds.train_y, sched,
                             value_range=ds.input_range, base_seed=0)
        assert result["eps"] < 5.0

    def test_gamma_reduces_soft_spike_pressure_direction(self):
        # single step: gradient on thresholds must point up (fire less) when
        # only the sparsity term is active
        ds = make_dataset()
        model = tiny_model(kind="vsn", sigma="identity", seed=5)
        inputs = TR._prepare_inputs(ds.train_x[:4])
        params = dict(model.parameters())
        with T.Tape() as tape:
            O.forward_multi_sts(model, T.Tensor(inputs))
            soft = TR.soft_spike_fraction(model)
            T.backward(soft, tape)
        g1 = params["site1.threshold"].grad
        assert np.all(g1 <= 0.0) and np.any(g1 < 0.0)
        # raising the threshold lowers firing, so minimizing S moves T up

    def test_nan_abort_carries_context(self):
        ds = make_dataset()
        model = tiny_model(seed=6)
        model.h_w.data = np.full_like(model.h_w.data, np.nan)
        with pytest.raises(TR.TrainingDivergedError, match="epoch 1, batch 1"):
            TR.train(model, ds, TR.Schedule(epochs=1, batch_size=4, seed=0))

    def test_final_row_consistent_with_checkpoint_eval(self, tmp_path):
        ds = make_dataset()
        model = tiny_model(kind="vsn", sigma="identity", seed=7)
        sched = TR.Schedule(epochs=2, batch_size=4, lr=1e-3, alpha=1.0, gamma=0.0, seed=1)
        log = TR.train(model, ds, sched)
        path = tmp_path / "ck.vswn"
        O.save_model(model, path)
        loaded, _ = O.load_model(path)
        result = TR.evaluate(loaded, ds.train_x, ds.train_y, sched,
                             value_range=ds.input_range, base_seed=sched.seed)
        # with gamma=0 the logged train loss is the train-set relative error
        assert abs(result["eps"] / 100.0 - log.rows[-1][1]) < 1e-9


class TestTrainLog:
    def test_round_trip(self, tmp_path):
        log = TR.TrainLog(site_count=2, config_echo={"grid": [8], "x": 1})
        log.rows = [[1, 0.5, 40.0, 10.0, 20.0, 1.25], [2, 0.25, 30.0, 5.0, 10.0, 2.5]]
        path = tmp_path / "log.csv"
        log.save(path)
        back = TR.TrainLog.load(path)
        assert back.config_echo == log.config_echo
        assert back.rows == log.rows

    def test_missing_header_line_number(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("epoch,train_loss\n1,2\n")
        with pytest.raises(ValueError, match="line 1"):
            TR.TrainLog.load(path)

    def test_bad_field_count_reports_line(self, tmp_path):
        log = TR.TrainLog(site_count=1, config_echo={})
        log.rows = [[1, 0.5, 40.0, 10.0, 1.0]]
        path = tmp_path / "log.csv"
        log.save(path)
        text = path.read_text().splitlines()
        text.append("2,0.4")
        path.write_text("\n".join(text) + "\n")
        with pytest.raises(ValueError, match="line 4"):
            TR.TrainLog.load(path)
