import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _helpers import all_outputs, random_example, random_instance, random_model
from spcascade.data import synth_hmm
from spcascade.inference import map_decode, max_marginals, score_labels
from spcascade.lattice import StateHierarchy, full_lattice
from spcascade.model import LinearModel, score_output
from spcascade.threshold import mean_max_threshold
from spcascade.training import (CascadeConfig, DivergenceError, LevelConfig, MetricsRow, TrainConfig, _Iterate,
                                _dev_stats, critical_alphas, crf_direction, crf_train, dense_features,
                                evaluate_cascade, perceptron_train, predict, regularized_objective, run_cascade,
                                sc_direction, sc_step, stage_alphabets, train_cascade, train_level, tune_alpha)


def dense(idx, val, dim):
    out = np.zeros(dim)
    np.add.at(out, idx, val)
    return out


class TestConfig:
    def test_validation(self):
        for kw in ({"lam": -1.0}, {"epochs": 0}, {"margin_mode": "x"}, {"eta": "pegasos", "lam": 0.0},
                   {"eta": -1.0}, {"eta": "fast"}, {"margin": 0.0}):
            with pytest.raises(ValueError):
                TrainConfig(**kw)

    def test_step_sizes(self):
        assert TrainConfig(lam=0.5).step_size(4) == 0.5
        assert TrainConfig(eta=0.3).step_size(100) == 0.3

    def test_margins(self):
        ex = random_example(np.random.default_rng(0), 7, 2)
        assert TrainConfig().margin_for(ex) == 7.0
        assert TrainConfig(margin_mode="constant", margin=2.0).margin_for(ex) == 2.0


class TestFeatures:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6), st.integers(1, 3))
    def test_dense_features_are_score_gradient(self, seed, length, order):
        rng = np.random.default_rng(seed)
        model = random_model(rng, 3, order, 512)
        ex = random_example(rng, length, 3, tie_free=False)
        f = dense_features(model, ex, ex.labels)
        assert f @ model.weights == pytest.approx(score_output(model, ex.tokens, ex.labels), abs=1e-9)
        assert np.all(f >= 0) and f.sum() > 0


class TestDirection:
    def test_matches_explicit_formula(self):
        rng = np.random.default_rng(1)
        checked = 0
        for _ in range(40):
            model, ex, lat = random_instance(rng, max_len=5, max_K=3, max_order=2, dimension=256)
            alpha = float(rng.uniform(0, 0.9))
            h, idx, val = sc_direction(model, ex, lat, alpha, margin=len(ex) + 20.0)
            table = max_marginals(model, ex, lat)
            expect_h = len(ex) + 20.0 + mean_max_threshold(table, alpha) - score_labels(model, ex, ex.labels)
            assert h == pytest.approx(expect_h, abs=1e-9)
            mean_wit = np.mean([dense_features(model, ex, w) for w in table.witnesses], axis=0)
            expect = (dense_features(model, ex, ex.labels) - alpha * dense_features(model, ex, table.global_argmax)
                      - (1 - alpha) * mean_wit)
            np.testing.assert_allclose(dense(idx, val, model.dimension), expect, atol=1e-12)
            checked += 1
        assert checked == 40

    def test_zero_when_hinge_inactive(self):
        rng = np.random.default_rng(2)
        model, ex, lat = random_instance(rng)
        ex.labels = max_marginals(model, ex, lat).global_argmax
        h, idx, _ = sc_direction(model, ex, lat, 0.0, margin=1e-9)
        table = max_marginals(model, ex, lat)
        if table.global_max > table.mean + 1e-6:
            assert h == 0.0 and len(idx) == 0

    def test_scale_argument(self):
        rng = np.random.default_rng(3)
        model, ex, lat = random_instance(rng, dimension=128)
        a = sc_direction(model, ex, lat, 0.4, 50.0, scale=2.5)
        b = sc_direction(model.copy(2.5 * model.weights), ex, lat, 0.4, 50.0)
        assert a[0] == pytest.approx(b[0])
        np.testing.assert_allclose(dense(a[1], a[2], 128), dense(b[1], b[2], 128))

    def test_alpha_near_one_is_perceptron_direction(self):
        rng = np.random.default_rng(4)
        model, ex, lat = random_instance(rng, max_len=5, dimension=256)
        _, idx, val = sc_direction(model, ex, lat, 0.999, margin=100.0)
        y_star, _ = map_decode(model, ex, lat)
        perceptron = dense_features(model, ex, ex.labels) - dense_features(model, ex, y_star)
        np.testing.assert_allclose(dense(idx, val, 256), perceptron, atol=2e-3 * len(ex))

    def test_step_formula(self):
        rng = np.random.default_rng(5)
        model, ex, lat = random_instance(rng, dimension=128)
        cfg = TrainConfig(lam=0.1, eta=0.05, margin_mode="constant", margin=30.0)
        h, idx, val = sc_direction(model, ex, lat, 0.3, 30.0)
        new = sc_step(model, ex, lat, 0.3, cfg, t=1)
        expect = (1 - 0.05 * 0.1) * model.weights + (0.05 * dense(idx, val, 128) if h > 0 else 0)
        np.testing.assert_allclose(new.weights, expect)

    def test_objective_decreases_along_small_step(self):
        rng = np.random.default_rng(6)
        model, ex, lat = random_instance(rng, dimension=128)
        cfg = TrainConfig(lam=0.01, eta=1e-4, margin_mode="constant", margin=40.0)
        before = regularized_objective(model, ex, lat, 0.5, 0.01, 40.0)
        after = regularized_objective(sc_step(model, ex, lat, 0.5, cfg, 1), ex, lat, 0.5, 0.01, 40.0)
        assert after < before

    def test_divergence_is_reported(self):
        rng = np.random.default_rng(7)
        model, ex, lat = random_instance(rng, dimension=64)
        model.weights[:] = 1e300
        cfg = TrainConfig(lam=1e-9, eta=1e300, margin_mode="constant", margin=1e305)
        with np.errstate(over="ignore", invalid="ignore"), pytest.raises(DivergenceError):
            sc_step(model, ex, lat, 0.0, cfg, 1)


class TestIterate:
    def test_lazy_scaling_matches_explicit(self):
        rng = np.random.default_rng(8)
        dim = 20
        it = _Iterate(np.zeros(dim), averaging=True)
        w, total = np.zeros(dim), np.zeros(dim)
        for t in range(300):
            shrink = 1e-3 if t % 50 == 7 else float(rng.uniform(0.5, 1.0))  # small factors force folding
            idx = rng.integers(0, dim, 4)
            val = rng.standard_normal(4)
            it.step(shrink, idx, val)
            w = shrink * w
            np.add.at(w, idx, val)
            total += w
            np.testing.assert_allclose(it.weights(), w, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(it.average(), total / 300, rtol=1e-8, atol=1e-9)

    def test_without_averaging(self):
        it = _Iterate(np.ones(3), averaging=False)
        it.step(0.5, np.array([0]), np.array([1.0]))
        np.testing.assert_allclose(it.average(), [1.5, 0.5, 0.5])


def _pairs(examples, K, order):
    return [(ex, full_lattice(len(ex), K, min(order, len(ex)))) for ex in examples]


class TestTrainers:
    def _data(self, n=12, K=3, order=2, seed=0):
        ds, gen = synth_hmm(order, K, n, length=(3, 5), seed=seed)
        return ds, gen

    def test_train_level_matches_naive_loop(self):
        ds, _ = self._data()
        data = _pairs(ds.examples, 3, 2)
        cfg = TrainConfig(lam=0.05, eta=0.5, epochs=2, dimension=256, seed=4)
        # random initial weights keep max-marginals tie-free, so lazy scaling cannot flip a witness
        model = random_model(np.random.default_rng(5), 3, 2, 256)
        fast = train_level(data, 0.3, cfg, 3, 2, init=model)
        rng = np.random.default_rng(4)
        order = [k for _ in range(cfg.epochs) for k in rng.permutation(len(data)).tolist()]
        total = np.zeros(256)
        for t, k in enumerate(order, start=1):
            ex, lat = data[k]
            model = sc_step(model, ex, lat, 0.3, cfg, t)
            total += model.weights
        np.testing.assert_allclose(fast.weights, total / len(order), rtol=1e-8, atol=1e-10)

    def test_perceptron_matches_naive_loop(self):
        ds, _ = self._data(seed=1)
        data = _pairs(ds.examples, 3, 2)
        cfg = TrainConfig(lam=0.0, eta=1.0, epochs=2, dimension=256, seed=2)
        fast = perceptron_train(data, cfg, 3, 2)
        w, total = np.zeros(256), np.zeros(256)
        rng = np.random.default_rng(2)
        order = [k for _ in range(2) for k in rng.permutation(len(data)).tolist()]
        for k in order:
            ex, lat = data[k]
            pred, _ = map_decode(LinearModel(w, fast.templates, 3), ex, lat)
            if not np.array_equal(pred, ex.labels):
                w = w + dense_features(fast, ex, ex.labels) - dense_features(fast, ex, pred)
            total += w
        np.testing.assert_allclose(fast.weights, total / len(order), atol=1e-10)

    def test_perceptron_separates_easy_data(self):
        ds, _ = synth_hmm(1, 3, 60, noise=0.0, seed=3)
        data = _pairs(ds.examples, 3, 1)
        model = perceptron_train(data, TrainConfig(lam=0.0, eta=1.0, epochs=3, dimension=1024), 3, 1)
        acc = np.mean([np.mean(map_decode(model, ex, lat)[0] == ex.labels) for ex, lat in data])
        assert acc > 0.97

    def test_crf_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        model, ex, lat = random_instance(rng, max_len=4, max_K=3, max_order=2, dimension=32)
        model.weights *= 0.2

        def nll(w):
            m = model.copy(w)
            s = np.array([score_output(m, ex.tokens, y) for y in all_outputs(lat.length, lat.K)])
            return np.logaddexp.reduce(s) - score_output(m, ex.tokens, ex.labels)

        value, idx, val = crf_direction(model, ex, lat)
        assert value == pytest.approx(nll(model.weights), abs=1e-9)
        grad = np.empty(32)
        for k in range(32):
            e = np.zeros(32)
            e[k] = 1e-6
            grad[k] = (nll(model.weights + e) - nll(model.weights - e)) / 2e-6
        np.testing.assert_allclose(-dense(idx, val, 32), grad, atol=1e-6)

    def test_crf_train_runs(self):
        ds, _ = self._data(seed=5)
        model = crf_train(_pairs(ds.examples, 3, 2), TrainConfig(lam=1e-3, eta=0.1, epochs=1, dimension=256), 3, 2)
        assert np.all(np.isfinite(model.weights)) and np.any(model.weights)

    def test_examples_without_labels_rejected(self):
        ex = random_example(np.random.default_rng(0), 3)
        with pytest.raises(ValueError):
            train_level([(ex, full_lattice(3, 2, 1))], 0.0, TrainConfig(dimension=16), 2, 1)


class TestTuneAlpha:
    def _dev(self, seed):
        rng = np.random.default_rng(seed)
        model = random_model(rng, 3, 1, 512, scale=1.0)
        dev = []
        for _ in range(30):
            ex = random_example(rng, int(rng.integers(3, 6)), 3, tie_free=False)
            lat = full_lattice(len(ex), 3, 1)
            ex.labels = map_decode(model, ex, lat)[0] if rng.random() < 0.7 else ex.labels
            dev.append((ex, lat))
        return model, dev

    def _loss(self, model, dev, alpha):
        return np.mean([score_labels(model, ex, ex.labels) <= mean_max_threshold(max_marginals(model, ex, lat), alpha)
                        for ex, lat in dev])

    @pytest.mark.parametrize("seed", range(5))
    def test_choice_is_feasible_and_maximal(self, seed):
        model, dev = self._dev(seed)
        eps = 0.1
        c = tune_alpha(model, dev, (0.0, 0.2, 0.4, 0.6, 0.8), eps)
        if not c.feasible:
            assert c.alpha == 0.0 and self._loss(model, dev, 0.0) > eps
            return
        assert c.filter_loss == pytest.approx(self._loss(model, dev, c.alpha))
        assert c.filter_loss <= eps
        if c.alpha < 0.8:
            # just above the chosen alpha the tolerance is exceeded
            assert self._loss(model, dev, c.alpha + 2e-7) > eps

    def test_critical_alpha_definition(self):
        model, dev = self._dev(11)
        crit = critical_alphas(_dev_stats(model, dev))
        for (ex, lat), a in zip(dev, crit):
            if 0 < a < 1:
                table = max_marginals(model, ex, lat)
                assert mean_max_threshold(table, a) == pytest.approx(score_labels(model, ex, ex.labels), abs=1e-9)

    def test_infeasible_falls_back_to_zero(self):
        model, dev = self._dev(12)
        for ex, lat in dev:  # the worst output as truth: always pruned
            ex.labels = np.array(min(all_outputs(len(ex), 3), key=lambda y: score_output(model, ex.tokens, y)))
        c = tune_alpha(model, dev, (0.0, 0.5), 0.0)
        assert (c.alpha, c.feasible, c.filter_loss) == (0.0, False, 1.0)

    def test_validation(self):
        model, dev = self._dev(13)
        with pytest.raises(ValueError):
            tune_alpha(model, [], (0.0,), 0.1)
        with pytest.raises(ValueError):
            tune_alpha(model, dev, (1.0,), 0.1)


class TestCascade:
    def test_stage_alphabets(self):
        stages = [LevelConfig(1), LevelConfig(1, refine=StateHierarchy([(0, 1)])),
                  LevelConfig(2, refine=StateHierarchy([(0,), (1, 2, 3)]))]
        out = stage_alphabets(stages, 4)
        assert [k for k, _ in out] == [1, 2, 4]
        assert out[0][1].tolist() == [0, 0, 0, 0]
        assert out[1][1].tolist() == [0, 1, 1, 1]
        assert out[2][1].tolist() == [0, 1, 2, 3]
        with pytest.raises(ValueError):
            stage_alphabets([LevelConfig(1, refine=StateHierarchy.split(2))], 4)

    @pytest.fixture(scope="class")
    @staticmethod
    def trained():
        train, gen = synth_hmm(2, 4, 80, length=(4, 7), noise=0.2, seed=0)
        dev, _ = synth_hmm(2, 4, 40, length=(4, 7), seed=1, generator=gen)
        tc = TrainConfig(lam=1e-4, eta=1.0, epochs=2, dimension=4096)
        cfg = CascadeConfig((LevelConfig(1, (0.0, 0.4), 0.05, tc), LevelConfig(2, (0.0, 0.4), 0.05, tc)),
                            LevelConfig(2, train=TrainConfig(lam=0.0, eta=1.0, epochs=2, dimension=4096)), seed=3)
        return train_cascade(train.examples, dev.examples, cfg, 4), train, dev, cfg

    def test_structure(self, trained):
        cascade, train, _, _ = trained
        assert len(cascade.levels) == 2 and cascade.final is not None
        assert len(cascade.dropped) == 3 and cascade.dropped[0] == 0
        assert all(isinstance(s.metrics, MetricsRow) for s in cascade.stages)
        assert cascade.final.metrics.alpha is None and cascade.final.metrics.filter_loss is None

    def test_deterministic(self, trained):
        cascade, train, dev, cfg = trained
        again = train_cascade(train.examples, dev.examples, cfg, 4)
        for a, b in zip(cascade.stages, again.stages):
            assert a.alpha == b.alpha
            np.testing.assert_array_equal(a.model.weights, b.model.weights)

    def test_trace_and_prediction(self, trained):
        cascade, _, dev, _ = trained
        ex = dev.examples[0]
        tr = run_cascade(cascade, ex)
        assert len(tr.inputs) == 3 and len(tr.filtered) == 2
        assert tr.inputs[1].order == 2 and tr.filtered[0].order == 1
        final_lat = tr.inputs[2]
        assert final_lat.contains_output(tr.prediction)
        np.testing.assert_array_equal(predict(cascade, ex), map_decode(cascade.final.model, ex, final_lat)[0])

    def test_metrics_by_recomputation(self, trained):
        cascade, _, dev, _ = trained
        rows = evaluate_cascade(cascade, dev.examples)
        lf, acc = [], []
        level = cascade.levels[0]
        for ex in dev.examples:
            lat = full_lattice(len(ex), 4, 1)
            table = max_marginals(level.model, ex, lat)
            tau = mean_max_threshold(table, level.alpha)
            lf.append(score_labels(level.model, ex, ex.labels) <= tau)
            acc.append(map_decode(level.model, ex, lat)[0] == ex.labels)
        assert rows[0].filter_loss == pytest.approx(np.mean(lf))
        assert rows[0].token_accuracy == pytest.approx(np.mean(np.concatenate(acc)))
        assert rows[-1].density <= rows[1].density or rows[-1].density == pytest.approx(rows[1].density)
        assert [r.level for r in rows] == [1, 2, 3]

    def test_refining_cascade(self):
        train, gen = synth_hmm(1, 4, 40, length=(4, 6), noise=0.1, seed=4)
        dev, _ = synth_hmm(1, 4, 20, length=(4, 6), seed=5, generator=gen)
        tc = TrainConfig(lam=1e-4, eta=1.0, epochs=2, dimension=2048)
        cfg = CascadeConfig((LevelConfig(1, (0.0,), 0.1, tc),),
                            LevelConfig(1, train=tc, refine=StateHierarchy.split(2)))
        cascade = train_cascade(train.examples, dev.examples, cfg, 4)
        assert cascade.levels[0].K == 2 and cascade.final.K == 4
        assert predict(cascade, dev.examples[0]).max() < 4
