import numpy as np
import pytest

from spcascade.data import synth_hmm
from spcascade.experiments import (BaselineGrid, BaselineResult, _pairs, _truth_min_posterior, baseline_comparison,
                                   crf_threshold, ordering_holds)
from spcascade.inference import sum_product_marginals
from spcascade.training import TrainConfig, crf_train


@pytest.fixture(scope="module")
def crf_dev():
    train, gen = synth_hmm(1, 3, 40, length=(3, 6), seed=0)
    dev, _ = synth_hmm(1, 3, 50, length=(3, 6), seed=1, generator=gen)
    model = crf_train(_pairs(train.examples, 3, 1), TrainConfig(lam=1e-3, eta=0.5, epochs=2, dimension=1024), 3, 1)
    return model, _pairs(dev.examples, 3, 1)


class TestCrfThreshold:
    @pytest.mark.parametrize("eps", [0.0, 0.04, 0.1, 1.0])
    def test_largest_feasible_cutoff(self, crf_dev, eps):
        model, dev = crf_dev
        alpha, lf = crf_threshold(model, dev, eps)
        mins = np.array([_truth_min_posterior(sum_product_marginals(model, ex, lat), lat, ex.labels)
                         for ex, lat in dev])
        assert lf == pytest.approx(np.mean(mins <= alpha)) and lf <= eps
        if alpha < 1.0 - 1e-9:
            # the next critical value would exceed the tolerance
            assert np.mean(mins <= alpha + 2e-12) > eps

    def test_min_posterior_by_hand(self, crf_dev):
        model, dev = crf_dev
        ex, lat = dev[0]
        post = sum_product_marginals(model, ex, lat)
        expect = min(p[ex.labels[i]] for i, p in enumerate(post.per_anchor()))
        assert _truth_min_posterior(post, lat, ex.labels) == expect


class TestBaselines:
    def test_ordering_predicate(self):
        r = lambda le: BaselineResult("x", 0.0, 0.0, 0.0, le)
        assert ordering_holds({"sc": r(0.1), "crf": r(0.2), "sp": r(0.2)})
        assert not ordering_holds({"sc": r(0.3), "crf": r(0.2), "sp": r(0.4)})

    def test_small_comparison_runs(self):
        grid = BaselineGrid(sc_alphas=(0.6,), epochs=1)
        out = baseline_comparison(seed=0, K=3, n_train=20, n_dev=20, n_test=20, epsilon=0.1, grid=grid,
                                  dimension=1024)
        assert set(out) == {"sc", "sp", "crf"}
        for res in out.values():
            assert 0 <= res.test_efficiency_loss <= 1 and 0 <= res.test_filter_loss <= 1
