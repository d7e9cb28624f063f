import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import GridSearchCV
from sklearn.pipeline import make_pipeline

from ropwatch import corpus, gadgets
from ropwatch.estimators import GapDetector, IpFeatureExtractor, ParityDetector
from ropwatch.isa import OpcodeClass
from ropwatch.vm import exploit_run, run


@pytest.fixture(scope="module")
def dataset(vuln):
    legit = [run(p.image(), p.inputs) for p in corpus.legit_programs(4, 24)[2:]]
    attacks = [exploit_run(vuln, c, padding=26) for c in gadgets.generate_attacks(vuln, 22)]
    X = legit + attacks
    y = np.array([0] * len(legit) + [1] * len(attacks))
    return X, y


def test_params_and_clone():
    det = GapDetector(gadget_max=7, run_len=2)
    assert det.get_params() == {"gadget_max": 7, "run_len": 2}
    other = clone(det).set_params(run_len=4)
    assert other.run_len == 4 and det.run_len == 2
    assert ParityDetector().get_params() == {}
    assert IpFeatureExtractor(window=64).get_params()["window"] == 64


@pytest.mark.parametrize("det", [ParityDetector(), GapDetector()])
def test_detectors_separate_clean_corpus(det, dataset):
    X, y = dataset
    det.fit(X, y)
    assert list(det.classes_) == [0, 1]
    assert det.n_traces_seen_ == len(X)
    np.testing.assert_array_equal(det.predict(X), y)
    assert det.score(X, y) == 1.0


def test_decision_function_counts_threads(dataset):
    X, _ = dataset
    det = ParityDetector().fit(X)
    scores = det.decision_function(X[-2:])
    assert scores.tolist() == [1.0, 1.0]
    verdicts = det.analyze(X[-1])
    assert verdicts[0].alert


def test_accepts_raw_event_tuples(dataset):
    X, _ = dataset
    raw = [[(e.seq, e.tid, e.addr, e.cls.value, e.mnemonic) for e in X[-1].events]]
    assert ParityDetector().fit(raw).predict(raw).tolist() == [1]


def test_not_fitted_and_bad_input(dataset):
    X, y = dataset
    with pytest.raises(NotFittedError):
        ParityDetector().predict(X)
    with pytest.raises(ValueError):
        ParityDetector().fit([])
    with pytest.raises(TypeError):
        ParityDetector().fit(X[0])
    with pytest.raises(ValueError):
        ParityDetector().fit(X, y[:-1])
    with pytest.raises(ValueError):
        ParityDetector().fit(X, y + 1)
    with pytest.raises(ValueError):
        GapDetector(gadget_max=0).fit(X)
    with pytest.raises(TypeError):
        GapDetector(run_len=2.5).fit(X)


def test_grid_search_over_thresholds(dataset):
    X, y = dataset
    search = GridSearchCV(GapDetector(), {"run_len": [50, 3]}, cv=3)
    search.fit(X, y)
    assert search.best_params_ == {"run_len": 3}
    assert search.best_score_ == 1.0
    assert search.cv_results_["mean_test_score"][0] == 0.5  # never alerts


def test_ip_extractor_pipeline(dataset):
    X, y = dataset
    ext = IpFeatureExtractor(window=48, stride=1)
    feats = ext.fit_transform(X)
    assert feats.shape == (len(X), 4)
    assert list(ext.get_feature_names_out()) == ["revisit_max", "revisit_mean", "scatter_max", "scatter_mean"]
    assert np.all((feats >= 0) & (feats <= 1))
    model = make_pipeline(IpFeatureExtractor(window=48, stride=1), LogisticRegression())
    model.fit(X, y)
    assert model.score(X, y) > 0.75  # classes are balanced, chance is 0.5


def test_ip_extractor_short_trace_and_params(dataset):
    X, _ = dataset
    assert IpFeatureExtractor(window=10**6).fit(X).transform(X[:1]).tolist() == [[0.0] * 4]
    with pytest.raises(ValueError):
        IpFeatureExtractor(window=4).fit(X)
    with pytest.raises(ValueError):
        IpFeatureExtractor(stride=0).fit(X)
