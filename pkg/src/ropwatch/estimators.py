"""scikit-learn compatible front ends for the indicators.

Detectors take ``X`` as a sequence of traces and predict 1 (malicious) when
any thread of a trace raises the indicator's alert. They have nothing to
learn; ``fit`` only validates parameters and input, so they drop into
pipelines, ``cross_val_score`` and ``GridSearchCV`` over thresholds.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import indicators
from .validation import check_int, check_labels, check_trace, check_traces


class _Detector(ClassifierMixin, BaseEstimator):
    indicator = ""

    def _validate_params(self) -> None:
        pass

    def fit(self, X, y=None):
        self._validate_params()
        traces = check_traces(X)
        if y is not None:
            check_labels(y, len(traces))
        self.classes_ = np.array([0, 1])
        self.n_traces_seen_ = len(traces)
        return self

    def _analyzer(self):
        raise NotImplementedError

    def analyze(self, trace) -> dict[int, indicators.IndicatorVerdict]:
        """Per-thread verdicts for one trace."""
        check_is_fitted(self)
        return self._analyzer().feed_all(check_trace(trace)).verdicts()

    def decision_function(self, X) -> np.ndarray:
        """Number of alerting threads per trace."""
        check_is_fitted(self)
        return np.array([sum(v.alert for v in self.analyze(t).values())
                         for t in check_traces(X)], dtype=float)

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(int)


class ParityDetector(_Detector):
    """Alerts when returns outnumber calls in any thread."""

    indicator = "parity"

    def _analyzer(self):
        return indicators.ParityAnalyzer()


class GapDetector(_Detector):
    """Alerts on ``run_len`` consecutive short return-to-return gaps.

    Parameters
    ----------
    gadget_max : int, default=5
        A gap with fewer than this many plain instructions is suspect.
    run_len : int, default=3
        Consecutive suspect gaps needed for an alert.
    """

    indicator = "gap"

    def __init__(self, gadget_max: int = indicators.GADGET_MAX, run_len: int = indicators.RUN_LEN):
        self.gadget_max = gadget_max
        self.run_len = run_len

    def _validate_params(self) -> None:
        check_int(self.gadget_max, "gadget_max", 1)
        check_int(self.run_len, "run_len", 1)

    def _analyzer(self):
        return indicators.GapAnalyzer(self.gadget_max, self.run_len)


class IpFeatureExtractor(TransformerMixin, BaseEstimator):
    """Summarise instruction-pointer variation of each trace.

    ``transform`` returns one row per trace: the maximum and mean revisit
    score and the maximum and mean scatter score over all windows of all
    threads (zeros when the trace is shorter than one window).
    """

    def __init__(self, window: int = indicators.IP_WINDOW, k: int = indicators.IP_REVISIT_K,
                 radius: int = indicators.IP_RADIUS, stride: int | None = None):
        self.window = window
        self.k = k
        self.radius = radius
        self.stride = stride

    def fit(self, X, y=None):
        check_int(self.window, "window", indicators.IP_MIN_WINDOW)
        check_int(self.k, "k", 1)
        check_int(self.radius, "radius", 0)
        if self.stride is not None:
            check_int(self.stride, "stride", 1)
        self.n_features_in_ = 1
        check_traces(X)
        return self

    def series(self, trace) -> dict[int, indicators.IpFeatureSeries]:
        check_is_fitted(self)
        return indicators.ip_features(check_trace(trace), self.window, self.k,
                                      self.radius, self.stride)

    def transform(self, X) -> np.ndarray:
        rows = []
        for trace in check_traces(X):
            series = self.series(trace).values()
            revisit = np.concatenate([s.revisit() for s in series] or [np.zeros(0)])
            scatter = np.concatenate([s.scatter() for s in series] or [np.zeros(0)])
            if revisit.size == 0:
                rows.append([0.0, 0.0, 0.0, 0.0])
            else:
                rows.append([revisit.max(), revisit.mean(), scatter.max(), scatter.mean()])
        return np.array(rows, dtype=float)

    def get_feature_names_out(self, input_features=None) -> np.ndarray:
        return np.array(["revisit_max", "revisit_mean", "scatter_max", "scatter_mean"], dtype=object)
