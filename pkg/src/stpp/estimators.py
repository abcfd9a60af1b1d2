"""scikit-learn style wrappers around the model, the baseline and the detector."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_count_series, check_positive, check_sequences, infer_n_sensors
from .events import default_threshold, detect_congestion
from .intensity import (
    DEFAULT_N_PRED,
    DEFAULT_N_SUB,
    ModelConfig,
    init_params,
    intensity_trace,
    predict_many,
)
from .network import SpatialIndex
from .train import (
    TrainConfig,
    evaluate,
    fit as fit_model,
    fit_hawkes_mle,
    hawkes_loglik,
    poisson_rates,
    sequence_logliks,
)


class APPEstimator(BaseEstimator):
    """Attention-based spatio-temporal point process fitted by maximum likelihood.

    ``X`` is a list of EventSequence. Pass ``network`` and ``weights`` for
    the spatial model; without them ``temporal_only`` must be true.
    """

    def __init__(self, network=None, weights=None, n_heads=3, value_dim=8, hidden=32, temporal_only=False,
                 epochs=20, batch=64, lr=1e-3, n_sub=DEFAULT_N_SUB, eta=None, clip=10.0,
                 background_bins=0, background_period=None, time_scale=None, init_mu0="empirical",
                 n_pred=DEFAULT_N_PRED, normalize_density=False, seed=0, threads=None):
        self.network = network
        self.weights = weights
        self.n_heads = n_heads
        self.value_dim = value_dim
        self.hidden = hidden
        self.temporal_only = temporal_only
        self.epochs = epochs
        self.batch = batch
        self.lr = lr
        self.n_sub = n_sub
        self.eta = eta
        self.clip = clip
        self.background_bins = background_bins
        self.background_period = background_period
        self.time_scale = time_scale
        self.init_mu0 = init_mu0
        self.n_pred = n_pred
        self.normalize_density = normalize_density
        self.seed = seed
        self.threads = threads

    def _context(self):
        if self.network is None:
            if not self.temporal_only:
                raise ValueError("spatial model needs network and weights; set temporal_only=True otherwise")
            return None
        if self.weights is None:
            raise ValueError("network given without segment weights")
        return SpatialIndex(self.network, self.weights)

    def _train_config(self):
        return TrainConfig(epochs=self.epochs, batch=self.batch, lr=self.lr, seed=self.seed, n_sub=self.n_sub,
                           eta=self.eta, temporal_only=self.temporal_only, clip=self.clip, threads=self.threads)

    def initial_params(self, X):
        """Parameters the optimizer starts from (also used when epochs would be 0)."""
        seqs = check_sequences(X)
        ctx = self._context()
        k = infer_n_sensors(seqs, self.network)
        horizon = float(np.median([s.T for s in seqs]))
        config = ModelConfig(
            n_sensors=k, n_heads=self.n_heads, value_dim=self.value_dim, hidden=self.hidden,
            temporal_only=self.temporal_only,
            time_scale=check_positive("time_scale", self.time_scale if self.time_scale is not None else horizon),
            background_bins=self.background_bins,
            background_period=self.background_period if self.background_period is not None else horizon,
        )
        mu0 = None
        if self.init_mu0 == "empirical":
            # the log term is flat near the init value, so a data-driven start saves many epochs
            mu0 = np.maximum(poisson_rates(seqs, k), 1e-3)
        elif self.init_mu0 is not None and self.init_mu0 != "default":
            mu0 = self.init_mu0
        sigma = ctx.median_distance if ctx is not None else None
        return init_params(config, seed=self.seed, mu0=mu0, sigma=sigma), ctx

    def fit(self, X, y=None, on_epoch=None):
        seqs = check_sequences(X)
        params, ctx = self.initial_params(seqs)
        self.params_, self.trace_ = fit_model(params, seqs, self._train_config(), ctx, on_epoch=on_epoch)
        self.ctx_ = ctx
        self.n_sensors_ = params.config.n_sensors
        return self

    @classmethod
    def from_params(cls, params, network=None, weights=None, **kwargs):
        est = cls(network=network, weights=weights, temporal_only=params.config.temporal_only, **kwargs)
        est.params_ = params
        est.trace_ = []
        est.ctx_ = est._context()
        est.n_sensors_ = params.config.n_sensors
        return est

    def score_samples(self, X):
        check_is_fitted(self, "params_")
        seqs = check_sequences(X, self.n_sensors_)
        return sequence_logliks(self.params_, seqs, self.ctx_, self.n_sub, self.eta)

    def score(self, X, y=None):
        """Average log-likelihood per sequence."""
        return float(np.mean(self.score_samples(X)))

    def predict(self, X):
        """(t_hat, s_hat) for the event following each prefix in ``X``."""
        check_is_fitted(self, "params_")
        seqs = check_sequences(X, self.n_sensors_)
        preds = predict_many(self.params_, seqs, None, self.ctx_, self.n_pred, self.normalize_density)
        return np.array([(t, s) for t, s in preds], dtype=object).reshape(len(preds), 2)

    def evaluate(self, X):
        check_is_fitted(self, "params_")
        seqs = check_sequences(X, self.n_sensors_)
        return evaluate(self.params_, seqs, self.ctx_, self.n_sub, self.n_pred, self.normalize_density, self.eta)

    def intensity_trace(self, seq, grid, sensors=None):
        check_is_fitted(self, "params_")
        return intensity_trace(self.params_, seq, grid, sensors, self.ctx_)


class HawkesMLE(BaseEstimator):
    """Univariate exponential-kernel Hawkes process fitted by exact likelihood."""

    def __init__(self, starts=5, steps=1500, lr=0.05, seed=0):
        self.starts = starts
        self.steps = steps
        self.lr = lr
        self.seed = seed

    def fit(self, X, y=None):
        seqs = check_sequences(X)
        res = fit_hawkes_mle(seqs, starts=self.starts, steps=self.steps, lr=self.lr, seed=self.seed)
        self.mu_, self.alpha_, self.beta_ = res.as_tuple()
        self.loglik_ = res.loglik
        return self

    def score_samples(self, X):
        check_is_fitted(self, "mu_")
        return hawkes_loglik(check_sequences(X), self.mu_, self.alpha_, self.beta_)

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))


class CongestionDetector(TransformerMixin, BaseEstimator):
    """Learns a per-sensor count threshold and turns count series into congestion events."""

    def __init__(self, n_std=2.0, thresholds=None):
        self.n_std = n_std
        self.thresholds = thresholds

    def fit(self, X, y=None):
        series = check_count_series(X)
        fixed = dict(self.thresholds or {})
        self.thresholds_ = {s.sensor: fixed.get(s.sensor, default_threshold(s, self.n_std)) for s in series}
        return self

    def transform(self, X):
        check_is_fitted(self, "thresholds_")
        out = []
        for s in check_count_series(X):
            if s.sensor not in self.thresholds_:
                raise ValueError(f"no threshold learned for sensor {s.sensor}")
            out.append(detect_congestion(s, self.thresholds_[s.sensor]))
        return out
