"""scikit-learn style wrapper around training and grounding."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import GroundingError, ParameterError
from .params import ParamStore
from .phantom import PhantomCase
from .pipeline import PipelineConfig, PreparedCase, evaluate, ground, prepare_phantom, train


def check_config(config) -> PipelineConfig:
    """Coerce ``None``, a mapping or a :class:`PipelineConfig` into a validated config."""
    if config is None:
        return PipelineConfig()
    if isinstance(config, PipelineConfig):
        config.validate()
        return config
    if isinstance(config, dict):
        return PipelineConfig.from_dict(config)
    raise ParameterError(f"config must be a PipelineConfig, a dict or None, not {type(config).__name__}")


def check_cases(X, cfg: PipelineConfig, require_masks=False):
    """Turn a sequence of phantom or prepared cases into prepared cases."""
    if isinstance(X, (PhantomCase, PreparedCase)):
        X = [X]
    try:
        items = list(X)
    except TypeError:
        raise ParameterError(f"expected a sequence of cases, got {type(X).__name__}") from None
    if not items:
        raise ParameterError("expected at least one case")
    out = []
    for k, item in enumerate(items):
        if isinstance(item, PhantomCase):
            item = prepare_phantom(item, cfg)
        elif not isinstance(item, PreparedCase):
            raise ParameterError(f"case {k} is a {type(item).__name__}, not a PhantomCase or PreparedCase")
        if require_masks and item.lesion_masks is None:
            raise GroundingError(f"case {item.case_id} has no ground-truth lesion masks")
        out.append(item)
    return out


def check_is_fitted(est):
    if getattr(est, "params_", None) is None:
        raise NotFittedError(f"{type(est).__name__} is not fitted; call fit first")


class LesionGrounder(BaseEstimator):
    """Report-guided lesion grounding as an estimator.

    ``X`` is a sequence of cases (phantom or prepared); targets travel with
    the cases, so ``y`` is ignored.  ``predict`` returns one boolean union
    mask per case and ``score`` the mean lesion localisation score.
    """

    def __init__(self, config=None, steps=500, warm_start=False):
        self.config = config
        self.steps = steps
        self.warm_start = warm_start

    def _cfg(self):
        return check_config(self.config)

    def fit(self, X, y=None, eval_X=None):
        cfg = self._cfg()
        if not isinstance(self.steps, (int, np.integer)) or self.steps < 0:
            raise ParameterError(f"steps must be a non-negative integer, got {self.steps!r}")
        cases = check_cases(X, cfg)
        eval_cases = check_cases(eval_X, cfg, require_masks=True) if eval_X is not None else None
        start = self.params_ if self.warm_start and getattr(self, "params_", None) is not None else None
        result = train(cases, cfg, int(self.steps), eval_cases=eval_cases, params=start)
        self.params_ = result.params
        self.trace_ = result.trace
        self.evals_ = result.evals
        self.n_features_in_ = cfg.channels
        return self

    def ground(self, X):
        """Full :class:`GroundingResult` per case."""
        check_is_fitted(self)
        cfg = self._cfg()
        return [ground(c, self.params_, cfg) for c in check_cases(X, cfg)]

    def predict(self, X):
        cfg = self._cfg()
        cases = check_cases(X, cfg)
        return [r.union(c.dims, cfg.binarize) for r, c in zip(self.ground(cases), cases)]

    def evaluate(self, X):
        """Per-case metric records and their aggregate."""
        check_is_fitted(self)
        cfg = self._cfg()
        return evaluate(check_cases(X, cfg, require_masks=True), self.params_, cfg)

    def score(self, X, y=None):
        _, agg = self.evaluate(X)
        return agg["lls"]["mean"]

    def set_fitted_params(self, params: ParamStore):
        """Install externally trained parameters (e.g. a loaded checkpoint)."""
        self.params_ = params
        self.n_features_in_ = self._cfg().channels
        return self

