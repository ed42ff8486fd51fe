"""Scikit-learn facade: fit/predict, validation helpers, cloning."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cvfc.data import synth_generate
from cvfc.estimator import CvfcSegmenter, validate_images, validate_multihot


def small_dataset(n=6, size=16, seed=2):
    patches = synth_generate(seed=seed, count=n, size=size)
    X = np.stack([p.image for p in patches])
    y = np.stack([p.label for p in patches])
    gts = np.stack([p.gt_mask for p in patches])
    return X, y, gts


class TestValidation:
    def test_channel_first_passthrough(self):
        X = np.zeros((2, 3, 8, 8), dtype=np.float32)
        out = validate_images(X)
        assert out.shape == (2, 3, 8, 8)

    def test_channel_last_converted(self):
        X = np.zeros((2, 8, 8, 3), dtype=np.float32)
        out = validate_images(X)
        assert out.shape == (2, 3, 8, 8)

    def test_bad_rank(self):
        with pytest.raises(ValueError):
            validate_images(np.zeros((3, 8, 8)))

    def test_bad_channels(self):
        with pytest.raises(ValueError):
            validate_images(np.zeros((2, 4, 8, 8)))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            validate_images(np.full((1, 3, 8, 8), 2.0))

    def test_non_square(self):
        with pytest.raises(ValueError):
            validate_images(np.zeros((1, 3, 8, 10)))

    def test_multihot_shape(self):
        with pytest.raises(ValueError):
            validate_multihot(np.zeros((2, 2)), 2, 3)

    def test_multihot_binary(self):
        with pytest.raises(ValueError):
            validate_multihot(np.full((2, 3), 0.5), 2, 3)

    def test_multihot_needs_positive(self):
        y = np.array([[1, 0, 0], [0, 0, 0]])
        with pytest.raises(ValueError):
            validate_multihot(y, 2, 3)


class TestEstimator:
    def _estimator(self, **kw):
        base = dict(epochs=1, batch_size=4, seed=0, augment=False, arch="tiny38")
        base.update(kw)
        return CvfcSegmenter(**base)

    def test_get_params_roundtrip(self):
        est = self._estimator(lr=0.004)
        params = est.get_params()
        assert params["lr"] == 0.004
        est2 = clone(est)
        assert est2.get_params() == params

    def test_not_fitted_error(self):
        est = self._estimator()
        with pytest.raises(NotFittedError):
            est.predict(np.zeros((1, 3, 16, 16), dtype=np.float32))

    def test_fit_predict_shapes(self):
        X, y, _ = small_dataset()
        est = self._estimator().fit(X, y)
        masks = est.predict(X)
        assert masks.shape == (6, 16, 16)
        assert masks.min() >= 0 and masks.max() <= 3

    def test_predict_proba_shape(self):
        X, y, _ = small_dataset()
        est = self._estimator().fit(X, y)
        proba = est.predict_proba(X)
        assert proba.shape == (6, 3)
        assert (proba > 0).all() and (proba < 1).all()

    def test_score_returns_miou(self):
        X, y, gts = small_dataset()
        est = self._estimator().fit(X, y)
        s = est.score(X, gts)
        assert 0.0 <= s <= 1.0

    def test_history_recorded(self):
        X, y, _ = small_dataset()
        est = self._estimator(epochs=2).fit(X, y)
        assert [r["epoch"] for r in est.history_] == [1, 2]

    def test_channel_last_fit(self):
        X, y, _ = small_dataset()
        est = self._estimator().fit(X.transpose(0, 2, 3, 1), y)
        masks = est.predict(X.transpose(0, 2, 3, 1))
        assert masks.shape == (6, 16, 16)

    def test_cvfc_arch_fits(self):
        # full three-branch model on a minimal problem
        X, y, _ = small_dataset(n=4)
        est = CvfcSegmenter(epochs=1, batch_size=4, seed=0, augment=False, arch="cvfc")
        est.fit(X, y)
        assert est.predict(X).shape == (4, 16, 16)
