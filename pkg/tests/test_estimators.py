import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fieldseg.estimators import DenseSegmenter, ImplicitSegmenter
from fieldseg.phantom import PhantomConfig, generate_phantom
from fieldseg.volume import LabelGrid


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(PhantomConfig(extent=(16, 16, 16), num_segments=4, seed=11))


def small_implicit(**kw):
    kw.setdefault("num_classes", 5)
    kw.setdefault("steps", 12)
    kw.setdefault("points_per_step", 256)
    kw.setdefault("widths", (8, 16))
    kw.setdefault("hidden", 32)
    return ImplicitSegmenter(**kw)


class TestSklearnProtocol:
    def test_get_params_round_trip(self):
        est = small_implicit(seed=5)
        params = est.get_params()
        est2 = ImplicitSegmenter(**params)
        assert est2.get_params() == params

    def test_set_params_chains(self):
        est = small_implicit()
        assert est.set_params(steps=3).steps == 3

    def test_clone_preserves_hyperparams(self):
        est = small_implicit(seed=9)
        assert clone(est).get_params() == est.get_params()

    def test_not_fitted_error(self, phantom):
        with pytest.raises(NotFittedError):
            small_implicit().predict(phantom.image)
        with pytest.raises(NotFittedError):
            DenseSegmenter().predict(phantom.image)

    def test_fit_returns_self(self, phantom):
        est = small_implicit()
        assert est.fit(phantom.image, phantom.segments) is est


class TestImplicitSegmenter:
    def test_predict_extent_defaults_to_input(self, phantom):
        est = small_implicit().fit(phantom.image, phantom.segments)
        pred = est.predict(phantom.image)
        assert pred.extent == phantom.image.extent

    def test_predict_arbitrary_extent(self, phantom):
        est = small_implicit().fit(phantom.image, phantom.segments)
        assert est.predict(phantom.image, extent=(24, 24, 24)).extent == (24, 24, 24)

    def test_accepts_raw_arrays(self, phantom):
        est = small_implicit().fit(phantom.image.data[0], phantom.segments.data)
        pred = est.predict(phantom.image.data[0])
        assert isinstance(pred, LabelGrid)

    def test_history_recorded(self, phantom):
        est = small_implicit(steps=7).fit(phantom.image, phantom.segments)
        assert len(est.history_) == 7
        assert est.points_per_step_ == 256

    def test_deterministic_refit(self, phantom):
        a = small_implicit(seed=3).fit(phantom.image, phantom.segments)
        b = small_implicit(seed=3).fit(phantom.image, phantom.segments)
        assert [r.total for r in a.history_] == [r.total for r in b.history_]

    def test_mismatched_pairs_rejected(self, phantom):
        with pytest.raises(ValueError, match="volumes"):
            small_implicit().fit([phantom.image], [])

    def test_channel_validation(self, phantom):
        est = small_implicit(in_channels=2)
        with pytest.raises(ValueError, match="channel"):
            est.fit(phantom.image, phantom.segments)

    def test_score_in_unit_interval(self, phantom):
        est = small_implicit(steps=30, points_per_step=1024).fit(
            phantom.image, phantom.segments)
        s = est.score(phantom.image, phantom.segments)
        assert 0.0 <= s <= 1.0

    def test_predict_proba_rows(self, phantom):
        est = small_implicit().fit(phantom.image, phantom.segments)
        probs = est.predict_proba(phantom.image, np.zeros((5, 3)))
        assert probs.shape == (5, 5)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)


class TestDenseSegmenter:
    def test_fit_predict_shapes(self, phantom):
        est = DenseSegmenter(num_classes=5, steps=10, widths=(8, 16), proj_width=8)
        est.fit(phantom.image, phantom.segments)
        assert est.predict(phantom.image).extent == phantom.image.extent

    def test_points_per_step_is_grid(self, phantom):
        est = DenseSegmenter(num_classes=5, steps=3, widths=(8, 16), proj_width=8)
        est.fit(phantom.image, phantom.segments)
        assert est.points_per_step_ == 16 ** 3

    def test_extent_mismatch_rejected(self, phantom):
        est = DenseSegmenter(num_classes=5, steps=2)
        bad = LabelGrid(np.zeros((8, 8, 8), dtype=np.uint8), 5)
        with pytest.raises(ValueError, match="extent"):
            est.fit(phantom.image, bad)

    def test_param_counts_comparable(self, phantom):
        imp = small_implicit(widths=(16, 32, 64), hidden=128, num_classes=19,
                             steps=2, points_per_step=64)
        imp.fit(phantom.image, LabelGrid(phantom.segments.data, 19))
        den = DenseSegmenter(num_classes=19, steps=1)
        den.fit(phantom.image, LabelGrid(phantom.segments.data, 19))
        _, imp_dec, _ = imp.count_params()
        _, den_head, _ = den.count_params()
        assert imp_dec < den_head
