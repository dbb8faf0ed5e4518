import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from irrcast import IrregularForecaster, RandomDropper
from irrcast.data import make_windows, synth_generate
from irrcast.errors import BadParams, EmptyDataset, SeriesTooShort, ShapeMismatch
from irrcast.estimator import check_series, check_windows

TINY = dict(lookback=12, horizon=6, d_model=8, n_heads=2, encoder_depth=1, feedforward_width=16, stride=3, batch_size=8)


@pytest.fixture(scope="module")
def series():
    return synth_generate("sine_mixture", {"n_vars": 2, "offset": 10.0}, 160, seed=4)


@pytest.fixture(scope="module")
def fitted(series):
    return IrregularForecaster(epochs=2, **TINY).fit(RandomDropper(0.3, random_state=1).fit_transform(series))


def test_dropper_removes_requested_fraction(series):
    out = RandomDropper(missing_rate=0.25, random_state=0).fit_transform(series)
    assert len(out) == round(0.75 * len(series))
    assert set(out.timestamps) <= set(series.timestamps)


def test_dropper_accepts_tuple_input(series):
    out = RandomDropper(0.5).transform((series.timestamps, series.values))
    assert len(out) == len(series) // 2


def test_dropper_is_seeded(series):
    a = RandomDropper(0.4, random_state=7).transform(series)
    b = RandomDropper(0.4, random_state=7).transform(series)
    np.testing.assert_array_equal(a.timestamps, b.timestamps)


def test_check_series_rejects_other_types():
    with pytest.raises(TypeError):
        check_series(np.zeros((4, 2)))


def test_check_windows_validates_shapes(series):
    windows = make_windows(series, 12, 6, stride=20)
    assert check_windows(windows, 2, 12, 6) == windows
    with pytest.raises(ShapeMismatch):
        check_windows(windows, 3)
    with pytest.raises(ShapeMismatch):
        check_windows(windows, lookback=10)
    with pytest.raises(EmptyDataset):
        check_windows([])


def test_get_params_round_trip():
    est = IrregularForecaster(pe_method="ncde", lookback=24)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.pe_method == "ncde"


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        IrregularForecaster().predict([])


def test_fit_rejects_short_series(series):
    with pytest.raises(SeriesTooShort):
        IrregularForecaster(**TINY).fit(series.slice(0, 10))


def test_fit_rejects_bad_validation_fraction(series):
    with pytest.raises(BadParams):
        IrregularForecaster(validation_fraction=1.0, **TINY).fit(series)


def test_predict_returns_original_scale(fitted, series):
    windows = make_windows(series, 12, 6, stride=30)
    out = fitted.predict(windows)
    assert out.shape == (len(windows), 6, 2)
    # the series sits around 10, so standardized-scale output would be far off
    assert abs(out.mean() - series.values.mean()) < 3.0


def test_predict_accepts_series(fitted, series):
    out = fitted.predict(series.slice(0, 40))
    assert out.shape == (len(make_windows(series.slice(0, 40), 12, 6, stride=3)), 6, 2)


def test_score_is_negative_mse(fitted, series):
    score = fitted.score(make_windows(series, 12, 6, stride=10))
    assert score <= 0.0
    assert np.isfinite(score)


def test_fit_records_training_log(fitted):
    assert 1 <= len(fitted.training_log_.epochs) <= 2
    assert all(np.isfinite(e["val_mse"]) for e in fitted.training_log_.epochs)


def test_fit_is_deterministic(series):
    a = IrregularForecaster(epochs=1, random_state=3, **TINY).fit(series)
    b = IrregularForecaster(epochs=1, random_state=3, **TINY).fit(series)
    windows = make_windows(series, 12, 6, stride=25)
    np.testing.assert_array_equal(a.predict(windows), b.predict(windows))
