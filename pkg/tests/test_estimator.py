import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from densesr.estimator import (
    BicubicDegrader,
    DenseSuperResolver,
    InterpolationUpscaler,
    check_images,
    check_pairs,
)
from densesr.imgproc import downsample
from densesr.model import NetworkConfig, build_network, save_checkpoint
from densesr.synthetic import cell_image


@pytest.fixture(scope="module")
def stack():
    hr = np.stack([cell_image(32, seed=s) for s in range(4)])
    return downsample(hr, 2), hr


class TestValidation:
    def test_single_image_becomes_stack(self):
        assert check_images(np.zeros((4, 5))).shape == (1, 4, 5)
        assert check_images(np.zeros((2, 1, 4, 5))).shape == (2, 4, 5)

    @pytest.mark.parametrize("bad", [np.zeros(3), np.zeros((0, 4, 4)), np.full((2, 2), np.nan), np.full((2, 2), 2.0)])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            check_images(bad)

    def test_pairs_must_match_scale(self):
        with pytest.raises(ValueError):
            check_pairs(np.zeros((1, 4, 4)), np.zeros((1, 6, 6)), 2)
        with pytest.raises(ValueError):
            check_pairs(np.zeros((2, 4, 4)), np.zeros((1, 8, 8)), 2)


class TestDenseSuperResolver:
    def test_params_and_clone(self):
        est = DenseSuperResolver(scale=4, preset="tiny", epochs=3)
        params = est.get_params()
        assert params["scale"] == 4 and params["preset"] == "tiny" and params["epsilon"] == 1e-4
        copy = clone(est)
        assert copy.get_params() == params and copy is not est

    def test_fit_predict_score(self, stack):
        lr, hr = stack
        est = DenseSuperResolver(scale=2, preset="tiny", epochs=2, batch_size=2, seed=1).fit(lr, hr)
        assert est.n_epochs_ == 2 and est.n_iter_ == 4 and len(est.loss_curve_) == 2
        pred = est.predict(lr)
        assert pred.shape == hr.shape and pred.dtype == np.float64
        assert np.isfinite(est.score(lr, hr))

    def test_unfitted(self, stack):
        with pytest.raises(NotFittedError):
            DenseSuperResolver().predict(stack[0])

    def test_fit_is_seeded(self, stack):
        lr, hr = stack
        a = DenseSuperResolver(scale=2, preset="tiny", epochs=1, batch_size=2, seed=3).fit(lr, hr)
        b = DenseSuperResolver(scale=2, preset="tiny", epochs=1, batch_size=2, seed=3).fit(lr, hr)
        np.testing.assert_array_equal(a.predict(lr), b.predict(lr))

    def test_from_checkpoint(self, tmp_path, stack):
        net = build_network(NetworkConfig.tiny(2), seed=5)
        save_checkpoint(net, tmp_path / "n.ckpt")
        est = DenseSuperResolver.from_checkpoint(tmp_path / "n.ckpt", preset="tiny")
        assert est.scale == 2
        np.testing.assert_array_equal(est.predict(stack[0]), net.predict(stack[0][:, None])[:, 0])


class TestBaselines:
    def test_pipeline_degrade_then_upscale(self, stack):
        _, hr = stack
        pipe = make_pipeline(BicubicDegrader(2), InterpolationUpscaler("bicubic", 2))
        out = pipe.fit(hr).predict(hr)
        assert out.shape == hr.shape

    def test_upscaler_scores_psnr(self, stack):
        lr, hr = stack
        scores = {k: InterpolationUpscaler(k, 2).fit(lr, hr).score(lr, hr) for k in ("nearest", "bilinear", "bicubic")}
        assert scores["bicubic"] > scores["nearest"]

    def test_bad_kind(self, stack):
        with pytest.raises(ValueError):
            InterpolationUpscaler("sinc").fit(stack[0])

    def test_degrader_matches_downsample(self, stack):
        _, hr = stack
        np.testing.assert_array_equal(BicubicDegrader(2).fit_transform(hr), downsample(hr, 2))
