import numpy as np
import pytest
import torch
from scipy import ndimage

from roireg.errors import ConfigurationError, EmptyMaskError
from roireg.losses import dsc_metric
from roireg.phantom import PhantomSpec, generate_pair
from roireg.segnet import (
    CONNECTIVITY,
    SegConfig,
    SegModel,
    Segmenter,
    postprocess,
    predict_mask,
    seg_forward,
    soft_dice_loss,
    train_segmenter,
)
from roireg.volumes import Volume, identity_grid


def ellipsoid(shape=(24, 24, 24), axes=(8, 6, 5)):
    g = identity_grid(shape) - (np.asarray(shape) - 1) / 2
    return ((g / np.asarray(axes)) ** 2).sum(-1) <= 1


def test_forward_shape_and_range():
    model = SegModel(SegConfig(grid_size=16, base_channels=4))
    vol = Volume(np.random.default_rng(0).normal(size=(16, 16, 16)))
    prob = seg_forward(model, vol)
    assert prob.shape == (16, 16, 16)
    assert prob.data.min() >= 0 and prob.data.max() <= 1
    assert np.array_equal(seg_forward(model, vol).data, prob.data)


def test_forward_full_grid_shape():
    model = SegModel(SegConfig(grid_size=128, base_channels=2))
    prob = seg_forward(model, np.zeros((128, 128, 128)))
    assert prob.shape == (128, 128, 128)


def test_forward_rejects_wrong_shape():
    model = SegModel(SegConfig(grid_size=16, base_channels=4))
    with pytest.raises(ValueError):
        seg_forward(model, np.zeros((16, 16, 8)))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SegConfig(grid_size=20)
    with pytest.raises(ConfigurationError):
        SegConfig(lr=0)
    with pytest.raises(ConfigurationError):
        train_segmenter([], SegConfig(grid_size=16))


def test_postprocess_exact_ellipsoid():
    e = ellipsoid()
    assert np.array_equal(postprocess(e.astype(float)), e)


def test_postprocess_removes_satellite():
    e = ellipsoid()
    prob = e.astype(float)
    prob[0, 0, 0:3] = 0.9
    out = postprocess(prob)
    assert np.array_equal(out, e)
    assert ndimage.label(out, structure=CONNECTIVITY)[1] == 1


def test_postprocess_empty():
    with pytest.raises(EmptyMaskError):
        postprocess(np.zeros((8, 8, 8)))


def test_postprocess_closes_gap():
    e = ellipsoid()
    prob = e.astype(float)
    prob[12, 12, 12] = 0.0
    assert np.array_equal(postprocess(prob), e)


def test_soft_dice_loss_values():
    t = torch.zeros(1, 1, 4, 4, 4)
    t[..., :2] = 1
    assert float(soft_dice_loss(t, t)) == pytest.approx(0.0, abs=1e-6)
    assert float(soft_dice_loss(1 - t, t)) == pytest.approx(1.0, abs=1e-6)


def test_checkpoint_roundtrip(tmp_path):
    model = SegModel(SegConfig(grid_size=16, base_channels=4, seed=3), modality="trus")
    model.save(tmp_path / "m.pt")
    loaded = SegModel.load(tmp_path / "m.pt")
    x = np.random.default_rng(1).normal(size=(16, 16, 16))
    assert np.array_equal(seg_forward(model, x), seg_forward(loaded, x))
    assert loaded.modality == "trus" and loaded.config.seed == 3


@pytest.fixture(scope="module")
def overfit():
    p = generate_pair(PhantomSpec.desk(32, seed=0))
    cfg = SegConfig(grid_size=32, batch_size=1, epochs=120, seed=0)
    model, history = train_segmenter([(p.moving, p.moving_labels)], cfg)
    return p, model, history


@pytest.mark.slow
def test_overfit_single_phantom(overfit):
    p, model, history = overfit
    assert len(history) <= 300
    mask = predict_mask(model, p.moving)
    assert dsc_metric(mask.mask(1), p.moving_labels.gland_mask()) >= 95.0
    assert history[0]["loss"] > history[-1]["loss"]


def test_deterministic_training():
    p = generate_pair(PhantomSpec.desk(16, seed=2, gland_semi_axes_range=(4.5, 6.0),
                                       landmark_radius_range=(1.0, 1.2), n_extra_structures=0))
    cfg = SegConfig(grid_size=16, base_channels=4, batch_size=1, epochs=3, seed=5)
    a, ha = train_segmenter([(p.moving, p.moving_labels)], cfg)
    b, hb = train_segmenter([(p.moving, p.moving_labels)], cfg)
    assert ha == hb
    assert np.array_equal(seg_forward(a, p.moving).data, seg_forward(b, p.moving).data)


def test_estimator_api(tmp_path):
    p = generate_pair(PhantomSpec.desk(16, seed=2, gland_semi_axes_range=(4.5, 6.0),
                                       landmark_radius_range=(1.0, 1.2), n_extra_structures=0))
    est = Segmenter(grid_size=16, base_channels=4, batch_size=1, epochs=2, checkpoint_dir=tmp_path)
    assert est.get_params()["base_channels"] == 4
    est.fit([p.moving], [p.moving_labels])
    assert (tmp_path / "seg_last.pt").exists() and (tmp_path / "seg_history.csv").exists()
    assert est.predict_proba(p.moving).shape == (16, 16, 16)
    with pytest.raises(ConfigurationError):
        Segmenter().predict(p.moving)
