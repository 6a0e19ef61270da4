import numpy as np
import pytest
from scipy import ndimage

from roireg.io import read_field, read_labels, read_transform, read_volume
from roireg.losses import dsc_metric, tre_metric
from roireg.phantom import PhantomSpec, generate_pair, oracle_metrics, write_case
from roireg.volumes import (
    DisplacementField,
    RigidTransform,
    axis_angle_to_matrix,
    identity_grid,
    jacobian_determinant,
    warp_labels,
    warp_with_field,
)


@pytest.fixture(scope="module")
def pair32():
    return generate_pair(PhantomSpec.desk(32, seed=3))


@pytest.fixture(scope="module")
def pairs64():
    return [generate_pair(PhantomSpec(seed=s)) for s in range(3)]


def test_deterministic(pair32):
    again = generate_pair(PhantomSpec.desk(32, seed=3))
    assert np.array_equal(again.fixed.data, pair32.fixed.data)
    assert np.array_equal(again.moving_labels.labels, pair32.moving_labels.labels)
    assert np.array_equal(again.gt_field.u, pair32.gt_field.u)
    other = generate_pair(PhantomSpec.desk(32, seed=4))
    assert not np.array_equal(other.fixed.data, pair32.fixed.data)


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(n_landmarks=6)
    with pytest.raises(ValueError):
        PhantomSpec(spacing=0)
    with pytest.raises(ValueError):
        PhantomSpec(rigid_rotation_max=-1)


def test_landmarks_strictly_inside_gland(pair32, pairs64):
    for p in [pair32] + pairs64:
        for labels in (p.moving_labels, p.fixed_labels):
            gland = labels.gland_mask()
            assert 2 <= len(labels.landmark_ids) <= 5
            for k in labels.landmark_ids:
                lm = labels.mask(k)
                assert gland[lm].all()
                # separated from the gland boundary by gland tissue
                assert (ndimage.binary_dilation(lm) & ~lm & (labels.labels == 1)).any()
                assert not (ndimage.binary_dilation(lm) & ~gland).any()


def test_identity_ground_truth():
    spec = PhantomSpec.desk(32, seed=1, rigid_rotation_max=0, rigid_translation_max=0,
                            elastic_amplitude_max=0)
    p = generate_pair(spec)
    assert np.array_equal(p.fixed_labels.labels, p.moving_labels.labels)
    assert p.info["initial_dsc"] == 100.0
    assert p.info["initial_tre"] == 0.0
    rep = oracle_metrics(p, RigidTransform.identity(), None)
    assert rep.rotation_deg == 0 and rep.translation_mm == 0 and rep.epe_vox == 0


def test_positive_jacobian(pair32, pairs64):
    for p in [pair32] + pairs64:
        assert jacobian_determinant(p.gt_field).min() > 0
        # the amplitude bound holds over the gland region the field is centred on
        amp = p.info["elastic_amplitude"]
        assert 0.5 * p.spec.elastic_amplitude_max - 1e-9 <= amp <= p.spec.elastic_amplitude_max + 1e-9


def test_rigid_ranges(pairs64):
    for p in pairs64:
        spec = p.spec
        angle = p.gt_rigid.rotation_angle()
        assert spec.rigid_rotation_max / 2 - 1e-9 <= angle <= spec.rigid_rotation_max + 1e-9
        t = np.linalg.norm(p.gt_rigid.translation)
        assert spec.rigid_translation_max / 2 - 1e-9 <= t <= spec.rigid_translation_max + 1e-9


def test_ground_truth_reproduces_gland(pairs64):
    for p in pairs64:
        warped = warp_labels(p.moving_labels, p.gt_total())
        assert dsc_metric(warped.gland_mask(), p.fixed_labels.gland_mask()) >= 97.0
        assert tre_metric(p.fixed_labels, warped, p.fixed.spacing) < 0.5


def test_ground_truth_reproduces_every_class(pairs64):
    # per-class DSC >= 0.97, landmarks included
    for p in pairs64:
        warped = warp_labels(p.moving_labels, p.gt_total())
        for k in p.fixed_labels.class_ids:
            d = dsc_metric(warped.mask(k), p.fixed_labels.mask(k))
            assert d >= 97.0, f"seed {p.spec.seed} class {k}: DSC {d:.1f}"


def test_modalities_not_linearly_related(pairs64):
    for p in pairs64:
        wm = warp_with_field(p.moving.data, p.gt_total())
        m = p.fixed_labels.gland_mask()
        assert abs(np.corrcoef(wm[m], p.fixed.data[m])[0, 1]) < 0.9


def test_difficulty_band():
    spec = PhantomSpec(seed=0, max_initial_dsc=80.0, min_initial_tre=4.0)
    for s in range(3):
        p = generate_pair(PhantomSpec(**{**spec.__dict__, "seed": s}))
        assert p.info["initial_dsc"] < 80.0
        assert p.info["initial_tre"] > 4.0
        assert dsc_metric(p.moving_labels.gland_mask(), p.fixed_labels.gland_mask()) == p.info["initial_dsc"]


def test_oracle_metrics_ground_truth(pair32):
    rep = oracle_metrics(pair32, pair32.gt_rigid, pair32.gt_field)
    assert rep.rotation_deg < 1e-6 and rep.translation_mm < 1e-9 and rep.epe_vox < 1e-9


def test_oracle_metrics_known_errors(pair32):
    gt = pair32.gt_rigid
    shifted = RigidTransform(gt.rotation, gt.translation + np.array([0.0, 3.0, 4.0]), gt.center)
    rep = oracle_metrics(pair32, shifted, pair32.gt_field)
    assert rep.rotation_deg < 1e-6
    assert rep.translation_mm == pytest.approx(5.0, abs=1e-9)
    # pure translation of 5 mm at 1 mm spacing is 5 voxels everywhere
    assert rep.epe_vox == pytest.approx(5.0, abs=1e-9)

    R = axis_angle_to_matrix((0, 0, 1), 10.0) @ gt.rotation
    # rotating about the moving-gland centroid leaves the translation error at 0
    c = np.argwhere(pair32.moving_labels.gland_mask()).mean(axis=0)
    Tc = gt.apply(c)
    rotated = RigidTransform(R, Tc - R @ (c - gt.center) - gt.center, gt.center)
    rep = oracle_metrics(pair32, rotated, None)
    assert rep.rotation_deg == pytest.approx(10.0, abs=1e-9)
    assert rep.translation_mm == pytest.approx(0.0, abs=1e-9)


def test_write_case_roundtrip(tmp_path, pair32):
    folder = write_case(pair32, tmp_path / "case000")
    names = sorted(f.name for f in folder.iterdir())
    assert names == ["gt_field.nii.gz", "gt_rigid.txt", "gt_rigid_center.txt", "mr.nii.gz",
                     "mr_label.nii.gz", "trus.nii.gz", "trus_label.nii.gz"]
    mr = read_volume(folder / "mr.nii.gz")
    assert np.allclose(mr.data, pair32.moving.data, atol=1e-6)
    assert mr.spacing == pair32.moving.spacing
    labels, geom = read_labels(folder / "trus_label.nii.gz")
    assert np.array_equal(labels.labels, pair32.fixed_labels.labels)
    f = read_field(folder / "gt_field.nii.gz")
    assert np.array_equal(f.u, pair32.gt_field.u)
    center = np.loadtxt(folder / "gt_rigid_center.txt")
    T = read_transform(folder / "gt_rigid.txt", center=center)
    pts = identity_grid((4, 4, 4)).reshape(-1, 3) * 5
    assert np.allclose(T.apply(pts), pair32.gt_rigid.apply(pts), atol=1e-9)


def test_warp_labels_zero_field(pair32):
    out = warp_labels(pair32.moving_labels, DisplacementField.zeros(pair32.moving.shape))
    assert np.array_equal(out.labels, pair32.moving_labels.labels)
