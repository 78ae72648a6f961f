import numpy as np
import pytest
from scipy import ndimage

from viba import flow, synth
from viba.synth import FAKE, REAL, SynthConfig


def gray(frame):
    return frame.astype(np.float64).mean(axis=2) / 255


def highpass_energy(frame):
    g = gray(frame)
    return (g - ndimage.gaussian_filter(g, 1.0)) ** 2


@pytest.fixture(scope="module")
def spatial():
    return synth.gen_spatial_dataset(SynthConfig(n_samples=200, seed=7))


@pytest.fixture(scope="module")
def temporal():
    return synth.gen_temporal_dataset(SynthConfig(n_samples=30, seed=3))


def test_spatial_is_deterministic(spatial):
    again = synth.gen_spatial_dataset(SynthConfig(n_samples=200, seed=7))
    for a, b in zip(spatial, again):
        assert a.frames[0].tobytes() == b.frames[0].tobytes()
        assert a.mask.tobytes() == b.mask.tobytes() and a.region_code == b.region_code
    other = synth.gen_spatial_dataset(SynthConfig(n_samples=200, seed=8))
    assert any(a.frames[0].tobytes() != b.frames[0].tobytes() for a, b in zip(spatial, other))


def test_temporal_is_deterministic(temporal):
    again = synth.gen_temporal_dataset(SynthConfig(n_samples=30, seed=3))
    for a, b in zip(temporal, again):
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.frames, b.frames))


def test_class_balance(spatial):
    assert sum(s.label == FAKE for s in spatial) == 100


def test_label_mask_consistency(spatial, temporal):
    for s in spatial + temporal:
        assert s.mask.any() == (s.label == FAKE)
        assert (s.region_code != "") == (s.label == FAKE)


def test_patches_carry_high_frequency_energy(spatial):
    inside, outside = [], []
    for s in spatial:
        if s.label == FAKE:
            e = highpass_energy(s.frames[0])
            inside.append(e[s.mask].mean())
            outside.append(e[~s.mask].mean())
    assert np.mean(inside) > 3 * np.mean(outside)


def test_mask_holds_peak_energy(spatial):
    for s in spatial:
        if s.label == FAKE:
            smooth = ndimage.uniform_filter(highpass_energy(s.frames[0]), 8)
            assert s.mask.flat[np.argmax(smooth)]


def test_fake_region_moves_against_drift(temporal):
    for s in temporal:
        if s.label != FAKE:
            continue
        f = flow.farneback_flow(gray(s.frames[0]), gray(s.frames[1]))
        drift = np.median(f[~s.mask], axis=0)
        dev = np.hypot(*(f - drift).transpose(2, 0, 1))
        assert dev[s.mask].mean() > 2 * dev[~s.mask].mean()


def test_real_flow_is_uniform(temporal):
    for s in temporal:
        if s.label == REAL:
            f = flow.farneback_flow(gray(s.frames[0]), gray(s.frames[1]))
            # the outer 4 px see content entering the frame
            assert f[4:-4, 4:-4].reshape(-1, 2).std(axis=0).max() < 0.5


def test_fixed_patch_size_mask():
    ds = synth.gen_spatial_dataset(SynthConfig(n_samples=20, patch_min=16, patch_max=16, seed=1))
    for s in ds:
        if s.label == FAKE:
            m = synth.ground_truth_mask(s)
            assert m.sum() == 256 and m.shape == s.frames[0].shape[:2]
            rows, cols = np.nonzero(m)
            assert rows.min() >= 0 and cols.max() < m.shape[1]


def test_ground_truth_mask_rejects_real(spatial):
    real = next(s for s in spatial if s.label == REAL)
    with pytest.raises(ValueError, match="real"):
        synth.ground_truth_mask(real)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(image_size=16, patch_min=14, patch_max=20)
    with pytest.raises(ValueError):
        synth.gen_temporal_dataset(SynthConfig(seq_len=1))


def test_region_codes_follow_template(spatial):
    template = synth.region_template(64)
    for s in spatial:
        if s.label == FAKE:
            rows, cols = np.nonzero(s.mask)
            cy, cx = rows.min() + (rows.max() - rows.min() + 1) // 2, cols.min() + (cols.max() - cols.min() + 1) // 2
            assert synth.REGION_CODES[template[cy, cx] - 1] == s.region_code


def test_annotations_majority_names_true_region(spatial):
    rows = synth.make_annotations(spatial, n_annotators=8, seed=0)
    fakes = {s.sample_id: s.region_code for s in spatial if s.label == FAKE}
    assert {r[0] for r in rows} == set(fakes)
    for vid, code in fakes.items():
        votes = [r[2] for r in rows if r[0] == vid]
        assert len(votes) == 8 and votes.count(code) >= 5


def test_write_dataset_layout(tmp_path, temporal):
    synth.write_dataset(temporal[:3], tmp_path, synth.make_annotations(temporal[:3]))
    assert (tmp_path / "labels.csv").read_text().splitlines()[0] == "sample_id,label,region_code"
    for s in temporal[:3]:
        d = tmp_path / s.sample_id
        assert len(list(d.glob("frame_*.ppm"))) == len(s.frames)
        assert (d / "mask.pgm").exists() and (d / "roi.csv").exists()
