import struct
import zlib

import numpy as np
import pytest
from scipy import ndimage

from seqseg import metrics
from seqseg.synthdata import (HEADER_SIZE, FormatError, GenConfig, GenerationError, MaskVolume, Volume, ct_config,
                              decode_volume, encode_volume, generate_case, generate_suite, load_dataset, mri_config,
                              perturb_sequence, read_volume, save_dataset, slice_triplets, volume_triplets,
                              write_volume)


def test_generation_is_deterministic():
    a = generate_case(ct_config(seed=5))
    b = generate_case(ct_config(seed=5))
    assert encode_volume(a[0]) == encode_volume(b[0])
    assert encode_volume(a[1]) == encode_volume(b[1])
    assert not np.array_equal(a[1].voxels, generate_case(ct_config(seed=6))[1].voxels)


def test_noise_free_image_is_two_valued():
    img, mask = generate_case(GenConfig(noise_sigma=0.0, distractors=0, seed=2))
    assert set(np.unique(img.voxels)) == {0.3, 0.6}
    np.testing.assert_array_equal(img.voxels == 0.6, mask.voxels == 1)


def test_distractors_share_intensity_but_stay_off_the_organ():
    img, mask = generate_case(GenConfig(noise_sigma=0.0, distractors=4, seed=3))
    bright = img.voxels == 0.6
    assert (bright & ~mask.voxels.astype(bool)).any()
    labels, _ = ndimage.label(bright)
    organ_labels = set(np.unique(labels[mask.voxels == 1]))
    assert len(organ_labels) == 1
    np.testing.assert_array_equal(labels == organ_labels.pop(), mask.voxels == 1)


def test_mask_is_single_component_and_small_over_many_seeds():
    fractions = []
    for seed in range(100):
        _, mask = generate_case(ct_config(seed=seed))
        _, n = ndimage.label(mask.voxels, structure=ndimage.generate_binary_structure(3, 1))
        assert n == 1
        fractions.append(mask.voxels.mean())
    assert max(fractions) < 0.10


def test_inter_slice_avd_calibration():
    values = []
    for img, mask in generate_suite(30, ct_config()):
        values += metrics.inter_slice_avd(mask.voxels, mask.spacing_mm)
    assert 0.2 <= np.mean(values) <= 0.6


def test_mri_config_drifts_more():
    ct = [d for _, m in generate_suite(10, ct_config()) for d in metrics.inter_slice_avd(m.voxels, (1.0, 1.0))]
    mri = [d for _, m in generate_suite(10, mri_config()) for d in metrics.inter_slice_avd(m.voxels, (1.0, 1.0))]
    assert np.mean(mri) > np.mean(ct)


def test_generation_errors():
    with pytest.raises(GenerationError):
        generate_case(GenConfig(dims=(4, 16, 16)))
    with pytest.raises(ValueError):
        GenConfig(noise_sigma=-1.0)
    with pytest.raises(ValueError):
        GenConfig(radius_range=(5.0, 3.0))


def test_slice_triplets_edges_and_interior():
    vox = np.arange(4 * 2 * 2, dtype=float).reshape(4, 2, 2)
    t0 = slice_triplets(vox, 0)
    np.testing.assert_array_equal(t0[0], t0[1])
    t3 = slice_triplets(vox, 3)
    np.testing.assert_array_equal(t3[2], t3[1])
    np.testing.assert_array_equal(slice_triplets(vox, 2), vox[1:4])
    stacked = volume_triplets(Volume(vox / 100))
    assert stacked.shape == (4, 3, 2, 2)
    for t in range(4):
        np.testing.assert_array_equal(stacked[t, 1], vox[t] / 100)
    with pytest.raises(IndexError):
        slice_triplets(vox, 4)


def test_perturb_sequence():
    p = np.random.default_rng(0).uniform(size=(5, 1, 3, 3))
    np.testing.assert_array_equal(perturb_sequence(p, []), p)
    z = perturb_sequence(p, [2])
    assert not z[2].any()
    np.testing.assert_array_equal(np.delete(z, 2, axis=0), np.delete(p, 2, axis=0))
    np.testing.assert_array_equal(perturb_sequence(p, [1], "halve")[1], p[1] * 0.5)
    with pytest.raises(IndexError):
        perturb_sequence(p, [5])
    with pytest.raises(ValueError):
        perturb_sequence(p, [1], "drop")


def test_known_bytes_fixture():
    payload = struct.pack("<2d", 0.25, 0.75)
    raw = b"SVOL" + struct.pack("<HH3I3dI", 1, 1, 2, 1, 1, 2.5, 1.0, 1.0, zlib.crc32(payload)) + payload
    vol = decode_volume(raw)
    assert isinstance(vol, Volume) and vol.dims == (2, 1, 1)
    assert vol.voxels[:, 0, 0].tolist() == [0.25, 0.75]
    assert vol.spacing_mm == (2.5, 1.0, 1.0)
    assert encode_volume(vol) == raw
    assert HEADER_SIZE == 48


def test_round_trip_bit_exact(tmp_path):
    img, mask = generate_case(ct_config(seed=1))
    write_volume(tmp_path / "i.svol", img)
    write_volume(tmp_path / "m.svol", mask)
    img2, mask2 = read_volume(tmp_path / "i.svol"), read_volume(tmp_path / "m.svol")
    assert img2.voxels.tobytes() == img.voxels.tobytes() and img2.spacing_mm == img.spacing_mm
    assert isinstance(mask2, MaskVolume) and np.array_equal(mask2.voxels, mask.voxels)


def _raw():
    return encode_volume(MaskVolume(np.array([[[1, 0], [0, 1]]], dtype=np.uint8)))


@pytest.mark.parametrize("mutate,offset", [
    (lambda r: b"XVOL" + r[4:], 0),
    (lambda r: r[:4] + struct.pack("<H", 2) + r[6:], 4),
    (lambda r: r[:6] + struct.pack("<H", 9) + r[8:], 6),
    (lambda r: r[:8] + struct.pack("<I", 0) + r[12:], 8),
    (lambda r: r[:20] + struct.pack("<d", -1.0) + r[28:], 20),
    (lambda r: r[:-1], HEADER_SIZE),
    (lambda r: r[:12] + struct.pack("<I", 3) + r[16:], HEADER_SIZE),
    (lambda r: r[:-1] + b"\x00", 44),
    (lambda r: r[:10], 10),
])
def test_corruption_rejected_with_offset(mutate, offset):
    with pytest.raises(FormatError) as err:
        decode_volume(mutate(_raw()))
    assert err.value.offset == offset


def test_non_binary_mask_payload_rejected():
    raw = bytearray(_raw())
    raw[HEADER_SIZE] = 7
    raw[44:48] = struct.pack("<I", zlib.crc32(bytes(raw[HEADER_SIZE:])))
    with pytest.raises(FormatError, match="value 7"):
        decode_volume(bytes(raw))


def test_dataset_directory_round_trip(tmp_path):
    cases = generate_suite(3, ct_config(), seed=4)
    paths = save_dataset(tmp_path, cases)
    assert len(paths) == 6
    loaded = load_dataset(tmp_path)
    assert [c[0] for c in loaded] == ["case_000", "case_001", "case_002"]
    for (img, mask), (_, img2, mask2) in zip(cases, loaded):
        assert encode_volume(img) == encode_volume(img2)
        assert encode_volume(mask) == encode_volume(mask2)
