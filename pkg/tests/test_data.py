import filecmp

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medttt.data import (
    DataError,
    NetpbmError,
    SegmentationSample,
    TilingError,
    UnsupportedFormatError,
    batches,
    decode_pnm,
    encode_pnm,
    flip_sample,
    load_pgm,
    load_split,
    read_manifest,
    save_pgm,
    split_sizes,
    synth_dataset,
)


def test_p5_scaling():
    img = decode_pnm(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    assert np.allclose(img, [[0, 1], [128 / 255, 64 / 255]])
    assert round(img[1, 0], 3) == 0.502 and round(img[1, 1], 3) == 0.251


def test_header_comments_and_p6():
    buf = b"P6 # colour\n1 2\n# max\n255\n" + bytes([1, 2, 3, 4, 5, 6])
    img = decode_pnm(buf)
    assert img.shape == (3, 2, 1)
    assert np.allclose(img[:, 1, 0] * 255, [4, 5, 6])


def test_round_trip_on_quantized_planes(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(5, 7), (3, 4, 6)]:
        plane = rng.integers(0, 256, shape) / 255.0
        save_pgm(plane, tmp_path / "x.pnm")
        assert np.array_equal(load_pgm(tmp_path / "x.pnm"), plane)


def test_maxval_and_magic_rejected():
    with pytest.raises(UnsupportedFormatError):
        decode_pnm(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(UnsupportedFormatError):
        decode_pnm(b"P2\n1 1\n255\n0")


def test_every_truncation_rejected_with_offset():
    buf = encode_pnm(np.random.default_rng(1).integers(0, 256, (3, 4)) / 255.0)
    for n in range(len(buf)):
        with pytest.raises(NetpbmError, match="byte offset"):
            decode_pnm(buf[:n])


def test_garbage_header_rejected():
    with pytest.raises(NetpbmError) as exc:
        decode_pnm(b"P5\n2 x\n255\n")
    assert exc.value.offset == 5


def test_synth_counts_and_determinism(tmp_path):
    m1 = synth_dataset(16, 64, 3, tmp_path / "a")
    m2 = synth_dataset(16, 64, 3, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 33
    for f in files:
        assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)
    man = read_manifest(m1)
    assert len(man.rows) == 16
    assert m2.read_bytes() == m1.read_bytes() and b"\r" not in m1.read_bytes()


def test_synth_foreground_fraction(tmp_path):
    man = read_manifest(synth_dataset(24, 32, 5, tmp_path, tile=2))
    for split in ("train", "val"):
        for s in load_split(man, split):
            assert 0.02 <= s.mask.mean() <= 0.5


def test_synth_rejects_untileable_size(tmp_path):
    with pytest.raises(TilingError):
        synth_dataset(4, 60, 0, tmp_path)


def test_split_sizes_largest_remainder():
    assert split_sizes(64, (0.8, 0.2, 0.0)) == [51, 13, 0]
    assert split_sizes(10, (1, 1, 1)) == [4, 3, 3]
    assert sum(split_sizes(7, (0.5, 0.3, 0.2))) == 7


def _write_manifest(path, text):
    path.write_bytes(text.encode())
    return path


def test_manifest_validation(tmp_path):
    synth_dataset(2, 16, 0, tmp_path, tile=1)
    with pytest.raises(DataError, match="header"):
        read_manifest(_write_manifest(tmp_path / "m1.csv", "a,b,c,d\n"))
    with pytest.raises(DataError, match="duplicate"):
        read_manifest(_write_manifest(tmp_path / "m2.csv", "id,image,mask,split\nx,images/synth_0000.pgm,masks/synth_0000.pgm,train\nx,images/synth_0000.pgm,masks/synth_0000.pgm,val\n"))
    with pytest.raises(DataError, match="split"):
        read_manifest(_write_manifest(tmp_path / "m3.csv", "id,image,mask,split\nx,images/synth_0000.pgm,masks/synth_0000.pgm,dev\n"))
    with pytest.raises(DataError, match="missing"):
        read_manifest(_write_manifest(tmp_path / "m4.csv", "id,image,mask,split\nx,nope.pgm,masks/synth_0000.pgm,train\n"))


def _samples(n, size=8, seed=0):
    rng = np.random.default_rng(seed)
    return [SegmentationSample(rng.random((1, size, size)), (rng.random((size, size)) < 0.3).astype(float), f"s{i}") for i in range(n)]


def test_batches_shapes_and_order():
    samples = _samples(10)
    a = [ids for _, _, ids in batches(samples, 4, seed=1, epoch=2)]
    b = [ids for _, _, ids in batches(samples, 4, seed=1, epoch=2)]
    assert a == b
    imgs, masks, _ = next(batches(samples, 4, seed=1))
    assert imgs.shape == (4, 1, 8, 8) and masks.shape == (4, 8, 8)
    assert sorted(sum(a, [])) == sorted(s.id for s in samples)


def test_empty_split_rejected():
    with pytest.raises(DataError):
        next(batches([], 4, seed=0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.booleans(), st.booleans())
def test_flip_involution_and_mask_preserved(seed, h, v):
    s = _samples(1, seed=seed)[0]
    img, msk = flip_sample(s.image, s.mask, h, v)
    assert set(np.unique(msk)) <= {0.0, 1.0} and msk.sum() == s.mask.sum()
    back_img, back_msk = flip_sample(img, msk, h, v)
    assert np.array_equal(back_img, s.image) and np.array_equal(back_msk, s.mask)


def test_flip_augmentation_is_seeded():
    samples = _samples(6)
    a = [x for x, _, _ in batches(samples, 3, seed=4, augment="flips")]
    b = [x for x, _, _ in batches(samples, 3, seed=4, augment="flips")]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_sample_contract():
    with pytest.raises(DataError):
        SegmentationSample(np.zeros((1, 4, 4)), np.full((4, 4), 0.5), "bad")
    with pytest.raises(DataError):
        SegmentationSample(np.zeros((1, 4, 4)), np.zeros((4, 5)), "bad")
