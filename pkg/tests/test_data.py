import numpy as np
import pytest

from sacnet.data import (gen_synthetic, image_to_ppm, load_dataset, mask_to_pgm, pgm_to_mask, ppm_to_image,
                         read_array, save_dataset, split, stack, write_array)


def test_same_seed_same_bytes():
    a, b = gen_synthetic(5, 4), gen_synthetic(5, 4)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()
    assert gen_synthetic(6, 1)[0].image.tobytes() != a[0].image.tobytes()


def test_class_frequency_order():
    _, masks = stack(gen_synthetic(0, 100))
    freq = np.bincount(masks.ravel(), minlength=4)
    assert freq[0] > freq[1] > freq[2] > freq[3] > 0


def test_square_absent_in_some_samples():
    present = [bool((s.mask == 3).any()) for s in gen_synthetic(0, 100)]
    assert 50 < sum(present) < 90


@pytest.mark.parametrize("C,S", [(2, 16), (4, 32), (6, 24)])
def test_invariants(C, S):
    for s in gen_synthetic(1, 5, S, C):
        assert s.image.shape == (3, S, S) and s.mask.shape == (S, S)
        assert s.mask.max() < C
        assert np.all(np.isfinite(s.image)) and s.image.min() >= 0 and s.image.max() <= 1


@pytest.mark.parametrize("kw", [dict(classes=1), dict(size=8), dict(count=0)])
def test_invalid_dims(kw):
    args = dict(seed=0, count=2, size=32, classes=4)
    args.update(kw)
    with pytest.raises(ValueError):
        gen_synthetic(**args)


def test_split():
    tr, va = split(list(range(10)))
    assert tr == list(range(8)) and va == [8, 9]


@pytest.mark.parametrize("dtype", [np.uint8, np.float32, np.float64, np.int32])
def test_array_round_trip(tmp_path, dtype):
    arr = (np.arange(24).reshape(2, 3, 4) * 3).astype(dtype)
    write_array(tmp_path / "a.bin", arr)
    back = read_array(tmp_path / "a.bin")
    assert back.dtype == arr.dtype and back.tobytes() == arr.tobytes()


def test_array_errors(tmp_path):
    with pytest.raises(ValueError):
        write_array(tmp_path / "b.bin", np.zeros(2, dtype=np.complex64))
    (tmp_path / "c.bin").write_bytes(b"XXXX\x01\x01")
    with pytest.raises(ValueError, match="bad magic"):
        read_array(tmp_path / "c.bin")
    write_array(tmp_path / "d.bin", np.zeros(4, np.float32))
    (tmp_path / "d.bin").write_bytes((tmp_path / "d.bin").read_bytes()[:-1])
    with pytest.raises(ValueError, match="payload"):
        read_array(tmp_path / "d.bin")


def test_dataset_round_trip(tmp_path):
    samples = gen_synthetic(2, 3)
    save_dataset(samples, tmp_path / "ds", {"seed": 2})
    back = load_dataset(tmp_path / "ds")
    for s, b in zip(samples, back):
        assert np.array_equal(s.mask, b.mask)
        np.testing.assert_allclose(b.image, s.image, atol=1e-7)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope")


def test_pnm_round_trips(tmp_path):
    s = gen_synthetic(3, 1)[0]
    image_to_ppm(s.image, tmp_path / "x.ppm")
    np.testing.assert_allclose(ppm_to_image(tmp_path / "x.ppm"), s.image, atol=0.5 / 255 + 1e-12)
    mask_to_pgm(s.mask, tmp_path / "m.pgm")
    assert np.array_equal(pgm_to_mask(tmp_path / "m.pgm"), s.mask)
    with pytest.raises(ValueError):
        pgm_to_mask(tmp_path / "x.ppm")
