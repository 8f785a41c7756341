import numpy as np
import pytest

from macsel.data import Dataset, load_dataset, make_blobs, read_idx, save_idx_dataset, write_idx
from macsel.errors import ParseError


def test_idx_roundtrip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (10, 28, 28)).astype(np.uint8)
    write_idx(tmp_path / "train-images-idx3-ubyte", imgs)
    write_idx(tmp_path / "train-labels-idx1-ubyte", np.arange(10, dtype=np.uint8))
    ds = load_dataset(tmp_path / "train-images-idx3-ubyte")
    assert ds.features.shape == (10, 784)
    assert np.allclose(ds.features * 255, imgs.reshape(10, -1))
    assert ds.labels.tolist() == list(range(10))


def test_idx_truncated(tmp_path):
    p = tmp_path / "x.idx"
    write_idx(p, np.zeros((4, 3), dtype=np.uint8))
    p.write_bytes(p.read_bytes()[:-2])
    with pytest.raises(ParseError, match="needs 12 bytes, found 10"):
        read_idx(p)


def test_idx_bad_magic(tmp_path):
    p = tmp_path / "x.idx"
    p.write_bytes(b"\x01\x00\x08\x01\x00\x00\x00\x01\x00")
    with pytest.raises(ParseError, match="byte 0"):
        read_idx(p)


def test_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("label,f0,f1\n3,0.1,0.2\n")
    ds = load_dataset(p)
    assert ds.features.shape == (1, 2) and ds.labels.tolist() == [3]
    p.write_text("label,f0,f1\n3,0.1\n")
    with pytest.raises(ParseError, match="line 2"):
        load_dataset(p)


def test_csv_with_split(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("label,f0,split\n1,0.5,train\n0,0.25,test\n")
    ds = load_dataset(p)
    assert len(ds.train) == 1 and len(ds.test) == 1


def test_directory_roundtrip(tmp_path):
    ds = make_blobs(50, n_features=16, n_classes=3, seed=1)
    ds = Dataset(np.rint(ds.features * 255) / 255, ds.labels, ds.split)
    save_idx_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert len(back) == 50 and len(back.test) == len(ds.test)
    assert np.allclose(np.sort(back.features.sum(1)), np.sort(ds.features.sum(1)))


def test_dataset_validation():
    with pytest.raises(ParseError):
        Dataset(np.array([[np.nan]]), [0], ["train"])
    with pytest.raises(ParseError):
        Dataset(np.zeros((2, 2)), [0], ["train"])
