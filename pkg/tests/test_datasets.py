import json

import numpy as np
import pytest

from reis_sim.datasets import (
    BlobModel,
    DataError,
    DatasetManifest,
    generate_dataset,
    iter_clustered,
    make_clustered,
    make_documents,
    read_documents,
    read_vectors,
    write_documents,
    write_vectors,
)


def test_vector_file_round_trip(tmp_path, rng):
    x = rng.standard_normal((17, 24)).astype(np.float32)
    p = write_vectors(tmp_path / "v.rvec", x)
    raw = p.read_bytes()
    assert raw[:4] == b"RVEC"
    assert int.from_bytes(raw[4:8], "little") == 24
    assert int.from_bytes(raw[8:16], "little") == 17
    assert len(raw) == 16 + 17 * 24 * 4
    np.testing.assert_array_equal(read_vectors(p), x)
    np.testing.assert_array_equal(read_vectors(p, mmap=True), x)


def test_vector_file_errors(tmp_path, rng):
    p = write_vectors(tmp_path / "v.rvec", rng.standard_normal((3, 4)))
    raw = p.read_bytes()
    (tmp_path / "short.rvec").write_bytes(raw[:-4])
    (tmp_path / "magic.rvec").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "empty.rvec").write_bytes(b"RVEC" + bytes(12))
    (tmp_path / "tiny.rvec").write_bytes(b"RV")
    for name in ("short", "magic", "empty", "tiny"):
        with pytest.raises(DataError):
            read_vectors(tmp_path / f"{name}.rvec")


def test_document_file_round_trip(tmp_path):
    docs = ["alpha", "", "ünïcode", b"\x00raw"]
    p = write_documents(tmp_path / "d.bin", docs)
    assert read_documents(p) == [b"alpha", b"", "ünïcode".encode(), b"\x00raw"]
    p.write_bytes(p.read_bytes()[:-2])
    with pytest.raises(DataError):
        read_documents(p)


def test_generator_deterministic_and_chunked():
    a = make_clustered(20_000, 32, 5, seed=9)
    b = make_clustered(20_000, 32, 5, seed=9)
    assert a.dtype == np.float32 and a.shape == (20_000, 32)
    np.testing.assert_array_equal(a, b)
    # prefixes agree: each chunk has its own stream
    np.testing.assert_array_equal(make_clustered(100, 32, 5, seed=9), a[:100])
    assert sum(len(c) for c in iter_clustered(20_000, 32, 5, seed=9)) == 20_000
    assert not np.array_equal(make_clustered(100, 32, 5, seed=10), a[:100])


def test_generator_is_clustered():
    m = BlobModel.create(64, 4, seed=2, noise=0.1, spread=0.2)
    x = m.chunk(0, 2000)
    d = ((x[:, None, :] - m.centers[None]) ** 2).sum(-1)
    nearest = d.min(axis=1)
    others = np.sort(d, axis=1)[:, 1]
    assert (nearest * 4 < others).mean() > 0.99
    with pytest.raises(ValueError):
        BlobModel.create(0, 4)
    with pytest.raises(ValueError):
        make_clustered(0, 4, 2)


def test_make_documents():
    docs = make_documents(3)
    assert docs == [b"doc-0", b"doc-1", b"doc-2"]
    padded = make_documents(30, 5000)
    assert all(len(d) == 5000 and d.startswith(f"doc-{i} ".encode()) for i, d in enumerate(padded))


def test_generate_dataset_byte_identical(tmp_path):
    a = generate_dataset(tmp_path / "a", n=1000, d=64, clusters=8, seed=7, n_queries=10)
    generate_dataset(tmp_path / "b", n=1000, d=64, clusters=8, seed=7, n_queries=10)
    for f in ("vectors.rvec", "documents.bin", "queries.rvec", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert a.n_vectors == 1000 and a.D == 64 and a.n_queries == 10
    a.validate(tmp_path / "a", page_size=16384)
    q = read_vectors(tmp_path / "a" / "queries.rvec")
    x = read_vectors(tmp_path / "a" / "vectors.rvec")
    np.testing.assert_array_equal(np.vstack([q, x]), make_clustered(1010, 64, 8, seed=7))


def test_manifest_validation(tmp_path):
    m = generate_dataset(tmp_path, n=50, d=16, clusters=2, n_queries=0, chunk_bytes=300)
    assert m.queries is None
    back = DatasetManifest.load(tmp_path / "manifest.json")
    assert back == m
    with pytest.raises(DataError):
        back.validate(tmp_path, page_size=100)
    bad = DatasetManifest(**{**json.loads((tmp_path / "manifest.json").read_text()), "n_vectors": 51})
    with pytest.raises(DataError):
        bad.validate(tmp_path)
    write_documents(tmp_path / "documents.bin", ["x"] * 49)
    with pytest.raises(DataError):
        m.validate(tmp_path)
    (tmp_path / "junk.json").write_text("{not json")
    with pytest.raises(DataError):
        DatasetManifest.load(tmp_path / "junk.json")
