import numpy as np
import pytest

from storage import (
    BundleStore,
    ContainerFormatError,
    decode_container,
    dump_json,
    encode_container,
    expect_count,
    load_json,
    write_container,
    read_container,
)

LAYOUT = (("size", "I"), ("scale", "d"))


def test_container_round_trip():
    payload = np.array([1.5, -2.0, np.pi])
    data = encode_container(b"TEST", LAYOUT, {"size": 3, "scale": 0.25}, payload)
    header, decoded = decode_container(data, b"TEST", LAYOUT)
    assert header == {"size": 3, "scale": 0.25}
    np.testing.assert_array_equal(decoded, payload)


def test_container_rejects_bad_input():
    data = encode_container(b"TEST", LAYOUT, {"size": 1, "scale": 1.0}, np.zeros(1))
    with pytest.raises(ContainerFormatError, match="魔数"):
        decode_container(data, b"ABCD", LAYOUT)
    with pytest.raises(ContainerFormatError):
        decode_container(data[:6], b"TEST", LAYOUT)
    with pytest.raises(ContainerFormatError):
        decode_container(data + b"\x00", b"TEST", LAYOUT)


def test_write_container_replaces_atomically(tmp_path):
    path = tmp_path / "nested" / "x.bin"
    write_container(path, b"TEST", LAYOUT, {"size": 2, "scale": 1.0}, np.ones(2))
    header, payload = read_container(path, b"TEST", LAYOUT)
    assert header["size"] == 2
    np.testing.assert_array_equal(payload, np.ones(2))
    assert not list(tmp_path.glob("**/*.tmp"))


def test_expect_count():
    expect_count(np.zeros(4), 4, "x")
    with pytest.raises(ContainerFormatError):
        expect_count(np.zeros(4), 5, "x")


def test_dump_json_is_deterministic(tmp_path):
    first, second = tmp_path / "a.json", tmp_path / "b.json"
    dump_json(first, {"b": 1, "a": [1, 2]})
    dump_json(second, {"a": [1, 2], "b": 1})
    assert first.read_bytes() == second.read_bytes()
    assert load_json(first) == {"a": [1, 2], "b": 1}


def test_bundle_store_backs_up_existing_files(tmp_path):
    store = BundleStore(tmp_path / "model", max_backups=2)
    store.prepare(["a.bin"])
    assert store.latest_backup() is None
    store.path("a.bin").write_text("v1")
    store.prepare(["a.bin"])
    assert not store.path("a.bin").exists()
    backup = store.latest_backup()
    assert (backup / "a.bin").read_text() == "v1"


def test_bundle_store_prunes_old_backups(tmp_path):
    store = BundleStore(tmp_path, max_backups=2)
    for round_ in range(4):
        store.path("a.bin").write_text(str(round_))
        store.prepare(["a.bin"])
    backups = [p for p in (tmp_path / "old").iterdir() if p.is_dir()]
    assert 1 <= len(backups) <= 2
    assert (store.latest_backup() / "a.bin").read_text() == "3"
