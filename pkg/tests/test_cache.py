import numpy as np

from dualspace import FeatureCache, cache_key


def test_round_trip_preserves_float32_payload(tmp_path):
    cache = FeatureCache(tmp_path)
    values = np.random.default_rng(0).normal(size=(7, 5)).astype(np.float32)
    cache.put("abc", values, {"backbone": "b", "dataset": "d", "split_tag": "train"})
    out = cache.get("abc")
    assert out is not None
    assert np.array_equal(out, values.astype(np.float64))
    meta = cache.meta("abc")
    assert meta["shape"] == [7, 5]
    assert meta["backbone"] == "b"


def test_missing_key_returns_none(tmp_path):
    assert FeatureCache(tmp_path).get("nope") is None


def test_truncated_binary_fails_verification(tmp_path, caplog):
    cache = FeatureCache(tmp_path)
    values = np.ones((4, 4), dtype=np.float32)
    cache.put("k", values, {})
    bin_path = tmp_path / "k.bin"
    bin_path.write_bytes(bin_path.read_bytes()[:10])
    assert cache.get("k") is None
    assert any("corrupt" in r.message for r in caplog.records)


def test_garbled_sidecar_fails_verification(tmp_path):
    cache = FeatureCache(tmp_path)
    cache.put("k", np.ones((2, 2), dtype=np.float32), {})
    (tmp_path / "k.json").write_text("{not json")
    assert cache.get("k") is None


def test_cache_key_sensitivity():
    ids = ["a", "b", "c"]
    base = cache_key("backbone-1", {"resolution": 32}, ids)
    assert cache_key("backbone-2", {"resolution": 32}, ids) != base
    assert cache_key("backbone-1", {"resolution": 64}, ids) != base
    assert cache_key("backbone-1", {"resolution": 32}, ["a", "b"]) != base
    assert cache_key("backbone-1", {"resolution": 32}, list(ids)) == base
