import os

import pytest

from daodet.runcache import LeveldbRunCache, MemoryRunCache, RunCacheError, cache_key, decode_summary, encode_summary

from conftest import parametrize_cache

SUMMARY = {"run_dir": "runs/aldi_pp-seed0-0123abcd", "ap50": 0.25, "metric_curve": [[0, 0.0], [10, 0.25]]}


def test_cache_key():
    assert cache_key("abc", "def", "0.3") == "abc:def:0.3"


@parametrize_cache(create_dir=None)
def test_get_put(cache):
    assert cache.get("k") is None
    assert "k" not in cache
    cache.put("k", SUMMARY)
    assert cache.get("k") == SUMMARY
    assert "k" in cache
    assert len(cache) == 1
    # stored copies are independent
    cache.get("k")["ap50"] = 1.0
    assert cache.get("k")["ap50"] == 0.25


@parametrize_cache()
def test_keys_delete_clear(cache):
    for key in ("b:1:0.3", "a:1:0.3", "c:1:0.3"):
        cache.put(key, {"key": key})
    assert cache.keys() == ["a:1:0.3", "b:1:0.3", "c:1:0.3"]
    cache.put("a:1:0.3", {"key": "again"})
    assert len(cache) == 3
    assert cache.get("a:1:0.3") == {"key": "again"}
    cache.delete("b:1:0.3")
    cache.delete("missing")
    assert cache.keys() == ["a:1:0.3", "c:1:0.3"]
    cache.clear()
    assert len(cache) == 0
    assert cache.keys() == []


@parametrize_cache(volatile=False)
def test_reopen(cache):
    cache.put("k", SUMMARY)
    cache.close()
    reopened = LeveldbRunCache(cache.path)
    try:
        assert reopened.get("k") == SUMMARY
        assert reopened.keys() == ["k"]
    finally:
        reopened.close()


def test_decode_errors():
    data = encode_summary(SUMMARY)
    assert decode_summary(data) == SUMMARY
    with pytest.raises(RunCacheError):
        decode_summary(data[:3], "k")
    with pytest.raises(RunCacheError):
        decode_summary(b"XXXX" + data[4:], "k")
    with pytest.raises(RunCacheError):
        decode_summary(data[:-2], "k")


@parametrize_cache()
def test_corrupt_entry(cache):
    key = b"bad"
    if hasattr(cache, "db"):
        cache.db.put(key, b"DRUN\x01\x00{")
    else:
        cache._entries[key] = b"DRUN\x01\x00{"
    with pytest.raises(RunCacheError):
        cache.get("bad")


def test_memory_cache_file(workdir):
    path = os.path.join(workdir, "cache")
    cache = MemoryRunCache(path)
    assert len(cache) == 0
    cache.put("b:1:0.3", SUMMARY)
    cache.put("a:1:0.3", {"key": "a"})
    cache.close()
    assert os.path.isfile(os.path.join(path, MemoryRunCache.FILE_NAME))

    reopened = MemoryRunCache(path)
    assert reopened.keys() == ["a:1:0.3", "b:1:0.3"]
    assert reopened.get("b:1:0.3") == SUMMARY
    reopened.delete("a:1:0.3")
    assert MemoryRunCache(path).keys() == ["b:1:0.3"]
    reopened.clear()
    assert len(MemoryRunCache(path)) == 0

    # without a path nothing is written
    MemoryRunCache().put("k", SUMMARY)
    assert os.listdir(workdir) == ["cache"]


def test_memory_cache_truncated_file(workdir):
    cache = MemoryRunCache(workdir)
    cache.put("k", SUMMARY)
    file_path = os.path.join(workdir, MemoryRunCache.FILE_NAME)
    with open(file_path, "rb") as f:
        data = f.read()
    with open(file_path, "wb") as f:
        f.write(data[:-5])
    with pytest.raises(RunCacheError):
        MemoryRunCache(workdir)
