""":mod:`daodet.runcache`
========================

Persistent cache of finished training runs, keyed by the hash of (resolved
config, dataset manifest hash, code version). ``compare`` and ``ablate`` look
runs up here before training.

Two backends share one interface:

* :class:`MemoryRunCache`, a plain dict (optionally mirrored to a single
  file), for tests and as fallback;
* :class:`LeveldbRunCache`, on disk through :mod:`plyvel`.

A summary is any JSON-serializable mapping (run directory, AP50, curve...).
"""
import json
import logging
import os
import struct

try:
    import plyvel
except ImportError:  # pragma: no cover
    plyvel = None

__all__ = ["RunCacheError", "MemoryRunCache", "LeveldbRunCache", "cache_key"]

logger = logging.getLogger(__name__)

VALUE_MAGIC = b"DRUN"
VALUE_VERSION = 1
VALUE_PACKER = struct.Struct("<4sH")
RECORD_PACKER = struct.Struct("<II")


class RunCacheError(ValueError):
    """ A stored entry cannot be decoded. """


def to_bytes(o):
    """ Keys are stored as bytes; anything else goes through ``str``. """
    return o if type(o) == bytes else str(o).encode()


def cache_key(config_digest, manifest_digest, version):
    """ Key of a run: the three digests joined by ``:``. """
    return "%s:%s:%s" % (config_digest, manifest_digest, version)


def encode_summary(summary):
    payload = json.dumps(summary, sort_keys=True).encode()
    return VALUE_PACKER.pack(VALUE_MAGIC, VALUE_VERSION) + payload


def decode_summary(data, key=None):
    if len(data) < VALUE_PACKER.size:
        raise RunCacheError("truncated cache entry %r" % (key,))
    magic, version = VALUE_PACKER.unpack_from(data)
    if magic != VALUE_MAGIC or version != VALUE_VERSION:
        raise RunCacheError("cache entry %r has magic %r version %d" % (key, magic, version))
    try:
        return json.loads(data[VALUE_PACKER.size:].decode())
    except ValueError as e:
        raise RunCacheError("cache entry %r is not valid JSON: %s" % (key, e)) from e


class MemoryRunCache:
    """ In-memory run cache. Values are kept encoded so both backends return
    fresh, equal copies.

    :param path: optional directory; when given, entries are loaded from and
        written back to ``path/runs.cache`` on every change.
    """

    FILE_NAME = "runs.cache"

    def __init__(self, path=None):
        self.path = path
        self._entries = {}
        if path is not None and os.path.isfile(self.file_path):
            self._load()

    @property
    def file_path(self):
        return os.path.join(self.path, self.FILE_NAME)

    def _load(self):
        with open(self.file_path, "rb") as f:
            data = f.read()
        offset = 0
        while offset < len(data):
            if offset + RECORD_PACKER.size > len(data):
                raise RunCacheError("%s is truncated" % self.file_path)
            key_len, value_len = RECORD_PACKER.unpack_from(data, offset)
            offset += RECORD_PACKER.size
            end = offset + key_len + value_len
            if end > len(data):
                raise RunCacheError("%s is truncated" % self.file_path)
            key = data[offset:offset + key_len]
            self._entries[key] = data[offset + key_len:end]
            offset = end
        logger.debug("loaded %d cached runs from %s", len(self._entries), self.file_path)

    def _dump(self):
        if self.path is None:
            return
        os.makedirs(self.path, exist_ok=True)
        tmp = self.file_path + ".tmp"
        with open(tmp, "wb") as f:
            for key in sorted(self._entries):
                value = self._entries[key]
                f.write(RECORD_PACKER.pack(len(key), len(value)))
                f.write(key)
                f.write(value)
        os.replace(tmp, self.file_path)

    def get(self, key):
        """ :returns: the stored summary, or None. """
        data = self._entries.get(to_bytes(key))
        return None if data is None else decode_summary(data, key)

    def put(self, key, summary):
        self._entries[to_bytes(key)] = encode_summary(summary)
        self._dump()

    def delete(self, key):
        if self._entries.pop(to_bytes(key), None) is not None:
            self._dump()

    def keys(self):
        return sorted(k.decode() for k in self._entries)

    def clear(self):
        self._entries.clear()
        self._dump()

    def close(self):
        pass

    def __contains__(self, key):
        return to_bytes(key) in self._entries

    def __len__(self):
        return len(self._entries)


class LeveldbRunCache(MemoryRunCache):
    def __init__(self, path):
        """ Open (or create) a run cache stored in the LevelDB directory
        ``path``.
        """
        if plyvel is None:
            raise ImportError("the LevelDB run cache needs plyvel")
        self.path = path
        if not os.path.isdir(path):
            os.makedirs(path)
        self.db = plyvel.DB(path, create_if_missing=True)

    def get(self, key):
        data = self.db.get(to_bytes(key))
        return None if data is None else decode_summary(data, key)

    def put(self, key, summary):
        self.db.put(to_bytes(key), encode_summary(summary))

    def delete(self, key):
        self.db.delete(to_bytes(key))

    def keys(self):
        return [k.decode() for k in self.db.iterator(include_value=False)]

    def clear(self):
        """ Delete every entry of the database. """
        for key in self.db.iterator(include_value=False):
            self.db.delete(key)

    def close(self):
        self.db.close()

    def __contains__(self, key):
        return self.db.get(to_bytes(key)) is not None

    def __len__(self):
        return sum(1 for _ in self.db.iterator(include_value=False))
