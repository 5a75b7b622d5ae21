""":mod:`daodet.config`
=======================

Typed configuration trees built from plain mappings (usually a YAML file),
with strict key checking, dotted-key overrides and stable hashing.

Every configurable part of ``daodet`` is a :func:`dataclasses.dataclass`.
:func:`from_dict` walks the type hints of the target class, so nested
sections, tuples and optional values are coerced the same way everywhere and
an unknown key is always reported with its full dotted path.

"""
import dataclasses
import hashlib
import json
import logging
import typing
from collections.abc import Mapping

import yaml

__all__ = [
    "ConfigError",
    "from_dict",
    "to_dict",
    "apply_overrides",
    "parse_override",
    "config_hash",
    "load_yaml",
    "dump_yaml",
]

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """ Invalid configuration value or key.

    :attr path: dotted path of the offending key (may be empty for the root).
    """

    def __init__(self, message, path=""):
        self.path = path
        if path:
            message = "%s: %s" % (path, message)
        super().__init__(message)


def _join(path, key):
    return "%s.%s" % (path, key) if path else str(key)


def _coerce(hint, value, path):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)

    if hint is typing.Any:
        return value
    if origin is typing.Union:
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError("value may not be null", path)
        candidates = [a for a in args if a is not type(None)]
        errors = []
        for candidate in candidates:
            try:
                return _coerce(candidate, value, path)
            except ConfigError as e:
                errors.append(str(e))
        raise ConfigError("no matching type (%s)" % "; ".join(errors), path)
    if dataclasses.is_dataclass(hint):
        return from_dict(hint, value, path)
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError("expected a list, got %r" % (value,), path)
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(args) != len(value):
                raise ConfigError(
                    "expected %d items, got %d" % (len(args), len(value)), path
                )
            items = [
                _coerce(a, v, "%s[%d]" % (path, i))
                for i, (a, v) in enumerate(zip(args, value))
            ]
        else:
            item_hint = args[0] if args else typing.Any
            items = [
                _coerce(item_hint, v, "%s[%d]" % (path, i)) for i, v in enumerate(value)
            ]
        return tuple(items) if origin is tuple else items
    if origin is dict:
        if not isinstance(value, Mapping):
            raise ConfigError("expected a mapping, got %r" % (value,), path)
        value_hint = args[1] if args else typing.Any
        return {str(k): _coerce(value_hint, v, _join(path, k)) for k, v in value.items()}
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError("expected a boolean, got %r" % (value,), path)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("expected an integer, got %r" % (value,), path)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("expected a number, got %r" % (value,), path)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError("expected a string, got %r" % (value,), path)
        return value
    return value


def from_dict(cls, data, path=""):
    """ Build a dataclass instance of type ``cls`` from a mapping.

    :param cls: the dataclass type to build.
    :param data: a mapping (or None, meaning "all defaults").
    :param path: dotted prefix used in error messages.
    :raises ConfigError: on unknown keys, wrongly typed values, or when the
        dataclass rejects the values in its ``__post_init__``.
    """
    if data is None:
        data = {}
    if isinstance(data, cls):
        return data
    if not isinstance(data, Mapping):
        raise ConfigError("expected a mapping, got %r" % (data,), path)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        key_path = _join(path, key)
        if key not in names:
            raise ConfigError("unknown key", key_path)
        kwargs[key] = _coerce(hints[key], value, key_path)
    try:
        return cls(**kwargs)
    except ConfigError as e:
        if path and not e.path:
            raise ConfigError(str(e), path) from e
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), path) from e


def to_dict(obj):
    """ Serialize a dataclass tree to plain python containers (dict, list,
    scalars), suitable for YAML/JSON dumps.
    """
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {
            f.name: to_dict(getattr(obj, f.name))
            for f in dataclasses.fields(obj)
            if f.init
        }
    if isinstance(obj, Mapping):
        return {str(k): to_dict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def parse_override(text):
    """ Parse a ``key=value`` command line override.

    The value is read as YAML, so ``0.25`` is a float, ``true`` a boolean and
    ``[a, b]`` a list.

    >>> parse_override("train.target_fraction=0.25")
    ('train.target_fraction', 0.25)
    """
    if "=" not in text:
        raise ConfigError("override %r should look like key=value" % text)
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError("override %r has an empty key" % text)
    return key, yaml.safe_load(raw) if raw.strip() else None


def _set_dotted(tree, key, value):
    parts = key.split(".")
    node = tree
    for depth, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError("unknown key", ".".join(parts[: depth + 1]))
        if node[part] is None:
            node[part] = {}
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError("unknown key", key)
    node[parts[-1]] = value


def apply_overrides(obj, overrides):
    """ Return a copy of the dataclass tree ``obj`` with dotted-key overrides
    applied, e.g. ``{"train.target_fraction": 0.25}``.

    :raises ConfigError: if a key does not exist in the tree.
    """
    if not overrides:
        return obj
    tree = to_dict(obj)
    for key, value in overrides.items():
        _set_dotted(tree, key, value)
    return from_dict(type(obj), tree)


def config_hash(obj):
    """ SHA-256 hex digest of the canonical JSON form of a config tree. """
    payload = json.dumps(to_dict(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def load_yaml(path):
    """ Read a YAML file and return its content (an empty file gives ``{}``). """
    with open(path, encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError("cannot parse %s: %s" % (path, e)) from e
    return {} if data is None else data


def dump_yaml(obj, path):
    """ Write a dataclass tree (or plain containers) as YAML. """
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(to_dict(obj), f, sort_keys=False)
