"""
Dataclass <-> JSON conversion, canonical hashing and strict merging
"""

import dataclasses
import hashlib
import json
import typing

from .errors import ConfigTypeError, UnknownConfigKeyError


def to_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if hasattr(obj, "item") and callable(obj.item):
        # numpy scalars
        return obj.item()
    return obj


def canonical_json(obj):
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_hash(obj):
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def dump_json(obj, path):
    """Write human-readable, byte-stable JSON"""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(to_jsonable(obj), f, indent=2, sort_keys=True)
        f.write("\n")


def _join(path, key):
    return f"{path}.{key}" if path else str(key)


def _coerce(tp, value, path, base=None):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)

    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        non_none = [a for a in args if a is not type(None)]
        return _coerce(non_none[0], value, path, base)

    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigTypeError(path, "object", value)
        start = base if base is not None else tp()
        return merge_dataclass(start, value, path)

    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigTypeError(path, "array", value)
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigTypeError(path, f"array of length {len(args)}", value)
            items = [_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value))]
        else:
            item_tp = args[0] if args else typing.Any
            items = [_coerce(item_tp, v, f"{path}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items

    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigTypeError(path, "boolean", value)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigTypeError(path, "integer", value)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigTypeError(path, "number", value)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigTypeError(path, "string", value)
        return value
    return value


def merge_dataclass(instance, overrides, path=""):
    """Return a copy of `instance` with `overrides` applied; unknown keys are errors"""
    hints = typing.get_type_hints(type(instance))
    names = {f.name for f in dataclasses.fields(instance)}
    changes = {}
    for key, value in overrides.items():
        key_path = _join(path, key)
        if key not in names:
            raise UnknownConfigKeyError(key_path)
        current = getattr(instance, key)
        base = current if dataclasses.is_dataclass(current) else None
        changes[key] = _coerce(hints[key], value, key_path, base)
    return dataclasses.replace(instance, **changes)


def from_jsonable(cls, data, path=""):
    return merge_dataclass(cls(), data, path)
