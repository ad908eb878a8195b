"""Structural helpers for parameter containers.

Parameter objects are dataclasses whose fields are numpy arrays, nested
dataclasses, or lists thereof.  These helpers walk that structure in a fixed
order (field declaration order, list index order), which defines the canonical
flattening used by the optimizer, weight averaging, and checkpoints.
"""

from __future__ import annotations

import dataclasses

import numpy as np


def named_arrays(obj, prefix=""):
    """Yield (path, array) pairs in canonical order."""
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for field in dataclasses.fields(obj):
            value = getattr(obj, field.name)
            path = f"{prefix}.{field.name}" if prefix else field.name
            yield from named_arrays(value, path)
    elif isinstance(obj, (list, tuple)):
        for index, value in enumerate(obj):
            yield from named_arrays(value, f"{prefix}[{index}]")
    elif obj is None or isinstance(obj, (int, float, bool, str)):
        return
    else:
        raise TypeError(f"unsupported node in parameter tree at '{prefix}': {type(obj)}")


def map_arrays(obj, fn):
    """Rebuild the structure with fn applied to every array leaf."""
    if isinstance(obj, np.ndarray):
        return fn(obj)
    if dataclasses.is_dataclass(obj):
        kwargs = {
            field.name: map_arrays(getattr(obj, field.name), fn)
            for field in dataclasses.fields(obj)
        }
        return type(obj)(**kwargs)
    if isinstance(obj, list):
        return [map_arrays(value, fn) for value in obj]
    if isinstance(obj, tuple):
        return tuple(map_arrays(value, fn) for value in obj)
    if obj is None or isinstance(obj, (int, float, bool, str)):
        return obj
    raise TypeError(f"unsupported node in parameter tree: {type(obj)}")


def zeros_like_tree(obj):
    return map_arrays(obj, np.zeros_like)


def copy_tree(obj):
    return map_arrays(obj, np.copy)


def accumulate(dst, src, scale=1.0):
    """In-place dst += scale * src over matching tree structures."""
    for (path_d, arr_d), (path_s, arr_s) in zip(
        named_arrays(dst), named_arrays(src), strict=True
    ):
        if path_d != path_s or arr_d.shape != arr_s.shape:
            raise ValueError(f"tree mismatch: {path_d}{arr_d.shape} vs {path_s}{arr_s.shape}")
        arr_d += scale * arr_s


def num_elements(obj) -> int:
    return sum(arr.size for _, arr in named_arrays(obj))


def flatten(obj) -> np.ndarray:
    """Concatenate all array leaves into one float64 vector (canonical order)."""
    parts = [np.asarray(arr, dtype=np.float64).ravel() for _, arr in named_arrays(obj)]
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def unflatten_into(obj, vec: np.ndarray):
    """Write a flat vector back into the array leaves, preserving their dtypes."""
    vec = np.asarray(vec)
    offset = 0
    for _, arr in named_arrays(obj):
        chunk = vec[offset : offset + arr.size]
        if chunk.size != arr.size:
            raise ValueError("flat vector shorter than the parameter tree")
        arr[...] = chunk.reshape(arr.shape).astype(arr.dtype, copy=False)
        offset += arr.size
    if offset != vec.size:
        raise ValueError(f"flat vector has {vec.size} entries, tree has {offset}")


def global_norm(obj) -> float:
    total = 0.0
    for _, arr in named_arrays(obj):
        total += float(np.sum(np.asarray(arr, dtype=np.float64) ** 2))
    return float(np.sqrt(total))
