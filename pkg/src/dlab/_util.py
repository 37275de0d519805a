"""Small array helpers used across modules."""
from __future__ import annotations

import numpy as np


def coerce(value, lead, tail=()):
    """Broadcast a callback result to ``lead + tail``.

    Callbacks may return scalars or arrays missing trailing unit axes; both
    are accepted as long as the data broadcasts unambiguously.
    """
    arr = np.asarray(value, dtype=float)
    lead, tail = tuple(lead), tuple(tail)
    target = lead + tail
    if arr.shape == target:
        return arr
    if arr.shape == lead and int(np.prod(tail, dtype=int)) == 1:
        return arr.reshape(target)
    if arr.ndim >= 1 and arr.shape[: len(lead)] == lead and len(lead) > 0:
        trailing = arr.shape[len(lead):]
        if int(np.prod(trailing, dtype=int)) == int(np.prod(tail, dtype=int)):
            return arr.reshape(target)
    try:
        return np.broadcast_to(arr, target)
    except ValueError:
        raise ValueError(f"callback returned shape {arr.shape}, expected {target}") from None


def cumulative_left(increments, axis=-1):
    """Cumulated sums starting at 0: out[0] = 0, out[k] = sum(increments[:k])."""
    inc = np.moveaxis(np.asarray(increments, dtype=float), axis, -1)
    out = np.zeros(inc.shape[:-1] + (inc.shape[-1] + 1,))
    np.cumsum(inc, axis=-1, out=out[..., 1:])
    return np.moveaxis(out, -1, axis)


def sup_abs(paths, axis=-1):
    return np.max(np.abs(paths), axis=axis)
