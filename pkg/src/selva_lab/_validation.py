"""Argument checks shared by the estimator wrappers."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import InputError, ShapeError
from .world import MixedSample, Scene


def check_scenes(scenes, min_classes: int = 2) -> list[Scene]:
    scenes = list(scenes)
    if not scenes or not all(isinstance(s, Scene) for s in scenes):
        raise InputError("expected a non-empty sequence of Scene objects")
    if len({s.class_id for s in scenes}) < min_classes:
        raise InputError(f"need scenes from at least {min_classes} classes")
    return scenes


def check_mixed(samples) -> list[MixedSample]:
    samples = list(samples)
    if not samples or not all(isinstance(s, MixedSample) for s in samples):
        raise InputError("expected a non-empty sequence of MixedSample objects")
    return samples


def check_video_batch(videos, frames: int, patch: int, width: int, d_patch: int) -> np.ndarray:
    """Coerce to a finite float64 ``[n, F, P, W, d_patch]`` array."""
    x = np.asarray(videos, dtype=np.float64)
    if x.ndim == 4:
        x = x[None]
    if x.ndim != 5 or x.shape[1:] != (frames, patch, width, d_patch):
        raise ShapeError(f"expected videos shaped [n, {frames}, {patch}, {width}, {d_patch}], got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("videos contain non-finite values")
    return x


def check_captions(captions, n: int) -> list:
    if isinstance(captions, str):
        raise InputError("captions must be a sequence of token sequences, not a string")
    captions = [tuple(c) if not isinstance(c, str) else (c,) for c in captions]
    if len(captions) != n:
        raise InputError(f"got {len(captions)} captions for {n} videos")
    return captions


def check_random_state(seed) -> int:
    if seed is None:
        return 0
    if isinstance(seed, (int, np.integer)) and not isinstance(seed, bool):
        return int(seed)
    raise InputError(f"random_state must be an integer or None, got {seed!r}")


def split_inputs(X) -> tuple[Sequence, Sequence]:
    """``X`` is a MixedSample list or a ``(videos, captions)`` pair."""
    if isinstance(X, tuple) and len(X) == 2:
        return X
    samples = check_mixed(X)
    return np.stack([s.video for s in samples]), [s.target.caption for s in samples]
