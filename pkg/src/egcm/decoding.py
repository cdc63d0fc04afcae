"""Error-guided mask-predict decoding and a left-to-right baseline.

Decoding starts from the detector's draft (flagged positions masked).  The
first pass fills every masked slot; each later iteration re-masks the
lowest-confidence slots among those masked last time and predicts them
again.  Positions the detector left alone are never touched.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .corpus import MASK_ID
from .detector import DetectionOutcome
from .model import EGCM, InputError


def schedule(n_ori: int, total: int, t: int) -> int:
    """Number of slots re-masked at iteration t: floor(n_ori * (T - t) / T)."""
    if not 1 <= t <= total:
        raise ValueError(f"iteration {t} outside 1..{total}")
    if n_ori < 0:
        raise ValueError("n_ori must be nonnegative")
    return (n_ori * (total - t)) // total


@dataclass
class DecodeState:
    t: int
    y_current: tuple[int, ...]
    mask_set: tuple[int, ...]
    obs_set: tuple[int, ...]
    scores: np.ndarray
    n_ori: int
    T: int


@dataclass
class DecodeResult:
    tokens: tuple[int, ...]
    passes: int
    states: list[DecodeState] = field(default_factory=list)


class _Session:
    """Encoder outputs for one sentence, reused across decoder passes."""

    def __init__(self, model: EGCM, x: Sequence[int], gam: np.ndarray):
        self.model = model
        self.hs, self.hef, self.keep = model.encode(np.asarray(x)[None], gam[None])
        self.passes = 0

    def predict(self, y: np.ndarray) -> np.ndarray:
        self.passes += 1
        logits = self.model.decode_logits(y[None], self.hs, self.hef, self.keep)
        return nx.softmax_rows(logits).data[0]


def mask_predict(x: Sequence[int], model: EGCM, detection: DetectionOutcome, iterations: int = 10,
                 use_gfi: bool = True, keep_states: bool = False) -> DecodeResult:
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    x = tuple(int(t) for t in x)
    n = len(x)
    if len(detection.flags) != n:
        raise InputError(f"detection covers {len(detection.flags)} positions, sentence has {n}")
    flags = np.asarray(detection.flags, dtype=bool) if use_gfi else np.ones(n, dtype=bool)
    y = np.where(flags, MASK_ID, np.asarray(x, dtype=np.int64))
    mask = np.flatnonzero(flags)
    n_ori = len(mask)
    scores = np.zeros(n)
    states: list[DecodeState] = []

    def record(t):
        if keep_states:
            obs = tuple(i for i in range(n) if i not in set(mask.tolist()))
            states.append(DecodeState(t, tuple(int(v) for v in y), tuple(int(i) for i in mask), obs,
                                      scores.copy(), n_ori, iterations))

    record(0)
    if n_ori == 0:
        return DecodeResult(x, 0, states)

    session = _Session(model, x, detection.gam_row)
    probs = session.predict(y)
    y[mask] = probs[mask].argmax(axis=-1)
    scores[mask] = probs[mask].max(axis=-1)

    for t in range(1, iterations):
        n_t = schedule(n_ori, iterations, t)
        if n_t == 0:
            break
        # lowest scores first, ties to the lower position
        order = np.lexsort((mask, scores[mask]))
        mask = np.sort(mask[order[:n_t]])
        y[mask] = MASK_ID
        record(t)
        probs = session.predict(y)
        y[mask] = probs[mask].argmax(axis=-1)
        scores[mask] = probs[mask].max(axis=-1)
    return DecodeResult(tuple(int(v) for v in y), session.passes, states)


def autoregressive_decode(x: Sequence[int], model: EGCM, detection: DetectionOutcome | None = None) -> DecodeResult:
    """One decoder pass per position, left to right, over the same network."""
    x = tuple(int(t) for t in x)
    n = len(x)
    gam = detection.gam_row if detection is not None else np.ones(n, dtype=np.int64)
    session = _Session(model, x, gam)
    y = np.full(n, MASK_ID, dtype=np.int64)
    for i in range(n):
        probs = session.predict(y)
        y[i] = int(probs[i].argmax())
    return DecodeResult(tuple(int(v) for v in y), session.passes)


def correct_corpus(model: EGCM, sources: Sequence[Sequence[int]], detections: Sequence[DetectionOutcome],
                   iterations: int = 10, use_gfi: bool = True, mode: str = "mask-predict",
                   threads: int = 1) -> list[tuple[int, ...]]:
    if len(sources) != len(detections):
        raise InputError(f"{len(detections)} detections for {len(sources)} sentences")

    def one(pair):
        x, d = pair
        if mode == "autoregressive":
            return autoregressive_decode(x, model, d).tokens
        return mask_predict(x, model, d, iterations, use_gfi=use_gfi).tokens

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, zip(sources, detections)))
    return [one(p) for p in zip(sources, detections)]
