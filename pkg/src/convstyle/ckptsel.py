"""Checkpoint ranking by final-intonation agreement with reference recordings.

For every held-out text, the f0 slope over the last two words of the
synthesized utterance is compared with the slope of its reference
recording. Opposite signs count as an unnatural pattern; checkpoints with
fewer such patterns rank higher.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (ConvStyleError, DegenerateInterval, NoVoicedFrames, SynthesisFailure,
                     TooFewWords)
from .features import F0Track

log = logging.getLogger(__name__)

MIN_EFFECTIVE = 3.0
FLAT_EPS = 1e-3


@dataclass
class SlopeResult:
    slope: float          # Hz per frame
    n_effective: float


def weighted_f0_slope(f0, weights, interval, threshold: float = MIN_EFFECTIVE) -> SlopeResult:
    """Weighted least-squares slope of ``f0`` over frames ``[a, b)``."""
    a, b = int(interval[0]), int(interval[1])
    if b <= a:
        raise DegenerateInterval(f'empty interval [{a}, {b})')
    f = np.asarray(f0, dtype=np.float64)[a:b]
    w = np.asarray(weights, dtype=np.float64)[a:b]
    if len(f) != b - a or len(w) != b - a:
        raise ValueError(f'arrays do not cover [{a}, {b})')
    n_eff = float(w.sum())
    if n_eff <= threshold:
        raise NoVoicedFrames(f'effective voiced weight {n_eff:.3g} <= {threshold}')
    if np.count_nonzero(w) < 2:
        raise DegenerateInterval('all weight sits on one frame')
    t = np.arange(a, b, dtype=np.float64)
    t_bar = (w * t).sum() / n_eff
    f_bar = (w * f).sum() / n_eff
    dt = t - t_bar
    return SlopeResult(float((w * dt * (f - f_bar)).sum() / (w * dt * dt).sum()), n_eff)


def last_two_words(word_spans) -> tuple[int, int]:
    spans = np.asarray(word_spans)
    if len(spans) < 2:
        raise TooFewWords(f'{len(spans)} word(s); need two')
    return int(spans[-2, 0]), int(spans[-1, 1])


def _slope_or_none(track: F0Track, spans, eps: float):
    try:
        s = weighted_f0_slope(track.f0, track.voicing, last_two_words(spans)).slope
    except (NoVoicedFrames, DegenerateInterval):
        return None
    return None if abs(s) < eps else s


def utterance_pattern_check(tts: tuple[F0Track, np.ndarray], ref: tuple[F0Track, np.ndarray],
                            eps: float = FLAT_EPS) -> str:
    """``natural``, ``unnatural`` or ``indeterminate``; each slope in its own time base."""
    for _, spans in (tts, ref):
        last_two_words(spans)
    s_tts = _slope_or_none(*tts, eps)
    s_ref = _slope_or_none(*ref, eps)
    if s_tts is None or s_ref is None:
        return 'indeterminate'
    return 'unnatural' if np.sign(s_tts) * np.sign(s_ref) < 0 else 'natural'


@dataclass
class HeldoutItem:
    utterance_id: str
    reference: tuple[F0Track, np.ndarray]      # f0 track and word spans
    payload: object = None                     # whatever the synthesizer needs


@dataclass
class Candidate:
    checkpoint_id: str
    step: int
    synthesize: Callable[[HeldoutItem], tuple[F0Track, np.ndarray]]


@dataclass
class CheckpointScore:
    checkpoint_id: str
    unnatural_count: int
    total: int
    step: int = 0
    verdicts: dict = field(default_factory=dict)


@dataclass
class Ranking:
    ranked: list[CheckpointScore]
    failed: dict[str, str]
    top_k: int = 1

    @property
    def selected(self) -> list[CheckpointScore]:
        return self.ranked[:self.top_k]

    def to_dict(self) -> dict:
        return {'top_k': self.top_k,
                'selected': [s.checkpoint_id for s in self.selected],
                'ranked': [asdict(s) for s in self.ranked],
                'failed': self.failed}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def score_checkpoint(cand: Candidate, heldout: list[HeldoutItem], eps: float = FLAT_EPS) -> CheckpointScore:
    verdicts = {}
    for item in heldout:
        try:
            tts = cand.synthesize(item)
        except ConvStyleError as exc:
            raise SynthesisFailure(f'{cand.checkpoint_id} on {item.utterance_id}: {exc}') from exc
        verdicts[item.utterance_id] = utterance_pattern_check(tts, item.reference, eps)
    counted = [v for v in verdicts.values() if v != 'indeterminate']
    return CheckpointScore(cand.checkpoint_id, counted.count('unnatural'), len(counted),
                           cand.step, dict(sorted(verdicts.items())))


def rank_checkpoints(candidates: list[Candidate], heldout: list[HeldoutItem], top_k: int = 1,
                     eps: float = FLAT_EPS, jobs: int = 1) -> Ranking:
    """Fewest unnatural patterns first; the later training step wins ties.

    Checkpoints that fail to synthesize are reported and left out.
    """
    def run(c):
        try:
            return score_checkpoint(c, heldout, eps)
        except SynthesisFailure as exc:
            log.warning('checkpoint excluded: %s', exc)
            return exc

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(run, candidates))
    scores = [r for r in results if isinstance(r, CheckpointScore)]
    failed = {c.checkpoint_id: str(r) for c, r in zip(candidates, results)
              if not isinstance(r, CheckpointScore)}
    scores.sort(key=lambda s: (s.unnatural_count, -s.step, s.checkpoint_id))
    return Ranking(scores, failed, top_k)
