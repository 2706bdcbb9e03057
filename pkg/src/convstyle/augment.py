"""Base / Adv / Aug training sets and VC-based style augmentation."""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConversionFailure, ConvStyleError, IncompleteCorpus, NoVoicedFrames
from .features import (SpeakerStats, f0_from_vocoder, normalize_hpc, raw_hpc, save_features,
                       word_spans_from_durations)
from .manifest import CorpusManifest, ManifestRow

log = logging.getLogger(__name__)

SYSTEMS = ('Base', 'Adv', 'Aug')
MIN_SUCCESS = 0.95


@dataclass
class SystemConfig:
    name: str
    adversary_enabled: bool
    manifest: CorpusManifest
    hpc_offsets: dict[str, list] = field(default_factory=dict)   # style -> [2, 3]

    def __post_init__(self):
        if self.name not in SYSTEMS:
            raise ValueError(f'unknown system {self.name!r}')
        if self.adversary_enabled != (self.name == 'Adv'):
            raise ValueError('the adversary is enabled exactly for Adv')

    def offsets_for(self, style: str):
        off = self.hpc_offsets.get(style)
        return None if off is None else np.asarray(off, dtype=np.float64)

    def to_dict(self) -> dict:
        return {'name': self.name, 'adversary_enabled': self.adversary_enabled,
                'rows': len(self.manifest), 'hpc_offsets': self.hpc_offsets}


def conversational_speaker(manifest: CorpusManifest) -> int:
    """Speaker with the largest share of conversational-style recordings."""
    best, share = None, -1.0
    for spk in manifest.speakers():
        rows = [r for r in manifest if r.speaker_id == spk and r.origin == 'recorded']
        if not rows:
            continue
        s = sum(r.style == 'conversational' for r in rows) / len(rows)
        if s > share:
            best, share = spk, s
    if best is None or share <= 0:
        raise IncompleteCorpus('no speaker has conversational recordings')
    return best


def conversational_share(manifest: CorpusManifest, speaker: int) -> float:
    rows = [r for r in manifest if r.speaker_id == speaker]
    return sum(r.style == 'conversational' for r in rows) / max(len(rows), 1)


def generate_augmented_corpus(conv_items, conv_rows: list[ManifestRow], neutral_speakers: list[int],
                              vc_model, root, jobs: int = 1,
                              min_success: float = MIN_SUCCESS) -> CorpusManifest:
    """Convert every conversational utterance to every neutral speaker.

    ``conv_items`` are :class:`VCItem` objects aligned with ``conv_rows``.
    Failed conversions are logged and skipped; fewer than ``min_success`` of
    the jobs succeeding raises :class:`ConversionFailure`.
    """
    from .vc import convert
    for r in conv_rows:
        if r.style != 'conversational':
            raise ConversionFailure(f'{r.utterance_id} is not conversational style')
    manifest = CorpusManifest([], root)
    jobs_list = [(i, spk) for spk in neutral_speakers for i in range(len(conv_rows))]

    def run(job):
        i, spk = job
        row, item = conv_rows[i], conv_items[i]
        try:
            res = convert(vc_model, item, spk)
        except ConvStyleError as exc:
            log.warning('conversion %s -> %d failed: %s', row.utterance_id, spk, exc)
            return None
        rel = f'features/vc/{spk}/{row.utterance_id}.npz'
        out = manifest.resolve(rel)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_features(out, res.features)
        return ManifestRow(row.utterance_id, spk, 'conversational', row.role, row.markup_path, rel,
                           origin='vc', source_speaker=row.speaker_id, target_speaker=spk)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(run, jobs_list))
    manifest.rows = [r for r in results if r is not None]
    n_fail = len(jobs_list) - len(manifest.rows)
    if jobs_list and len(manifest.rows) / len(jobs_list) < min_success:
        raise ConversionFailure(f'{n_fail} of {len(jobs_list)} conversions failed')
    log.info('augmentation: %d rows, %d failed', len(manifest.rows), n_fail)
    return manifest


def assemble_training_manifest(system: str, recorded: CorpusManifest,
                               augmented: CorpusManifest | None = None,
                               conv_speaker: int | None = None,
                               hpc_offsets: dict | None = None) -> SystemConfig:
    """Base and Adv train on the recordings; Aug drops every recording of the
    conversational speaker and adds the converted utterances instead."""
    if system not in SYSTEMS:
        raise ValueError(f'unknown system {system!r}')
    conv_speaker = conversational_speaker(recorded) if conv_speaker is None else conv_speaker
    speakers = recorded.speakers()
    if conv_speaker not in speakers or len(speakers) < 2:
        raise IncompleteCorpus(f'recorded corpus needs the conversational speaker and at least '
                               f'one other; has {speakers}')
    if system != 'Aug':
        return SystemConfig(system, system == 'Adv', CorpusManifest(list(recorded.rows), recorded.root),
                            dict(hpc_offsets or {}))
    if augmented is None or len(augmented) == 0:
        raise IncompleteCorpus('Aug needs a non-empty augmented corpus')
    if any(r.origin != 'vc' or r.speaker_id == conv_speaker for r in augmented):
        raise IncompleteCorpus('augmented corpus must hold only converted rows for other speakers')
    kept = [r for r in recorded if r.speaker_id != conv_speaker]
    if augmented.root != recorded.root:
        raise IncompleteCorpus('recorded and augmented manifests must share a workspace root')
    return SystemConfig('Aug', False, CorpusManifest(kept + list(augmented.rows), recorded.root),
                        dict(hpc_offsets or {}))


# --------------------------------------------------------------------------
# HPC offset tuning
# --------------------------------------------------------------------------

def offset_targets(items) -> np.ndarray:
    """Mean utterance-level pitch range and rate of a set of training items."""
    return np.mean([it.hpc.utterance_level[1:] for it in items], axis=0)


def measured_controls(model, seqs, tables, speaker_id: int, stats: SpeakerStats,
                      offsets=None) -> np.ndarray | None:
    """Mean normalised (range, rate) of synthesized utterances, or None if unmeasurable."""
    from .dataset import phone_mask
    from .features import AcousticFeatures
    from .nat2 import synthesize
    vals = []
    for seq in seqs:
        res = synthesize(model, seq, tables, speaker_id, hpc_offsets=offsets)
        feats = AcousticFeatures(res.mel, res.vocoder_post, res.durations,
                                 f0_from_vocoder(res.vocoder_post))
        spans = word_spans_from_durations(seq.word_indices(), res.durations)
        try:
            hpc = normalize_hpc(raw_hpc(feats, spans, phone_mask(seq)), stats)
        except NoVoicedFrames:
            continue
        vals.append(hpc.utterance_level[1:])
    return np.mean(vals, axis=0) if vals else None


def tune_offsets(model, seqs, tables, speaker_id: int, stats: SpeakerStats, target,
                 grid=(-1.0, -0.5, 0.0, 0.5, 1.0)) -> tuple[np.ndarray, float]:
    """Grid search over (range, rate) offsets applied at both HPC levels.

    Returns the ``[2, 3]`` offset table closest to ``target`` and its cost.
    """
    best, best_cost = np.zeros((2, 3)), np.inf
    for d_range, d_rate in itertools.product(grid, grid):
        off = np.zeros((2, 3))
        off[:, 1], off[:, 2] = d_range, d_rate
        got = measured_controls(model, seqs, tables, speaker_id, stats, off)
        if got is None:
            continue
        cost = float(np.sum((got - np.asarray(target)) ** 2))
        if cost < best_cost:
            best, best_cost = off, cost
    return best, best_cost
