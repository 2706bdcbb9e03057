"""Feature extraction over manifests and assembly of training items."""
from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .features import (AcousticFeatures, SpeakerStats, compute_speaker_stats,
                       extract_acoustic_features, load_features, normalize_hpc,
                       raw_hpc, save_features, word_spans_from_durations)
from .errors import ValidationFailure
from .frontend import (AnnotatedUtterance, Lexicon, SymbolSequence,
                       VocabularyTables, build_symbol_sequence, encode_symbol_ids,
                       parse_markup)
from .manifest import CorpusManifest, ManifestRow
from .nat2 import TTSItem
from .toy import read_wav

log = logging.getLogger(__name__)


@dataclass
class Utterance:
    row: ManifestRow
    utt: AnnotatedUtterance
    seq: SymbolSequence
    feats: AcousticFeatures


def _source_digest(manifest: CorpusManifest, row: ManifestRow) -> str:
    h = hashlib.sha1()
    for rel in (row.wave_path, row.durations_path):
        h.update(manifest.resolve(rel).read_bytes())
    return h.hexdigest()


def extract_row(manifest: CorpusManifest, row: ManifestRow, force: bool = False) -> bool:
    """Extract features for one recorded row; returns False when cached."""
    out = manifest.resolve(row.feature_path)
    digest = _source_digest(manifest, row)
    if out.exists() and not force:
        with np.load(out) as z:
            if 'source_digest' in z and str(z['source_digest']) == digest:
                return False
    wave = read_wav(manifest.resolve(row.wave_path))
    durations = np.load(manifest.resolve(row.durations_path))
    feats = extract_acoustic_features(wave, durations)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_features(out, feats, source_digest=np.array(digest))
    return True


def extract_corpus_features(manifest: CorpusManifest, jobs: int = 1, force: bool = False) -> dict:
    """Extract features for every row that has audio; independent per row."""
    rows = [r for r in manifest if r.wave_path and r.durations_path]
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        done = list(pool.map(lambda r: extract_row(manifest, r, force), rows))
    stats = {'extracted': int(sum(done)), 'cached': int(len(done) - sum(done))}
    log.info('features: %(extracted)d extracted, %(cached)d cached', stats)
    return stats


def load_corpus(manifest: CorpusManifest, lexicon: Lexicon) -> list[Utterance]:
    out = []
    for row in manifest:
        markup = manifest.resolve(row.markup_path).read_text().strip()
        utt = parse_markup(markup, row.utterance_id, row.role, row.style)
        seq = build_symbol_sequence(utt, lexicon)
        feats = load_features(manifest.resolve(row.feature_path))
        if len(feats.durations) != len(seq):
            raise ValidationFailure(
                f'{row.utterance_id}: {len(feats.durations)} durations for {len(seq)} symbols')
        out.append(Utterance(row, utt, seq, feats))
    return out


def phone_mask(seq: SymbolSequence) -> np.ndarray:
    return np.array([s.kind == 'phone' for s in seq.symbols])


def utterance_raw_hpc(u: Utterance):
    spans = word_spans_from_durations(u.seq.word_indices(), u.feats.durations)
    return raw_hpc(u.feats, spans, phone_mask(u.seq))


def speaker_statistics(corpus: list[Utterance]) -> dict[int, SpeakerStats]:
    by_speaker: dict[int, list] = {}
    for u in corpus:
        by_speaker.setdefault(u.row.speaker_id, []).append(utterance_raw_hpc(u))
    return {s: compute_speaker_stats(raws) for s, raws in by_speaker.items()}


def build_tts_items(corpus: list[Utterance], tables: VocabularyTables,
                    stats: dict[int, SpeakerStats] | None = None):
    """Training items with speaker-normalised ground-truth HPCs."""
    stats = speaker_statistics(corpus) if stats is None else stats
    items = []
    for u in corpus:
        hpc = normalize_hpc(utterance_raw_hpc(u), stats[u.row.speaker_id])
        items.append(TTSItem(encode_symbol_ids(u.seq, tables), u.row.speaker_id,
                             u.seq.word_indices(), hpc, np.asarray(u.feats.durations),
                             u.feats.mel, u.feats.vocoder, u.row.utterance_id))
    return items, stats


def build_vc_items(corpus: list[Utterance], manifest: CorpusManifest, encoder_rate: float = 50.0):
    """VC training items; rows without audio (already synthetic) are skipped."""
    from .vc import VCItem, encoder_frontend
    items = []
    for u in corpus:
        if not u.row.wave_path:
            continue
        wave = read_wav(manifest.resolve(u.row.wave_path))
        items.append(VCItem(u.row.speaker_id, np.asarray(u.feats.durations), u.feats.mel,
                            u.feats.vocoder, frontend=encoder_frontend(wave, encoder_rate),
                            utterance_id=u.row.utterance_id))
    return items
