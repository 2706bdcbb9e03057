"""End-to-end recipes: VC training, augmentation, TTS experiments, batch synthesis."""
from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import (assemble_training_manifest, conversational_speaker,
                      generate_augmented_corpus)
from .ckptsel import Candidate, HeldoutItem, Ranking, rank_checkpoints
from .config import ExperimentSpec, VCConfig, config_hash
from .dataset import (build_tts_items, build_vc_items, extract_corpus_features, load_corpus)
from .errors import ConvStyleError, IncompleteCorpus, UntrainedModel, ValidationFailure
from .features import (AcousticFeatures, f0_from_vocoder, save_features,
                       word_spans_from_durations)
from .frontend import (Lexicon, VocabularyTables, build_symbol_sequence, parse_markup,
                       read_script)
from .manifest import CorpusManifest
from . import nat2, vc

log = logging.getLogger(__name__)


class RunLog:
    """Append-only JSON-lines record of a run."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def event(self, kind: str, /, **fields) -> None:
        rec = {'event': kind, 'time': round(time.time(), 3), **fields}
        with open(self.path, 'a') as f:
            f.write(json.dumps(rec, default=_jsonable) + '\n')

    def records(self, kind: str | None = None) -> list[dict]:
        if not self.path.exists():
            return []
        with open(self.path) as f:
            recs = [json.loads(line) for line in f if line.strip()]
        return [r for r in recs if kind is None or r['event'] == kind]


def _jsonable(x):
    if isinstance(x, (np.ndarray, np.generic)):
        return x.tolist()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(type(x).__name__)


def load_lexicon(path: str | Path | None, workspace: Path | None = None) -> Lexicon:
    if path is None:
        return Lexicon.load()
    p = Path(path)
    if workspace is not None and not p.is_absolute():
        p = workspace / p
    return Lexicon.load(p)


def _load_manifest(workspace: Path, rel: str | None, what: str) -> CorpusManifest:
    if rel is None:
        raise ValidationFailure(f'no {what} manifest configured')
    path = workspace / rel
    if not path.exists():
        raise ValidationFailure(f'{what} manifest {path} does not exist')
    return CorpusManifest.load(path, workspace)


def ensure_features(manifest: CorpusManifest, jobs: int = 1) -> dict:
    """Extract missing features, then check the manifest is closed."""
    stats = extract_corpus_features(manifest.filter(lambda r: bool(r.wave_path)), jobs)
    manifest.validate(require_features=True)
    return stats


# --------------------------------------------------------------------------
# VC and augmentation
# --------------------------------------------------------------------------

def train_vc_model(workspace, manifest_rel: str, out_path, steps: int = 300, batch_size: int = 16,
                   lr: float = 1e-3, seed: int = 0, preset: str = 'toy', jobs: int = 1,
                   lexicon: str | None = None, runlog: RunLog | None = None) -> vc.VCModel:
    workspace = Path(workspace)
    manifest = _load_manifest(workspace, manifest_rel, 'recorded')
    ensure_features(manifest, jobs)
    corpus = load_corpus(manifest, load_lexicon(lexicon, workspace))
    n_speakers = max(manifest.speakers()) + 1
    cfg = (VCConfig.toy if preset == 'toy' else VCConfig)(n_speakers=n_speakers)
    items = build_vc_items(corpus, manifest, cfg.encoder_rate)
    torch.manual_seed(seed)
    model = vc.VCModel(cfg)

    def cb(_, rec):
        if runlog is not None:
            runlog.event('loss', stage='vc', **rec)
    vc.train_vc(model, items, steps, batch_size, lr, seed, callback=cb)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    vc.save_vc_checkpoint(out_path, model, manifest=manifest_rel, seed=seed)
    if runlog is not None:
        runlog.event('checkpoint', stage='vc', path=out_path, step=model.step)
    return model


def augment_corpus(workspace, manifest_rel: str, vc_checkpoint, out_rel: str,
                   jobs: int = 1, lexicon: str | None = None, conv_speaker: int | None = None,
                   runlog: RunLog | None = None) -> CorpusManifest:
    """Convert the conversational speaker's conversational recordings to every other speaker."""
    workspace = Path(workspace)
    recorded = _load_manifest(workspace, manifest_rel, 'recorded')
    ensure_features(recorded, jobs)
    conv = conversational_speaker(recorded) if conv_speaker is None else conv_speaker
    conv_rows = recorded.filter(lambda r: r.speaker_id == conv and r.style == 'conversational')
    if not len(conv_rows):
        raise IncompleteCorpus(f'speaker {conv} has no conversational recordings')
    neutral = [s for s in recorded.speakers() if s != conv]
    model, _ = vc.load_vc_checkpoint(vc_checkpoint)
    corpus = load_corpus(conv_rows, load_lexicon(lexicon, workspace))
    items = build_vc_items(corpus, conv_rows, model.cfg.encoder_rate)
    aug = generate_augmented_corpus(items, conv_rows.rows, neutral, model, workspace, jobs)
    aug.save(workspace / out_rel)
    if runlog is not None:
        runlog.event('augmentation', manifest=out_rel, rows=len(aug), neutral_speakers=neutral,
                     conversational_speaker=conv, expected=len(neutral) * len(conv_rows))
    return aug


# --------------------------------------------------------------------------
# TTS experiments
# --------------------------------------------------------------------------

def system_for(spec: ExperimentSpec):
    ws = Path(spec.workspace)
    recorded = _load_manifest(ws, spec.manifest, 'recorded')
    augmented = None
    if spec.system == 'Aug':
        if spec.augmented_manifest is None or not (ws / spec.augmented_manifest).exists():
            raise ValidationFailure(f'Aug system needs the augmented manifest '
                                    f'({spec.augmented_manifest or "augmented_manifest unset"})')
        augmented = _load_manifest(ws, spec.augmented_manifest, 'augmented')
    try:
        return assemble_training_manifest(spec.system, recorded, augmented,
                                          hpc_offsets=spec.hpc_offsets)
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from None


@dataclass
class ExperimentResult:
    out_dir: Path
    checkpoints: list[str]
    top_checkpoint: str | None
    final_losses: dict
    ranking: dict = field(default_factory=dict)


def _heldout(spec: ExperimentSpec, lexicon: Lexicon, jobs: int):
    if spec.heldout_manifest is None:
        return []
    ws = Path(spec.workspace)
    manifest = _load_manifest(ws, spec.heldout_manifest, 'held-out')
    ensure_features(manifest, jobs)
    out = []
    for u in load_corpus(manifest, lexicon):
        if u.seq.num_words < 2:
            continue
        spans = word_spans_from_durations(u.seq.word_indices(), u.feats.durations)
        out.append(HeldoutItem(u.row.utterance_id, (u.feats.f0track, spans), (u.seq, u.utt.style)))
    return out


def candidate_for(path: Path, offsets: dict | None = None, speaker_id: int = 0) -> Candidate:
    model, ck = nat2.load_checkpoint(path)
    tables = VocabularyTables.from_dict(ck['tables'])
    lock = threading.Lock()

    def synth(item: HeldoutItem):
        seq, style = item.payload
        off = None if not offsets or style not in offsets else np.asarray(offsets[style])
        with lock:
            res = nat2.synthesize(model, seq, tables, speaker_id, hpc_offsets=off)
        return (f0_from_vocoder(res.vocoder_post),
                word_spans_from_durations(seq.word_indices(), res.durations))
    return Candidate(path.stem, model.step, synth)


def run_experiment(spec: ExperimentSpec, jobs: int = 1, force: bool = False) -> ExperimentResult:
    """Stage-1 acoustic training, stage-2 HPC-predictor training for every
    saved checkpoint, then checkpoint ranking on the held-out set."""
    if spec.system not in ('Base', 'Adv', 'Aug'):
        raise ValidationFailure(f'unknown system {spec.system!r}')
    system = system_for(spec)       # validate inputs before touching the run directory
    out = spec.out_dir()
    spec_hash = config_hash(spec.to_dict())
    marker = out / 'run.json'
    if marker.exists():
        prev = json.loads(marker.read_text())
        if prev.get('spec_hash') != spec_hash and not force:
            raise ValidationFailure(f'{out} belongs to a different experiment spec '
                                    '(pass force to overwrite)')
        if prev.get('status') == 'complete' and not force:
            log.info('run %s already complete; nothing to do', spec.name)
            return ExperimentResult(out, prev['checkpoints'], prev['top_checkpoint'],
                                    prev['final_losses'], prev.get('ranking', {}))
    out.mkdir(parents=True, exist_ok=True)
    for stale in ('runlog.jsonl', 'ranking.json'):
        (out / stale).unlink(missing_ok=True)
    for stale in (out / 'checkpoints').glob('*.pt'):
        stale.unlink()
    marker.write_text(json.dumps({'spec_hash': spec_hash, 'status': 'running',
                                  'spec': spec.to_dict()}, indent=2))
    runlog = RunLog(out / 'runlog.jsonl')
    runlog.event('start', spec=spec.to_dict(), spec_hash=spec_hash)

    manifest = system.manifest
    runlog.event('features', **ensure_features(manifest, jobs))
    ws = Path(spec.workspace)
    lexicon = load_lexicon(spec.lexicon, ws)
    tables = VocabularyTables.from_lexicon(lexicon)
    corpus = load_corpus(manifest, lexicon)
    items, stats = build_tts_items(corpus, tables)
    (out / 'speaker_stats.json').write_text(
        json.dumps({str(k): v.to_dict() for k, v in stats.items()}, indent=2))
    manifest.save(out / 'train_manifest.jsonl')
    runlog.event('manifest', path=out / 'train_manifest.jsonl', rows=len(manifest),
                 system=system.to_dict())

    train = spec.train_config()
    # the speaker table covers every recorded speaker, so Aug keeps the conversational id
    recorded = _load_manifest(ws, spec.manifest, 'recorded')
    n_speakers = max(max(manifest.speakers()), max(recorded.speakers()), spec.target_speaker) + 1
    torch.manual_seed(train.seed)
    model = nat2.NAT2(spec.model_config(n_speakers, len(tables.joint)))
    mode = 'adversarial' if system.adversary_enabled else 'base'
    ck_dir = out / 'checkpoints'
    ck_dir.mkdir(exist_ok=True)
    acoustic_cks = []

    def cb(m, rec):
        runlog.event('loss', stage='acoustic', **rec)
        if m.step % train.checkpoint_every == 0 or m.step == train.steps:
            p = ck_dir / f'acoustic_step{m.step:06d}.pt'
            nat2.save_checkpoint(p, m, tables, system=spec.system)
            acoustic_cks.append(p)
            runlog.event('checkpoint', stage='acoustic', path=p, step=m.step)

    history = nat2.train_acoustic(model, items, train.steps, train.batch_size, train.lr, mode,
                                  train.seed, train.grad_clip, callback=cb)
    final = {k: v for k, v in history[-1].items() if k != 'step'} if history else {}

    final_cks = []
    for p in acoustic_cks:
        m, _ = nat2.load_checkpoint(p)
        hist = nat2.train_hpc_predictor(m, items, train.hpc_steps, train.batch_size, train.lr,
                                        train.seed)
        q = ck_dir / f'step{m.step:06d}.pt'
        nat2.save_checkpoint(q, m, tables, system=spec.system)
        final_cks.append(q)
        runlog.event('loss', stage='hpc_predictor', step=m.step, hpc=hist[-1] if hist else None)
        runlog.event('checkpoint', stage='hpc_predictor', path=q, step=m.step)
        if p == acoustic_cks[-1] and hist:
            final['hpc'] = hist[-1]

    ranking: dict = {}
    top = final_cks[-1].stem if final_cks else None
    heldout = _heldout(spec, lexicon, jobs)
    if heldout and final_cks:
        cands = [candidate_for(p, spec.hpc_offsets, spec.target_speaker) for p in final_cks]
        r: Ranking = rank_checkpoints(cands, heldout, spec.top_k, jobs=jobs)
        r.save(out / 'ranking.json')
        ranking = r.to_dict()
        if r.ranked:
            top = r.ranked[0].checkpoint_id
        runlog.event('ranking', path=out / 'ranking.json', selected=ranking['selected'])
    runlog.event('done', top_checkpoint=top, final_losses=final)
    result = ExperimentResult(out, [str(p) for p in final_cks], top, final, ranking)
    marker.write_text(json.dumps({'spec_hash': spec_hash, 'status': 'complete',
                                  'spec': spec.to_dict(), 'checkpoints': result.checkpoints,
                                  'top_checkpoint': top, 'final_losses': final,
                                  'ranking': ranking}, indent=2, default=_jsonable))
    return result


# --------------------------------------------------------------------------
# synthesis
# --------------------------------------------------------------------------

def synthesize_batch(checkpoint, script, out_dir, speaker_id: int = 0, offsets: dict | None = None,
                     style: str = 'conversational', lexicon: str | None = None) -> dict:
    """Synthesize every line of an annotated script; line errors are reported, not fatal."""
    model, ck = nat2.load_checkpoint(checkpoint)
    if model.stage != 'hpc_predictor':
        raise UntrainedModel(f'{checkpoint}: HPC predictor has not been trained')
    tables = VocabularyTables.from_dict(ck['tables'])
    lex = load_lexicon(lexicon)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    off = None if not offsets or style not in offsets else np.asarray(offsets[style])
    report = {'checkpoint': str(checkpoint), 'speaker_id': speaker_id, 'style': style,
              'offsets': None if off is None else off.tolist(), 'utterances': [], 'errors': []}
    for line_no, utt_id, markup in read_script(script):
        try:
            utt = parse_markup(markup, utt_id, style=style)
            seq = build_symbol_sequence(utt, lex)
            res = nat2.synthesize(model, seq, tables, speaker_id, hpc_offsets=off)
        except ConvStyleError as exc:
            report['errors'].append({'line': line_no, 'utterance_id': utt_id,
                                     'error': type(exc).__name__, 'message': str(exc)})
            continue
        feats = AcousticFeatures(res.mel, res.vocoder_post, res.durations,
                                 f0_from_vocoder(res.vocoder_post))
        path = out_dir / f'{utt_id}.npz'
        save_features(path, feats)
        report['utterances'].append({
            'line': line_no, 'utterance_id': utt_id, 'path': path.name,
            'frames': int(len(res.mel)), 'durations': res.durations.tolist(),
            'hpc_utterance': res.hpc.utterance_level.tolist(),
            'hpc_word': res.hpc.word_level.tolist()})
    (out_dir / 'report.json').write_text(json.dumps(report, indent=2))
    return report


def convert_utterance(vc_checkpoint, wave_path, durations_path, target_speaker: int, out_path):
    from .toy import read_wav
    model, _ = vc.load_vc_checkpoint(vc_checkpoint)
    wave = read_wav(wave_path)
    d = np.load(durations_path)
    mel_dummy = np.zeros((int(d.sum()), nat2.N_MEL), np.float32)
    item = vc.VCItem(target_speaker, d, mel_dummy, np.zeros((len(mel_dummy), nat2.N_VOC), np.float32),
                     frontend=vc.encoder_frontend(wave, model.cfg.encoder_rate))
    res = vc.convert(model, item, target_speaker)
    save_features(out_path, res.features)
    return res

