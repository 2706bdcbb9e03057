"""Command-line entry point.

Exit codes: 0 success, 2 validation failure, 3 runtime failure. Logs go to
stderr as JSON lines; command results go to stdout.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import yaml

from .errors import ConvStyleError, ValidationError

log = logging.getLogger('convstyle')

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        rec = {'time': round(record.created, 3), 'level': record.levelname.lower(),
               'logger': record.name, 'message': record.getMessage()}
        if record.exc_info:
            rec['exception'] = self.formatException(record.exc_info)
        return json.dumps(rec)


def setup_logging(level: str = 'info') -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


class _LineErrors(ValidationError):
    pass


def _emit(obj) -> None:
    print(json.dumps(obj, default=str))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_make_toy_corpus(a):
    from .toy import make_toy_corpus, make_tilt_pair_corpus
    if a.tilt_pair:
        _emit({'recorded': str(make_tilt_pair_corpus(a.out, n_utts=a.utts_per_neutral))})
        return
    paths = make_toy_corpus(a.out, n_neutral=a.n_neutral, utts_per_neutral=a.utts_per_neutral,
                            n_conversational=a.n_conversational, n_heldout=a.n_heldout,
                            script_lines=a.script_lines, seed=a.seed)
    _emit({k: str(v) for k, v in paths.items()})


def cmd_parse(a):
    from .frontend import (Lexicon, build_symbol_sequence, parse_markup, read_script,
                           sequence_to_json)
    lex = Lexicon.load(a.lexicon) if a.lexicon else Lexicon.load()
    lines = [(0, a.id or 'text', a.text)] if a.text is not None else list(read_script(a.script))
    failures = 0
    for line_no, utt_id, markup in lines:
        try:
            utt = parse_markup(markup, utt_id, a.role, a.style)
            _emit(sequence_to_json(build_symbol_sequence(utt, lex), utt, lex))
        except ValidationError as exc:
            failures += 1
            _emit({'line': line_no, 'utterance_id': utt_id, 'error': type(exc).__name__,
                   'message': str(exc)})
    if failures:
        raise _LineErrors(f'{failures} line(s) failed to parse')


def cmd_features(a):
    from .experiment import _load_manifest, ensure_features
    manifest = _load_manifest(Path(a.workspace), a.manifest, 'input')
    _emit(ensure_features(manifest, a.jobs))


def cmd_train_vc(a):
    from .experiment import RunLog, train_vc_model
    runlog = RunLog(Path(a.out).with_suffix('.runlog.jsonl'))
    model = train_vc_model(a.workspace, a.manifest, a.out, a.steps, a.batch_size, a.lr, a.seed,
                           a.preset, a.jobs, a.lexicon, runlog)
    _emit({'checkpoint': a.out, 'step': model.step,
           'final_loss': runlog.records('loss')[-1]['total'] if model.step else None})


def cmd_augment(a):
    from .experiment import augment_corpus
    aug = augment_corpus(a.workspace, a.manifest, a.vc, a.out, a.jobs, a.lexicon, a.conv_speaker)
    _emit({'manifest': a.out, 'rows': len(aug)})


def cmd_assemble(a):
    from .augment import assemble_training_manifest
    from .experiment import _load_manifest
    ws = Path(a.workspace)
    recorded = _load_manifest(ws, a.manifest, 'recorded')
    augmented = _load_manifest(ws, a.augmented, 'augmented') if a.augmented else None
    offsets = json.loads(a.offsets) if a.offsets else {}
    system = assemble_training_manifest(a.system, recorded, augmented, a.conv_speaker, offsets)
    system.manifest.validate(require_features=False)
    system.manifest.save(ws / a.out)
    cfg_path = (ws / a.out).with_suffix('.system.json')
    cfg_path.write_text(json.dumps({**system.to_dict(), 'manifest': a.out}, indent=2))
    _emit({'manifest': a.out, 'system': system.to_dict(), 'config': str(cfg_path)})


def _parse_override(item: str):
    if '=' not in item:
        raise argparse.ArgumentTypeError(f'expected key=value, got {item!r}')
    key, value = item.split('=', 1)
    parsed = yaml.safe_load(value)
    if isinstance(parsed, str):
        try:    # YAML 1.1 reads '2e-3' as a string
            parsed = float(parsed)
        except ValueError:
            pass
    return key, parsed


def load_spec(a):
    from .config import ExperimentSpec
    overrides: dict = {}
    for key, value in a.set or []:
        target = overrides
        *parents, leaf = key.split('.')
        for p in parents:
            target = target.setdefault(p, {})
        target[leaf] = value
    for flag in ('name', 'system', 'workspace'):
        if getattr(a, flag, None) is not None:
            overrides[flag] = getattr(a, flag)
    if a.steps is not None:
        overrides.setdefault('train', {})['steps'] = a.steps
    base = {}
    if a.config:
        with open(a.config) as f:
            base = yaml.safe_load(f) or {}
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            base[k] = {**base[k], **v}
        else:
            base[k] = v
    try:
        return ExperimentSpec(**base)
    except TypeError as exc:
        from .errors import ValidationFailure
        raise ValidationFailure(f'bad experiment config: {exc}') from None


def cmd_train_tts(a):
    from .experiment import run_experiment
    res = run_experiment(load_spec(a), a.jobs, a.force)
    _emit({'out_dir': res.out_dir, 'checkpoints': res.checkpoints,
           'top_checkpoint': res.top_checkpoint, 'final_losses': res.final_losses})


def cmd_rank(a):
    from .ckptsel import rank_checkpoints
    from .config import ExperimentSpec
    from .errors import ValidationFailure
    from .experiment import _heldout, candidate_for, load_lexicon
    cks = sorted(p for p in Path(a.checkpoints).glob('step*.pt'))
    if not cks:
        raise ValidationFailure(f'no stage-2 checkpoints (step*.pt) in {a.checkpoints}')
    ws = Path(a.workspace)
    spec = ExperimentSpec(name='rank', system='Base', workspace=str(ws),
                          heldout_manifest=str(Path(a.heldout).resolve().relative_to(ws.resolve())))
    heldout = _heldout(spec, load_lexicon(a.lexicon, ws), a.jobs)
    offsets = json.loads(a.offsets) if a.offsets else None
    ranking = rank_checkpoints([candidate_for(p, offsets, a.speaker) for p in cks], heldout,
                               a.top, jobs=a.jobs)
    if a.out:
        ranking.save(a.out)
    _emit(ranking.to_dict())


def cmd_synth(a):
    from .experiment import synthesize_batch
    offsets = json.loads(a.offsets) if a.offsets else None
    rep = synthesize_batch(a.checkpoint, a.script, a.out, a.speaker, offsets, a.style, a.lexicon)
    _emit({'out_dir': a.out, 'synthesized': len(rep['utterances']),
           'errors': rep['errors']})


def cmd_convert(a):
    from .experiment import convert_utterance
    res = convert_utterance(a.vc, a.wave, a.durations, a.target, a.out)
    _emit({'out': a.out, 'frames': int(len(res.features.mel)), 'speaker': res.speaker_id})


def cmd_report(a):
    from .report import build_report
    rows = build_report(a.run, a.out, a.synth)
    print('section\tkey\tvalue')
    for r in rows:
        print('\t'.join(r))


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog='convstyle', description=__doc__.splitlines()[0])
    p.add_argument('--log-level', default='info')
    sub = p.add_subparsers(dest='command', required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        return sp

    def workspace(sp, manifest=True):
        sp.add_argument('--workspace', default='.', help='root that manifest paths are relative to')
        if manifest:
            sp.add_argument('--manifest', default='manifests/recorded.jsonl')
        sp.add_argument('--lexicon', default=None)
        sp.add_argument('--jobs', type=int, default=1)

    sp = add('make-toy-corpus', cmd_make_toy_corpus, 'write a synthetic multi-speaker corpus')
    sp.add_argument('--out', required=True)
    sp.add_argument('--n-neutral', type=int, default=3)
    sp.add_argument('--utts-per-neutral', type=int, default=8)
    sp.add_argument('--n-conversational', type=int, default=10)
    sp.add_argument('--n-heldout', type=int, default=6)
    sp.add_argument('--script-lines', type=int, default=70)
    sp.add_argument('--seed', type=int, default=0)
    sp.add_argument('--tilt-pair', action='store_true', help='two speakers differing only in tilt')

    sp = add('parse', cmd_parse, 'compile annotated text to symbol sequences')
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument('--script')
    g.add_argument('--text')
    sp.add_argument('--id', default=None)
    sp.add_argument('--style', default='conversational')
    sp.add_argument('--role', default='agent')
    sp.add_argument('--lexicon', default=None)

    sp = add('features', cmd_features, 'extract acoustic features for a manifest')
    workspace(sp)

    sp = add('train-vc', cmd_train_vc, 'train the voice-conversion model')
    workspace(sp)
    sp.add_argument('--out', required=True, help='checkpoint path')
    sp.add_argument('--steps', type=int, default=300)
    sp.add_argument('--batch-size', type=int, default=16)
    sp.add_argument('--lr', type=float, default=1e-3)
    sp.add_argument('--seed', type=int, default=0)
    sp.add_argument('--preset', choices=('toy', 'full'), default='toy')

    sp = add('augment', cmd_augment, 'convert conversational recordings to every other speaker')
    workspace(sp)
    sp.add_argument('--vc', required=True, help='VC checkpoint')
    sp.add_argument('--out', default='manifests/augmented.jsonl')
    sp.add_argument('--conv-speaker', type=int, default=None)

    sp = add('assemble', cmd_assemble, 'build the Base, Adv or Aug training manifest')
    workspace(sp)
    sp.add_argument('--system', choices=('Base', 'Adv', 'Aug'), required=True)
    sp.add_argument('--augmented', default=None)
    sp.add_argument('--conv-speaker', type=int, default=None)
    sp.add_argument('--offsets', default=None, help='JSON style -> [2][3] HPC offsets')
    sp.add_argument('--out', required=True)

    sp = add('train-tts', cmd_train_tts, 'run a TTS experiment (both training stages + ranking)')
    sp.add_argument('--config', default=None, help='experiment YAML')
    sp.add_argument('--set', action='append', type=_parse_override, metavar='KEY=VALUE',
                    help='override a config key, e.g. train.steps=200')
    sp.add_argument('--name')
    sp.add_argument('--system', choices=('Base', 'Adv', 'Aug'))
    sp.add_argument('--workspace')
    sp.add_argument('--steps', type=int, default=None)
    sp.add_argument('--jobs', type=int, default=1)
    sp.add_argument('--force', action='store_true', help='re-run even if complete')

    sp = add('rank-checkpoints', cmd_rank, 'rank stage-2 checkpoints by final-intonation agreement')
    sp.add_argument('--checkpoints', required=True)
    sp.add_argument('--heldout', required=True)
    sp.add_argument('--top', type=int, default=1)
    sp.add_argument('--workspace', default='.')
    sp.add_argument('--speaker', type=int, default=0)
    sp.add_argument('--offsets', default=None)
    sp.add_argument('--lexicon', default=None)
    sp.add_argument('--jobs', type=int, default=1)
    sp.add_argument('--out', default=None)

    sp = add('synth', cmd_synth, 'synthesize an annotated script')
    sp.add_argument('--checkpoint', required=True)
    sp.add_argument('--script', required=True)
    sp.add_argument('--out', required=True)
    sp.add_argument('--speaker', type=int, default=0)
    sp.add_argument('--style', default='conversational')
    sp.add_argument('--offsets', default=None)
    sp.add_argument('--lexicon', default=None)

    sp = add('convert', cmd_convert, 'convert one utterance to another speaker')
    sp.add_argument('--vc', required=True)
    sp.add_argument('--wave', required=True)
    sp.add_argument('--durations', required=True)
    sp.add_argument('--target', type=int, required=True)
    sp.add_argument('--out', required=True)

    sp = add('report', cmd_report, 'summarise a run and render its figures')
    sp.add_argument('--run', required=True)
    sp.add_argument('--out', default=None)
    sp.add_argument('--synth', default=None, help='synthesis output directory')
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    t0 = time.time()
    try:
        args.fn(args)
    except ValidationError as exc:
        log.error('%s: %s', type(exc).__name__, exc)
        return EXIT_VALIDATION
    except ConvStyleError as exc:
        log.error('%s: %s', type(exc).__name__, exc)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every unexpected failure is a runtime failure
        log.exception('%s: %s', type(exc).__name__, exc)
        return EXIT_RUNTIME
    log.info('%s finished in %.1fs', args.command, time.time() - t0)
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
