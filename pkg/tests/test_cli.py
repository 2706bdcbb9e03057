import contextlib
import io
import json
import os
from pathlib import Path

import numpy as np
import pytest

from convstyle import nat2
from convstyle.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main
from convstyle.features import load_features


def run(*argv):
    """Run the CLI in-process; returns (exit code, stdout lines)."""
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main([str(a) for a in argv])
    return code, [line for line in buf.getvalue().splitlines() if line.strip()]


TTS_ARGS = ['--name', 'aug', '--system', 'Aug', '--steps', 20,
            '--set', 'augmented_manifest=manifests/augmented.jsonl',
            '--set', 'heldout_manifest=manifests/heldout.jsonl',
            '--set', 'train.checkpoint_every=10', '--set', 'train.hpc_steps=10',
            '--set', 'train.batch_size=4', '--set', 'train.lr=2e-3']


@pytest.fixture(scope='module')
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp('cli') / 'ws'
    code, out = run('make-toy-corpus', '--out', root, '--n-neutral', 2, '--utts-per-neutral', 3,
                    '--n-conversational', 5, '--n-heldout', 3, '--script-lines', 6)
    assert code == EXIT_OK and json.loads(out[0])['conversational_speaker'] == '2'
    assert run('features', '--workspace', root)[0] == EXIT_OK
    assert run('train-vc', '--workspace', root, '--out', root / 'vc' / 'vc.pt', '--steps', 10,
               '--batch-size', 4)[0] == EXIT_OK
    code, out = run('augment', '--workspace', root, '--vc', root / 'vc' / 'vc.pt')
    assert code == EXIT_OK and json.loads(out[0])['rows'] == 2 * 5
    code, out = run('train-tts', '--workspace', root, *TTS_ARGS)
    assert code == EXIT_OK
    return root


def test_pipeline_outputs(ws):
    cks = sorted(p.name for p in (ws / 'runs' / 'aug' / 'checkpoints').glob('step*.pt'))
    assert cks == ['step000010.pt', 'step000020.pt']
    run_json = json.loads((ws / 'runs' / 'aug' / 'run.json').read_text())
    assert run_json['status'] == 'complete' and run_json['top_checkpoint'] in ('step000010',
                                                                               'step000020')
    # the conversational speaker (id 2) has no Aug rows but keeps its table slot
    model, _ = nat2.load_checkpoint(ws / 'runs' / 'aug' / 'checkpoints' / 'step000020.pt')
    assert model.cfg.n_speakers == 3


def test_parse_text():
    code, out = run('parse', '--text', '[da:greeting]Hi there![/da]')
    assert code == EXIT_OK
    rec = json.loads(out[0])
    assert rec['utterance_id'] == 'text' and rec['symbols']


def test_parse_bad_markup_is_validation_error():
    code, out = run('parse', '--text', '[da:greeting]Hi there!')
    assert code == EXIT_VALIDATION
    assert json.loads(out[0])['error'] == 'MalformedMarkup'


def test_parse_script_reports_each_bad_line(tmp_path):
    script = tmp_path / 's.txt'
    script.write_text('Hello.\nOkay.\n[bogus]Hi[/bogus]\nSure.\n')
    code, out = run('parse', '--script', script)
    assert code == EXIT_VALIDATION
    recs = [json.loads(line) for line in out]
    assert [r.get('line') for r in recs if 'error' in r] == [3]
    assert sum('error' not in r for r in recs) == 3


def test_missing_manifest(tmp_path):
    code, _ = run('features', '--workspace', tmp_path, '--manifest', 'nope.jsonl')
    assert code == EXIT_VALIDATION


def test_corrupt_wave_is_runtime_failure(ws, tmp_path):
    bad = tmp_path / 'bad.wav'
    bad.write_bytes(b'not a wave file')
    d = tmp_path / 'd.npy'
    np.save(d, np.array([3, 4]))
    code, _ = run('convert', '--vc', ws / 'vc' / 'vc.pt', '--wave', bad, '--durations', d,
                  '--target', 0, '--out', tmp_path / 'o.npz')
    assert code == EXIT_RUNTIME


def test_convert(ws, tmp_path):
    row = json.loads((ws / 'manifests' / 'recorded.jsonl').read_text().splitlines()[0])
    feats = load_features(ws / row['feature_path'])
    d = tmp_path / 'd.npy'
    np.save(d, feats.durations)
    code, out = run('convert', '--vc', ws / 'vc' / 'vc.pt', '--wave', ws / row['wave_path'],
                    '--durations', d, '--target', 1, '--out', tmp_path / 'o.npz')
    assert code == EXIT_OK and json.loads(out[0])['frames'] == feats.durations.sum()
    assert load_features(tmp_path / 'o.npz').mel.shape == (feats.durations.sum(), 80)


def test_synth_with_a_malformed_line(ws, tmp_path):
    script = tmp_path / 's.txt'
    script.write_text('Hello.\nOkay, got it.\n[da:greeting]Hi there!\nSure.\n')
    ck = ws / 'runs' / 'aug' / 'checkpoints' / 'step000020.pt'
    code, out = run('synth', '--checkpoint', ck, '--script', script, '--out', tmp_path / 'o')
    assert code == EXIT_OK
    res = json.loads(out[0])
    assert res['synthesized'] == 3 and [e['line'] for e in res['errors']] == [3]
    report = json.loads((tmp_path / 'o' / 'report.json').read_text())
    assert [u['line'] for u in report['utterances']] == [1, 2, 4]
    for u in report['utterances']:
        f = load_features(tmp_path / 'o' / u['path'])
        assert f.mel.shape == (u['frames'], 80) and f.vocoder.shape == (u['frames'], 22)


def test_synth_empty_script(ws, tmp_path):
    script = tmp_path / 'empty.txt'
    script.write_text('')
    ck = ws / 'runs' / 'aug' / 'checkpoints' / 'step000010.pt'
    code, out = run('synth', '--checkpoint', ck, '--script', script, '--out', tmp_path / 'o')
    assert code == EXIT_OK
    report = json.loads((tmp_path / 'o' / 'report.json').read_text())
    assert report['utterances'] == [] and report['errors'] == []


def test_synth_needs_stage_two(ws, tmp_path):
    script = tmp_path / 's.txt'
    script.write_text('Hello.\n')
    ck = ws / 'runs' / 'aug' / 'checkpoints' / 'acoustic_step000010.pt'
    code, _ = run('synth', '--checkpoint', ck, '--script', script, '--out', tmp_path / 'o')
    assert code == EXIT_VALIDATION


def test_rerun_is_a_no_op(ws):
    cks = ws / 'runs' / 'aug' / 'checkpoints'
    before = {p.name: os.stat(p).st_mtime_ns for p in cks.iterdir()}
    code, out = run('train-tts', '--workspace', ws, *TTS_ARGS)
    assert code == EXIT_OK
    assert {p.name: os.stat(p).st_mtime_ns for p in cks.iterdir()} == before


def test_changed_spec_refuses_without_force(ws):
    args = list(TTS_ARGS)
    args[args.index('train.lr=2e-3')] = 'train.lr=1e-3'
    assert run('train-tts', '--workspace', ws, *args)[0] == EXIT_VALIDATION


def test_aug_without_augmented_manifest(ws, capsys):
    code, _ = run('train-tts', '--workspace', ws, '--name', 'noaug', '--system', 'Aug',
                  '--steps', 2, '--set', 'augmented_manifest=manifests/missing.jsonl')
    assert code == EXIT_VALIDATION
    assert 'manifests/missing.jsonl' in capsys.readouterr().err


def test_rank_checkpoints(ws, tmp_path):
    code, out = run('rank-checkpoints', '--checkpoints', ws / 'runs' / 'aug' / 'checkpoints',
                    '--heldout', ws / 'manifests' / 'heldout.jsonl', '--workspace', ws,
                    '--top', 2, '--out', tmp_path / 'r.json')
    assert code == EXIT_OK
    r = json.loads(out[0])
    assert len(r['selected']) == 2 and len(r['ranked']) == 2
    assert json.loads((tmp_path / 'r.json').read_text())['selected'] == r['selected']


def test_rank_without_checkpoints(ws, tmp_path):
    code, _ = run('rank-checkpoints', '--checkpoints', tmp_path, '--heldout',
                  ws / 'manifests' / 'heldout.jsonl', '--workspace', ws)
    assert code == EXIT_VALIDATION


def test_assemble(ws):
    code, out = run('assemble', '--workspace', ws, '--system', 'Adv', '--out',
                    'manifests/adv.jsonl')
    assert code == EXIT_OK
    res = json.loads(out[0])
    assert res['system']['adversary_enabled'] is True
    assert (ws / 'manifests' / 'adv.jsonl').exists()
    assert run('assemble', '--workspace', ws, '--system', 'Aug', '--out', 'x.jsonl')[0] == \
        EXIT_VALIDATION


def test_report(ws, tmp_path):
    synth = tmp_path / 'synth'
    ck = ws / 'runs' / 'aug' / 'checkpoints' / 'step000020.pt'
    assert run('synth', '--checkpoint', ck, '--script', ws / 'scripts' / 'test_script.txt',
               '--out', synth)[0] == EXIT_OK
    code, out = run('report', '--run', ws / 'runs' / 'aug', '--out', tmp_path / 'rep',
                    '--synth', synth)
    assert code == EXIT_OK
    assert out[0] == 'section\tkey\tvalue'
    rows = [line.split('\t') for line in out[1:]]
    assert all(len(r) == 3 for r in rows)
    assert ['run', 'status', 'complete'] in rows
    figs = {r[1]: Path(r[2]) for r in rows if r[0] == 'figure'}
    assert {'loss_acoustic', 'ranking', 'synthesis'} <= set(figs)
    for p in figs.values():
        assert p.exists() and p.read_bytes()[:4] == b'\x89PNG'


def test_logs_are_json_lines(capsys):
    run('parse', '--text', 'Hello.')
    err = capsys.readouterr().err.strip().splitlines()
    assert err
    for line in err:
        rec = json.loads(line)
        assert {'time', 'level', 'logger', 'message'} <= set(rec)
