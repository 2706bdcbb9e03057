import json
from pathlib import Path

import pytest

from convstyle import nat2
from convstyle.config import ExperimentSpec
from convstyle.errors import ValidationFailure
from convstyle.experiment import RunLog, run_experiment

TRAIN = {'steps': 12, 'batch_size': 4, 'lr': 2e-3, 'checkpoint_every': 6, 'hpc_steps': 5}


def spec(root, name, system='Base', **kw):
    return ExperimentSpec(name=name, system=system, workspace=str(root),
                          heldout_manifest='manifests/heldout.jsonl', train=dict(TRAIN), **kw)


@pytest.fixture(scope='module')
def base_run(small_corpus):
    return run_experiment(spec(small_corpus['root'], 'base_a'))


def test_base_emits_checkpoints(base_run):
    assert [p.rsplit('/', 1)[1] for p in base_run.checkpoints] == ['step000006.pt',
                                                                   'step000012.pt']
    model, ck = nat2.load_checkpoint(base_run.checkpoints[-1])
    assert model.stage == 'hpc_predictor' and model.step == 12
    assert ck['extra']['system'] == 'Base'
    assert base_run.top_checkpoint in ('step000006', 'step000012')
    assert {'mel', 'vocoder_pre', 'vocoder_post', 'duration', 'total', 'hpc'} <= \
        set(base_run.final_losses)
    assert 'adversarial' not in base_run.final_losses


def test_runlog_is_reachable(base_run):
    log = RunLog(base_run.out_dir / 'runlog.jsonl')
    kinds = [r['event'] for r in log.records()]
    assert kinds[0] == 'start' and kinds[-1] == 'done'
    acoustic = [r for r in log.records('loss') if r['stage'] == 'acoustic']
    assert [r['step'] for r in acoustic] == list(range(1, 13))
    assert len(log.records('checkpoint')) == 4
    ranking = json.loads((base_run.out_dir / 'ranking.json').read_text())
    assert len(ranking['ranked']) == 2
    rows = (base_run.out_dir / 'train_manifest.jsonl').read_text().splitlines()
    assert len(rows) == len(small_manifest_rows(base_run))


def small_manifest_rows(run):
    spec_d = json.loads((run.out_dir / 'run.json').read_text())['spec']
    return (Path(spec_d['workspace']) / spec_d['manifest']).read_text().splitlines()


def test_determinism(small_corpus, base_run):
    again = run_experiment(spec(small_corpus['root'], 'base_b'))
    assert again.final_losses == base_run.final_losses


def test_adv_records_adversarial_term(small_corpus):
    res = run_experiment(spec(small_corpus['root'], 'adv', 'Adv'))
    assert res.final_losses['adversarial'] > 0
    _, ck = nat2.load_checkpoint(res.checkpoints[-1])
    assert ck['extra']['system'] == 'Adv'


def test_aug_without_augmented_manifest(small_corpus):
    with pytest.raises(ValidationFailure, match='augmented'):
        run_experiment(spec(small_corpus['root'], 'aug', 'Aug'))
    with pytest.raises(ValidationFailure, match='missing.jsonl'):
        run_experiment(spec(small_corpus['root'], 'aug', 'Aug',
                            augmented_manifest='manifests/missing.jsonl'))


def test_unknown_system(small_corpus):
    with pytest.raises(ValidationFailure):
        run_experiment(spec(small_corpus['root'], 'x', 'Fancy'))


def test_spec_yaml_round_trip(tmp_path, small_corpus):
    import yaml
    s = spec(small_corpus['root'], 'yaml')
    p = tmp_path / 'exp.yaml'
    p.write_text(yaml.safe_dump(s.to_dict()))
    assert ExperimentSpec.load(p) == s
    assert ExperimentSpec.load(p, {'system': 'Adv'}).system == 'Adv'
