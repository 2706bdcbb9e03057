import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from convstyle import nat2
from convstyle.config import ModelConfig
from convstyle.errors import (EmptyOutput, HpcShapeMismatch, MissingBaseCheckpoint, StageMismatch,
                              UntrainedModel, VocabularyMismatch)
from convstyle.features import HPCVector
from convstyle.frontend import build_symbol_sequence, encode_symbol_ids, parse_markup
from oracles import finite_difference_check, weight_oracle


def upsample_weights(d, sigma):
    d = nat2.round_half_up(torch.tensor(d, dtype=torch.float64))
    return nat2.gaussian_weights(d[None], torch.tensor(sigma, dtype=torch.float64)[None],
                                 int(d.sum()))[0].numpy()


def test_single_symbol():
    enc = torch.randn(1, 5, dtype=torch.float64)
    out = nat2.gaussian_upsample(enc, [3.0], [0.7])
    assert out.shape == (3, 5)
    assert torch.allclose(out, enc.expand(3, 5), atol=1e-12)


def test_wide_sigma_symmetry():
    w = upsample_weights([2, 2], [10.0, 10.0])
    assert np.allclose(w, w[::-1, ::-1], atol=1e-15)      # mirror symmetric
    # closest/farthest centre distances are 0.5 and 2.5 frames
    bound = 1 / (1 + math.exp(-6 / 200)) - 0.5
    assert np.max(np.abs(w - 0.5)) <= bound + 1e-15
    torch.manual_seed(0)
    base = torch.randn(4, dtype=torch.float64)
    enc = torch.stack([base, base + 0.1 * (2 * torch.rand(4, dtype=torch.float64) - 1)])
    out = nat2.gaussian_upsample(enc, [2.0, 2.0], [10.0, 10.0])
    assert torch.allclose(out, enc.mean(0).expand(4, 4), atol=1e-3, rtol=0)
    assert torch.allclose(out.mean(0), enc.mean(0), atol=1e-12)


def test_weight_oracle_fixed_case():
    assert np.allclose(upsample_weights([1, 2], [0.3, 0.3]), weight_oracle([1, 2], [0.3, 0.3]),
                       atol=1e-9, rtol=0)


def test_empty_output():
    with pytest.raises(EmptyOutput):
        nat2.gaussian_upsample(torch.ones(2, 3), [0.2, 0.4], [1.0, 1.0])


cases = st.integers(1, 8).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0.0, 6.0), min_size=n, max_size=n),
    st.lists(st.floats(0.2, 5.0), min_size=n, max_size=n)))


@settings(max_examples=100, deadline=None)
@given(cases)
def test_upsampling_properties(case):
    d, sigma = case
    T = int(sum(math.floor(x + 0.5) for x in d))
    if T < 1:
        with pytest.raises(EmptyOutput):
            nat2.gaussian_upsample(torch.ones(len(d), 2), d, sigma)
        return
    w = upsample_weights(d, sigma)
    assert w.shape == (T, len(d))
    assert np.all(w >= 0) and np.allclose(w.sum(1), 1.0, atol=1e-6)
    assert np.allclose(w, weight_oracle(d, sigma), atol=1e-9, rtol=0)
    enc = torch.randn(len(d), 3, dtype=torch.float64)
    out = nat2.gaussian_upsample(enc, d, sigma).numpy()
    lo, hi = enc.min(0).values.numpy(), enc.max(0).values.numpy()
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_round_half_up():
    assert nat2.round_half_up(torch.tensor([0.5, 1.5, 2.49, 0.49])).tolist() == [1, 2, 2, 0]


# --------------------------------------------------------------------------
# model fixtures
# --------------------------------------------------------------------------

@pytest.fixture(scope='module')
def toy_cfg(tables):
    return ModelConfig.toy(n_joint=len(tables.joint), n_speakers=4)


@pytest.fixture(scope='module')
def trained(small_items, toy_cfg):
    """Acoustic stage then HPC predictor, on the small toy corpus."""
    torch.manual_seed(0)
    model = nat2.NAT2(toy_cfg)
    hist = nat2.train_acoustic(model, small_items, steps=250, batch_size=8, lr=2e-3, seed=0)
    before = {k: v.clone() for k, v in model.state_dict().items() if not k.startswith('hpc_predictor.')}
    hpc_hist = nat2.train_hpc_predictor(model, small_items, steps=250, batch_size=8, lr=3e-3)
    model.eval()
    return {'model': model, 'hist': hist, 'hpc_hist': hpc_hist, 'before': before}


def _seq(lexicon, text='[da:greeting]Hello there, thanks for calling.[/da]'):
    return build_symbol_sequence(parse_markup(text), lexicon)


def _zero_hpc(seq):
    return HPCVector(np.zeros(3), np.zeros((seq.num_words, 3)))


# --------------------------------------------------------------------------
# encoder
# --------------------------------------------------------------------------

def test_encode_shape_and_speaker_slice(lexicon, tables, toy_cfg):
    torch.manual_seed(1)
    model = nat2.NAT2(toy_cfg).eval()
    seq = _seq(lexicon)
    ids = encode_symbol_ids(seq, tables)
    with torch.no_grad():
        a = nat2.encode(model, ids, 0, _zero_hpc(seq), seq.word_indices())
        b = nat2.encode(model, ids, 2, _zero_hpc(seq), seq.word_indices())
    assert a.shape == (len(seq), toy_cfg.d_enc)
    diff = (a != b).any(0).numpy()
    spk = slice(toy_cfg.d_fe, toy_cfg.d_fe + toy_cfg.d_spk)
    assert diff[spk].all() and not diff[:spk.start].any() and not diff[spk.stop:].any()


def test_encode_errors(lexicon, tables, toy_cfg):
    model = nat2.NAT2(toy_cfg).eval()
    seq = _seq(lexicon)
    ids = encode_symbol_ids(seq, tables)
    bad = HPCVector(np.zeros(3), np.zeros((seq.num_words + 1, 3)))
    with pytest.raises(HpcShapeMismatch):
        nat2.encode(model, ids, 0, bad, seq.word_indices())
    ids2 = ids.copy()
    ids2[0, 0] = toy_cfg.n_joint + 3
    with pytest.raises(VocabularyMismatch):
        nat2.encode(model, ids2, 0, _zero_hpc(seq), seq.word_indices())


def test_duration_range_contract(lexicon, tables, toy_cfg):
    model = nat2.NAT2(toy_cfg).eval()
    seq = _seq(lexicon)
    with torch.no_grad():
        enc = nat2.encode(model, encode_symbol_ids(seq, tables), 1, _zero_hpc(seq), seq.word_indices())
        a = nat2.predict_duration_range(model, enc)
        b = nat2.predict_duration_range(model, enc)
    assert a.durations.shape == a.ranges.shape == (len(seq),)
    assert torch.all(a.ranges > 0) and torch.all(a.durations >= 0)
    assert torch.equal(a.durations, b.durations) and torch.equal(a.ranges, b.ranges)


# --------------------------------------------------------------------------
# decoder
# --------------------------------------------------------------------------

def test_decoder_length_and_postnet_identity(toy_cfg):
    torch.manual_seed(0)
    model = nat2.NAT2(toy_cfg).eval()
    d = torch.tensor([2.0, 0.0, 3.0, 1.0])
    up = torch.randn(int(d.sum()), toy_cfg.d_enc)
    with torch.no_grad():
        free = nat2.decode_frames(model, up, d)
        tf = nat2.decode_frames(model, up, d, mel_target=np.zeros((6, 80), np.float32))
        tf2 = nat2.decode_frames(model, up, d, mel_target=np.zeros((6, 80), np.float32))
    for out in (free, tf):
        assert out.mel.shape == (6, 80) and out.vocoder_pre.shape == out.vocoder_post.shape == (6, 22)
        assert np.array_equal(out.vocoder_pre, out.vocoder_post)
    assert np.array_equal(tf.mel, tf2.mel)


def test_perfect_prediction_zero_loss(small_items, toy_cfg):
    model = nat2.NAT2(toy_cfg).eval()
    batch = nat2.collate(small_items[:3])
    out = model(batch)
    mel_t = (batch['mel'] - model.mel_mean) / model.mel_std
    voc_t = (batch['vocoder'] - model.voc_mean) / model.voc_std
    out.update(mel=mel_t, voc_pre=voc_t, voc_post=voc_t, dur_pred=batch['durations'])
    terms, total = nat2.tts_loss(model, batch, out=out)
    assert all(terms[k].item() == 0 for k in ('mel', 'vocoder_pre', 'vocoder_post', 'duration'))


def test_base_vs_adversarial_differ_by_ce(small_items, toy_cfg):
    torch.manual_seed(3)
    model = nat2.NAT2(toy_cfg).double().eval()
    batch = nat2.collate(small_items[:4], dtype=torch.float64)
    with torch.no_grad():
        base, tb = nat2.tts_loss(model, batch, 'base')
        adv, ta = nat2.tts_loss(model, batch, 'adversarial')
    assert set(adv) - set(base) == {'adversarial'}
    for k in base:
        assert base[k].item() == adv[k].item()
    assert math.isclose(ta.item() - tb.item(), adv['adversarial'].item(), rel_tol=1e-9)


def test_loss_record_decomposition(small_items, toy_cfg):
    torch.manual_seed(0)
    model = nat2.NAT2(toy_cfg)
    opt = torch.optim.Adam(model.acoustic_parameters(), 1e-3)
    rec = nat2.tts_train_step(model, opt, nat2.collate(small_items[:4]), 'adversarial')
    terms = [v for k, v in rec.items() if k not in ('total', 'acoustic')]
    assert abs(rec['total'] - math.fsum(terms)) <= 1e-9
    assert model.step == 1


def test_stage_errors(small_items, toy_cfg, lexicon, tables):
    model = nat2.NAT2(toy_cfg)
    with pytest.raises(MissingBaseCheckpoint):
        nat2.train_hpc_predictor(model, small_items, steps=1)
    with pytest.raises(UntrainedModel):
        nat2.synthesize(model, _seq(lexicon), tables, 0)
    model.stage = 'hpc_predictor'
    with pytest.raises(StageMismatch):
        nat2.tts_train_step(model, None, nat2.collate(small_items[:2]))


# --------------------------------------------------------------------------
# trained toy model
# --------------------------------------------------------------------------

def test_loss_decreases(trained):
    h = trained['hist']
    first = np.mean([r['total'] for r in h[:10]])
    last = np.mean([r['total'] for r in h[-10:]])
    assert last < 0.7 * first


def test_frozen_base_bit_identical(trained):
    after = trained['model'].state_dict()
    for k, v in trained['before'].items():
        assert torch.equal(v, after[k]), k
    assert trained['model'].stage == 'hpc_predictor'


def test_hpc_predictor_beats_mean(trained, small_items):
    model = trained['model']
    err, var = [], []
    gt = np.concatenate([np.vstack([it.hpc.utterance_level, it.hpc.word_level]) for it in small_items])
    mean = gt.mean(0)
    with torch.no_grad():
        for it in small_items:
            p = nat2.predict_hpc(model, it.ids, it.word_index)
            pred = np.vstack([p.utterance_level, p.word_level])
            ref = np.vstack([it.hpc.utterance_level, it.hpc.word_level])
            err.append(((pred - ref) ** 2).ravel())
            var.append(((ref - mean) ** 2).ravel())
    assert np.mean(np.concatenate(err)) < np.mean(np.concatenate(var))


def test_zero_hpc_changes_encoding(trained, small_items):
    it = small_items[0]
    model = trained['model']
    with torch.no_grad():
        a = nat2.encode(model, it.ids, it.speaker, it.hpc, it.word_index)
        z = HPCVector(np.zeros(3), np.zeros_like(it.hpc.word_level))
        b = nat2.encode(model, it.ids, it.speaker, z, it.word_index)
    assert not torch.equal(a, b)


def test_synthesis_contract(trained, lexicon, tables):
    model = trained['model']
    seq = _seq(lexicon)
    a = nat2.synthesize(model, seq, tables, 1)
    b = nat2.synthesize(model, seq, tables, 1, hpc_offsets=np.zeros(3))
    assert np.array_equal(a.mel, b.mel) and np.array_equal(a.durations, b.durations)
    T = int(a.durations.sum())
    assert a.mel.shape == (T, 80) and a.vocoder_post.shape == (T, 22)
    hpc = nat2.predict_hpc(model, encode_symbol_ids(seq, tables), seq.word_indices())
    assert np.allclose(a.hpc.utterance_level, hpc.utterance_level)


def test_rate_offset_lengthens(trained, lexicon, tables):
    from convstyle.toy import CONVERSATIONAL_LINES
    model = trained['model']
    longer = []
    for line in CONVERSATIONAL_LINES[:20]:
        seq = build_symbol_sequence(parse_markup(line), lexicon)
        a = nat2.synthesize(model, seq, tables, 0)
        b = nat2.synthesize(model, seq, tables, 0, hpc_offsets=[0.0, 0.0, 1.0])
        longer.append(b.durations.sum() > a.durations.sum())
    assert np.mean(longer) >= 0.9


def test_dialog_tag_changes_output(trained, lexicon, tables):
    model = trained['model']
    a = nat2.synthesize(model, _seq(lexicon, '[da:greeting]Hello there.[/da]'), tables, 0)
    b = nat2.synthesize(model, _seq(lexicon, 'Hello there.'), tables, 0)
    assert not np.array_equal(a.mel[:min(len(a.mel), len(b.mel))], b.mel[:min(len(a.mel), len(b.mel))])


def test_checkpoint_roundtrip(trained, tables, tmp_path, lexicon):
    model = trained['model']
    nat2.save_checkpoint(tmp_path / 'm.pt', model, tables)
    loaded, meta = nat2.load_checkpoint(tmp_path / 'm.pt')
    assert loaded.step == model.step and loaded.stage == 'hpc_predictor'
    seq = _seq(lexicon)
    assert np.array_equal(nat2.synthesize(model, seq, tables, 2).mel,
                          nat2.synthesize(loaded, seq, tables, 2).mel)


# --------------------------------------------------------------------------
# gradient check
# --------------------------------------------------------------------------

def test_gradient_check(small_items, toy_cfg):
    torch.manual_seed(0)
    model = nat2.NAT2(toy_cfg).double().eval()
    model.set_normalizer(*nat2.feature_normalizer(small_items))
    batch = nat2.collate(small_items[:2], dtype=torch.float64)
    params = [p for p in model.acoustic_parameters()]
    assert finite_difference_check(lambda: nat2.tts_loss(model, batch, 'base')[1], params) < 1e-3
    # the reversal layer makes upstream gradients deliberately non-conservative;
    # the classifier itself still descends the true objective
    adv = list(model.adversary.parameters())
    loss = lambda: nat2.tts_loss(model, batch, 'adversarial')[1]   # noqa: E731
    assert finite_difference_check(loss, adv, seed=1) < 1e-3
