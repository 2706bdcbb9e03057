import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from convstyle import vc
from convstyle.config import VCConfig
from convstyle.dataset import build_vc_items, load_corpus
from convstyle.errors import (DimensionMismatch, EmptyOutput, MissingEncoder, SpeakerOutOfRange,
                              StageMismatch, UntrainedModel)
from convstyle.features import SAMPLE_RATE, log_mel
from oracles import finite_difference_check


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------

def test_equal_rate_identity():
    d = [3, 1, 4, 2]
    frames = np.random.default_rng(0).normal(size=(10, vc.CONTENT_DIM))
    out = vc.resample_to_tts_rate(vc.ContentFrames(frames, 50.0), d, tts_rate=50.0, sigma=0.05)
    assert np.allclose(out, frames, atol=1e-12)


def test_constant_content_stays_constant():
    frames = np.tile(np.linspace(-1, 1, vc.CONTENT_DIM), (23, 1))
    out = vc.resample_to_tts_rate(vc.ContentFrames(frames, 100.0), [4, 7, 0, 1], tts_rate=50.0)
    assert out.shape == (12, vc.CONTENT_DIM)
    assert np.allclose(out, frames[0], atol=1e-12)


def test_boundary_alignment_oracle():
    # half-rate encoder: symbol 0 spans source [0, 2), symbol 1 spans [2, 5)
    d = [4, 6]
    frames = np.zeros((5, vc.CONTENT_DIM))
    frames[2:] = 1.0
    out = vc.resample_to_tts_rate(vc.ContentFrames(frames, 25.0), d, tts_rate=50.0)
    change = np.flatnonzero(np.abs(np.diff(out[:, 0])) > 1e-9)
    assert change.tolist() == [round(d[0]) - 1]
    assert np.all(out[:4] == 0) and np.allclose(out[4:], 1.0)


@settings(max_examples=60, deadline=None)
@given(d=st.lists(st.integers(0, 9), min_size=1, max_size=8),
       rate=st.sampled_from([25.0, 50.0, 100.0]))
def test_resample_rows_sum_to_one(d, rate):
    if sum(d) == 0:
        with pytest.raises(EmptyOutput):
            vc.resample_matrix(d, 4, rate, 86.0)
        return
    n = int(math.ceil(sum(d) * rate / vc.TTS_RATE)) + 1
    W = vc.resample_matrix(d, n, rate)
    assert W.shape == (sum(d), n)
    assert np.all(W >= 0) and np.allclose(W.sum(1), 1.0, atol=1e-9)


# --------------------------------------------------------------------------
# discretisation
# --------------------------------------------------------------------------

def test_saturation():
    logits = torch.tensor([20.0, -20.0]).repeat(vc.N_CODES)
    for shift in np.linspace(-5, 5, 11):
        noisy = logits + torch.tensor([shift, -shift]).repeat(vc.N_CODES)
        code = vc.codes_from_logits(noisy, mode='relaxed', noise=False)
        assert torch.all(code.h > 1 - 1e-12)
    gen = torch.Generator().manual_seed(0)
    code = vc.codes_from_logits(logits.expand(50, -1), mode='hard', generator=gen)
    assert torch.all(code.h == 1)


def test_seeded_reproducibility():
    logits = torch.zeros(40, 2 * vc.N_CODES)
    a = vc.codes_from_logits(logits, mode='relaxed', generator=torch.Generator().manual_seed(7)).h
    b = vc.codes_from_logits(logits, mode='relaxed', generator=torch.Generator().manual_seed(7)).h
    assert a.numpy().tobytes() == b.numpy().tobytes()
    assert a.shape == (40, vc.N_CODES)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 20), tau=st.floats(0.1, 5.0))
def test_pair_normalisation(seed, tau):
    gen = torch.Generator().manual_seed(seed)
    logits = torch.randn(7, vc.N_CODES, 2, generator=gen, dtype=torch.float64) * 4
    p = vc.gumbel_pairs(logits, tau, generator=gen)
    assert torch.allclose(p.sum(-1), torch.ones(7, vc.N_CODES, dtype=torch.float64), atol=1e-6)
    assert torch.all((p >= 0) & (p <= 1))


def test_hard_codes_binary():
    code = vc.codes_from_logits(torch.randn(9, 2 * vc.N_CODES), mode='hard',
                                generator=torch.Generator().manual_seed(1))
    assert set(torch.unique(code.h).tolist()) <= {0.0, 1.0}


def test_straight_through_equivalence():
    """Hard and relaxed modes move a 1-pair toy's parameters identically."""
    weights = []
    for mode in ('hard', 'relaxed'):
        torch.manual_seed(0)
        proj = torch.nn.Linear(3, 2).double()
        x = torch.tensor([[0.3, -1.2, 0.8]], dtype=torch.float64)
        code = vc.codes_from_logits(proj(x), mode=mode, generator=torch.Generator().manual_seed(3))
        (2.5 * code.h).sum().backward()
        with torch.no_grad():
            for p in proj.parameters():
                p -= 0.1 * p.grad
        weights.append([p.detach().clone() for p in proj.parameters()])
    for a, b in zip(*weights):
        assert torch.equal(a, b)


def test_straight_through_jacobian():
    logits = torch.randn(1, 2, dtype=torch.float64)
    fn = {m: (lambda z, m=m: vc.codes_from_logits(
        z, mode=m, generator=torch.Generator().manual_seed(5)).h) for m in ('hard', 'relaxed')}
    ja = torch.autograd.functional.jacobian(fn['hard'], logits)
    jb = torch.autograd.functional.jacobian(fn['relaxed'], logits)
    assert torch.allclose(ja, jb, atol=0, rtol=0)


def test_projection_bias_zero():
    model = vc.VCModel(VCConfig.toy())
    assert torch.all(model.projection.bias == 0)
    assert model.projection.out_features == 2 * vc.N_CODES == 64


# --------------------------------------------------------------------------
# speaker integration
# --------------------------------------------------------------------------

def test_block_placement():
    h = torch.tensor([[1.0, 0.0, 1.0] + [0.0] * 29])
    z = vc.integrate_speaker(h, 0, 3)
    assert torch.equal(z[0, :32], h[0]) and torch.all(z[0, 32:] == 0)
    z = vc.integrate_speaker(h, 2, 3)
    assert torch.equal(z[0, 64:], h[0]) and torch.all(z[0, :64] == 0)


@settings(max_examples=30, deadline=None)
@given(K=st.sampled_from([2, 3, 4]), T=st.integers(1, 12), seed=st.integers(0, 999))
def test_block_sparsity_and_norm(K, T, seed):
    h = (torch.rand(T, vc.N_CODES, generator=torch.Generator().manual_seed(seed)) > 0.5).double()
    for k in range(K):
        z = vc.integrate_speaker(h, k, K).reshape(T, K, vc.N_CODES)
        nonzero = z.abs().sum(-1) > 0
        assert not nonzero[:, [j for j in range(K) if j != k]].any()
        assert torch.allclose(z.norm(dim=(1, 2)), h.norm(dim=1))
    zb = vc.integrate_speaker(h[None].expand(K, -1, -1), torch.arange(K), K)
    for k in range(K):
        assert torch.equal(zb[k], vc.integrate_speaker(h, k, K))


def test_speaker_out_of_range():
    with pytest.raises(SpeakerOutOfRange):
        vc.integrate_speaker(torch.zeros(2, 32), 3, 3)
    with pytest.raises(SpeakerOutOfRange):
        vc.integrate_speaker(torch.zeros(2, 32), -1, 3)


# --------------------------------------------------------------------------
# content encoders
# --------------------------------------------------------------------------

def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        vc.ContentFrames(np.zeros((5, 100)), 50.0)


def test_precomputed_passthrough(tmp_path):
    frames = np.random.default_rng(0).normal(size=(9, 768)).astype(np.float32)
    np.save(tmp_path / 'u1.npy', frames)
    enc = vc.PrecomputedContent(tmp_path)
    assert np.array_equal(enc.load('u1').frames, frames)
    with pytest.raises(MissingEncoder):
        enc.load('nope')
    with pytest.raises(MissingEncoder):
        vc.PrecomputedContent(tmp_path / 'missing')
    model = vc.VCModel(VCConfig.toy(), builtin_encoder=False)
    with pytest.raises(MissingEncoder):
        vc.encode_content(model, np.zeros(1000))


def test_builtin_encoder_shape():
    model = vc.VCModel(VCConfig.toy())
    for n in (22050, 10000, 441):
        cf = vc.encode_content(model, np.sin(np.arange(n) * 0.05))
        assert cf.frames.shape == (math.ceil(n / (SAMPLE_RATE / 50.0)), 768)
        assert cf.frame_rate == 50.0


def test_tilt_removed_by_frontend():
    t = np.arange(SAMPLE_RATE // 2) / SAMPLE_RATE
    wave = np.sin(2 * np.pi * 180 * t) + 0.5 * np.sin(2 * np.pi * 900 * t)
    tilted = np.convolve(wave, [1.0, -0.7])[:len(wave)]
    a, b = vc.encoder_frontend(wave), vc.encoder_frontend(tilted)
    raw = np.abs(log_mel(wave, hop=441) - log_mel(tilted, hop=441))[2:-2].mean()
    assert np.abs(a - b)[2:-2].mean() < 0.2 * raw


# --------------------------------------------------------------------------
# training and conversion
# --------------------------------------------------------------------------

@pytest.fixture(scope='module')
def vc_items(small_corpus, lexicon):
    corpus = load_corpus(small_corpus['manifest'], lexicon)
    return build_vc_items(corpus, small_corpus['manifest'])


@pytest.fixture(scope='module')
def trained_vc(vc_items):
    torch.manual_seed(0)
    model = vc.VCModel(VCConfig.toy(n_speakers=4))
    hist = vc.train_vc(model, vc_items, steps=200, batch_size=8, lr=2e-3, seed=0)
    return model, hist


def test_freeze_boundary_6_of_12(vc_items):
    torch.manual_seed(0)
    model = vc.VCModel(VCConfig.toy(encoder_layers=12, freeze_layers=6))
    layers = model.encoder.layer_list()
    assert len(layers) == 12
    before = [[p.clone() for p in layer.parameters()] for layer in layers]
    proj = model.projection.weight.clone()
    vc.train_vc(model, vc_items[:4], steps=1, batch_size=4)
    for i, layer in enumerate(layers):
        same = all(torch.equal(a, b) for a, b in zip(before[i], layer.parameters()))
        assert same == (i < 6), i
    assert not torch.equal(proj, model.projection.weight)


def test_perfect_reconstruction_zero_loss(vc_items):
    model = vc.VCModel(VCConfig.toy())
    batch = vc.vc_collate(vc_items[:2], model.cfg)
    out = model(batch, torch.Generator().manual_seed(0))
    voc_t = batch['vocoder']
    out.update(mel=batch['mel'], voc_pre=voc_t, voc_post=voc_t)
    terms, total = vc.vc_loss(model, batch, out)
    assert total.item() == 0


def test_loss_decreases(trained_vc):
    _, hist = trained_vc
    first = np.mean([r['total'] for r in hist[:10]])
    last = np.mean([r['total'] for r in hist[-10:]])
    assert last < 0.8 * first


def test_convert_contract(trained_vc, vc_items):
    model, _ = trained_vc
    item = vc_items[0]
    outs = [vc.convert(model, item, k) for k in range(model.cfg.n_speakers)]
    for r in outs:
        assert r.features.mel.shape == (int(item.durations.sum()), 80)
        assert r.features.vocoder.shape == (int(item.durations.sum()), 22)
        assert np.array_equal(r.features.durations, item.durations)
        assert r.style == 'conversational'
        assert r.h.tobytes() == outs[0].h.tobytes()
    assert outs[1].speaker_id == 1
    assert not np.array_equal(outs[0].features.mel, outs[1].features.mel)


def test_convert_errors(trained_vc, vc_items):
    model, _ = trained_vc
    with pytest.raises(SpeakerOutOfRange):
        vc.convert(model, vc_items[0], model.cfg.n_speakers)
    with pytest.raises(UntrainedModel):
        vc.convert(vc.VCModel(VCConfig.toy()), vc_items[0], 0)


def test_checkpoint_roundtrip(trained_vc, vc_items, tmp_path):
    model, _ = trained_vc
    vc.save_vc_checkpoint(tmp_path / 'vc.pt', model)
    loaded, _ = vc.load_vc_checkpoint(tmp_path / 'vc.pt')
    assert loaded.stage == 'frozen'
    a = vc.convert(model, vc_items[1], 2).features.mel
    b = vc.convert(loaded, vc_items[1], 2).features.mel
    assert np.array_equal(a, b)
    with pytest.raises(StageMismatch):
        vc.vc_train_step(loaded, None, vc.vc_collate(vc_items[:1], loaded.cfg))


def test_gradient_check(vc_items):
    torch.manual_seed(0)
    model = vc.VCModel(VCConfig.toy(train_mode='relaxed')).double().eval()
    from convstyle.nat2 import feature_normalizer
    model.set_normalizer(*feature_normalizer(vc_items))
    batch = {k: (v.double() if v.is_floating_point() else v)
             for k, v in vc.vc_collate(vc_items[:2], model.cfg).items()}

    def loss():
        return vc.vc_loss(model, batch, generator=torch.Generator().manual_seed(0))[1]
    params = [p for p in model.parameters() if p.requires_grad]
    assert finite_difference_check(loss, params) < 1e-3
