import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from convstyle.adversary import (AdversaryConfig, SpeakerAdversary, reverse_gradient,
                                 speaker_adversarial_loss)
from convstyle.errors import SpeakerOutOfRange


def test_forward_identity():
    x = torch.tensor([1.5, -2.0], requires_grad=True)
    assert torch.equal(reverse_gradient(x, 1.0), x)


def test_backward_sign_flip():
    x = torch.tensor([1.5, -2.0], requires_grad=True)
    reverse_gradient(x, 1.0).backward(torch.tensor([0.5, -2.0]))
    assert x.grad.tolist() == [-0.5, 2.0]


def test_zero_lambda_blocks_gradient():
    x = torch.tensor([1.5, -2.0], requires_grad=True)
    reverse_gradient(x, 0.0).backward(torch.tensor([0.5, -2.0]))
    assert torch.all(x.grad == 0)


def _ce_grads(adv, x, spk, lam, reverse):
    x = x.clone().requires_grad_(True)
    adv.zero_grad()
    loss = speaker_adversarial_loss(adv(x, lam, reverse=reverse), spk)
    loss.backward()
    return loss.detach(), x.grad.clone(), [p.grad.clone() for p in adv.parameters()]


@pytest.mark.parametrize('lam', [0.0, 0.5, 1.0, 2.0])
def test_end_to_end_sign(lam):
    torch.manual_seed(0)
    adv = SpeakerAdversary(12, 3, 16).double()
    x = torch.randn(2, 5, 12, dtype=torch.float64)
    spk = torch.tensor([0, 2])
    l_r, g_r, p_r = _ce_grads(adv, x, spk, lam, True)
    l_p, g_p, p_p = _ce_grads(adv, x, spk, lam, False)
    assert l_r.item() == l_p.item()     # forward bit-identical
    assert torch.allclose(g_r, -lam * g_p, rtol=1e-6, atol=1e-15)
    for a, b in zip(p_r, p_p):          # classifier sees the un-reversed gradient
        assert torch.equal(a, b)


@settings(max_examples=30, deadline=None)
@given(k=st.integers(2, 8), length=st.integers(1, 10))
def test_uniform_logits_entropy(k, length):
    logits = torch.zeros(length, k)
    ce = speaker_adversarial_loss(logits, torch.tensor(k - 1))
    assert math.isclose(ce.item(), math.log(k), rel_tol=1e-6)


def test_perfect_classifier():
    logits = torch.full((2, 4, 3), -50.0)
    logits[0, :, 1] = 50.0
    logits[1, :, 2] = 50.0
    assert speaker_adversarial_loss(logits, torch.tensor([1, 2])).item() < 1e-12


def test_masked_positions_ignored():
    logits = torch.zeros(1, 3, 2)
    logits[0, 2] = torch.tensor([100.0, -100.0])   # wrong but masked
    mask = torch.tensor([[True, True, False]])
    assert math.isclose(speaker_adversarial_loss(logits, torch.tensor([1]), mask).item(),
                        math.log(2), rel_tol=1e-6)


def test_speaker_out_of_range():
    with pytest.raises(SpeakerOutOfRange):
        speaker_adversarial_loss(torch.zeros(3, 2), torch.tensor(2))


def test_config_validation():
    with pytest.raises(ValueError):
        AdversaryConfig(lam=-1.0)
    with pytest.raises(ValueError):
        AdversaryConfig(num_speakers=1)
    cfg = AdversaryConfig(lam=2.0, warmup_steps=10)
    assert np.allclose([cfg.lambda_at(s) for s in (0, 5, 10, 50)], [0, 1, 2, 2])
