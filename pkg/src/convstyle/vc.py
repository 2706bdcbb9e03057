"""Prosody-preserving voice conversion as a conditional discrete autoencoder.

Content frames (768 wide, native encoder rate) are resampled to the TTS frame
grid symbol by symbol, projected to 32 binary variables through a two-way
Gumbel-Softmax, placed in the target speaker's block of an outer-product
latent and decoded by the same spectral decoder architecture as the TTS model.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import HOP_LENGTH, SAMPLE_RATE
from .config import VCConfig
from .errors import (DimensionMismatch, EmptyOutput, MissingEncoder, SpeakerOutOfRange,
                     StageMismatch, UntrainedModel)
from .features import AcousticFeatures, f0_from_vocoder, log_mel
from .nat2 import (N_MEL, N_VOC, SpectralDecoder, gaussian_weights, l1_l2, lengths_to_mask,
                   positional_encoding)

log = logging.getLogger(__name__)

TTS_RATE = SAMPLE_RATE / HOP_LENGTH
CONTENT_DIM = 768
N_CODES = 32


@dataclass
class ContentFrames:
    frames: torch.Tensor | np.ndarray    # [T_enc, 768]
    frame_rate: float

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] != CONTENT_DIM:
            raise DimensionMismatch(f'content frames {tuple(self.frames.shape)}, expected [T, {CONTENT_DIM}]')


@dataclass
class DiscreteCode:
    h: torch.Tensor                      # [..., T, 32]
    mode: str                            # relaxed | hard


# --------------------------------------------------------------------------
# content encoders
# --------------------------------------------------------------------------

def encoder_frontend(wave: np.ndarray, rate: float = 50.0, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Log-mel at the encoder rate with per-utterance mean removal, ``[T_enc, 80]``.

    Subtracting each bin's utterance mean cancels any fixed linear filter,
    spectral tilt included, before the network sees the signal.
    """
    hop = int(round(sr / rate))
    mel = log_mel(np.asarray(wave, dtype=np.float64), hop=hop)
    return (mel - mel.mean(0, keepdims=True)).astype(np.float32)


class BuiltinContentEncoder(nn.Module):
    """Layered encoder: input conv, residual conv blocks, a final recurrent layer.

    The first ``freeze_layers`` layers keep their initial weights for good.
    """

    def __init__(self, cfg: VCConfig):
        super().__init__()
        if not 0 <= cfg.freeze_layers <= cfg.encoder_layers or cfg.encoder_layers < 2:
            raise ValueError('need 2 <= encoder_layers and 0 <= freeze_layers <= encoder_layers')
        w = cfg.encoder_width
        self.rate = cfg.encoder_rate
        layers: list[nn.Module] = [nn.Conv1d(cfg.frontend_bins, w, 5, padding=2)]
        layers += [nn.Conv1d(w, w, 5, padding=2) for _ in range(cfg.encoder_layers - 2)]
        self.layers = nn.ModuleList(layers)
        self.rnn = nn.GRU(w, w // 2, batch_first=True, bidirectional=True)
        self.out = nn.Linear(w, CONTENT_DIM)
        self.freeze_layers = cfg.freeze_layers
        for layer in self.layer_list()[:cfg.freeze_layers]:
            for p in layer.parameters():
                p.requires_grad_(False)

    def layer_list(self) -> list[nn.Module]:
        return [*self.layers, self.rnn]

    def forward(self, x, lengths=None):   # x: [B, T_enc, bins]
        mask = None
        if lengths is not None:
            mask = lengths_to_mask(lengths, x.shape[1])[:, None, :].to(x.dtype)
        y = x.transpose(1, 2)
        for i, conv in enumerate(self.layers):
            z = torch.relu(conv(y))
            y = z if i == 0 else y + z
            if mask is not None:
                y = y * mask
        y, _ = self.rnn(y.transpose(1, 2))
        return self.out(y)


class PrecomputedContent:
    """External 768-wide features stored as ``<utterance_id>.npy`` in one directory."""

    def __init__(self, directory: str | Path, frame_rate: float = 50.0):
        self.directory = Path(directory)
        self.frame_rate = frame_rate
        if not self.directory.is_dir():
            raise MissingEncoder(f'content feature directory {self.directory} not found')

    def load(self, utterance_id: str) -> ContentFrames:
        path = self.directory / f'{utterance_id}.npy'
        if not path.exists():
            raise MissingEncoder(f'no content features for {utterance_id} in {self.directory}')
        return ContentFrames(np.load(path).astype(np.float32), self.frame_rate)


def encode_content(model: VCModel, source) -> ContentFrames:
    """``source`` is a waveform (built-in encoder) or ready ``ContentFrames``."""
    if isinstance(source, ContentFrames):
        return source
    if model.encoder is None:
        raise MissingEncoder('model has no built-in encoder; pass precomputed content frames')
    front = torch.from_numpy(encoder_frontend(source, model.cfg.encoder_rate))[None]
    return ContentFrames(model.encoder(front)[0], model.cfg.encoder_rate)


# --------------------------------------------------------------------------
# resampling, discretisation, speaker integration
# --------------------------------------------------------------------------

def resample_matrix(durations, n_source: int, source_rate: float, tts_rate: float = TTS_RATE,
                    sigma: float = 0.5) -> np.ndarray:
    """Weights ``[T, n_source]`` mapping encoder frames onto the TTS grid.

    Each symbol's encoder-rate span is its TTS duration scaled by the rate
    ratio. Inside a symbol, the overlapping encoder frames are treated as
    upsampling sources whose target lengths are their overlaps rescaled to
    the symbol's TTS duration, and Gaussian upsampling fills its frames. A
    symbol's frames therefore draw only on its own encoder span.
    """
    d = np.asarray(durations, dtype=np.int64)
    T = int(d.sum())
    if T < 1:
        raise EmptyOutput('durations sum to zero')
    ratio = source_rate / tts_rate
    W = np.zeros((T, n_source))
    src_end = np.cumsum(d) * ratio
    t0 = 0
    for i, di in enumerate(d):
        if di == 0:
            continue
        a, b = src_end[i] - di * ratio, src_end[i]
        j = np.arange(int(math.floor(a)), int(math.ceil(b)))
        overlap = np.minimum(j + 1, b) - np.maximum(j, a)
        keep = overlap > 1e-12
        j, overlap = j[keep], overlap[keep]
        local = torch.as_tensor(overlap * di / overlap.sum(), dtype=torch.float64)
        w = gaussian_weights(local[None], torch.full_like(local, sigma)[None], int(di))[0].numpy()
        np.add.at(W, (slice(t0, t0 + di), np.clip(j, 0, n_source - 1)), w)
        t0 += di
    return W


def resample_to_tts_rate(cf: ContentFrames, durations, tts_rate: float = TTS_RATE,
                         sigma: float = 0.5):
    """Content frames on the TTS grid, ``[sum(durations), 768]``."""
    frames = cf.frames
    W = resample_matrix(durations, frames.shape[0], cf.frame_rate, tts_rate, sigma)
    if isinstance(frames, torch.Tensor):
        return torch.as_tensor(W, dtype=frames.dtype) @ frames
    return W @ frames


def gumbel_pairs(logits: torch.Tensor, temperature: float = 1.0, noise: bool = True,
                 generator: torch.Generator | None = None) -> torch.Tensor:
    """Two-way Gumbel-Softmax over the last axis of ``[..., N, 2]``."""
    if temperature <= 0:
        raise ValueError('temperature must be positive')
    if noise:
        u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype)
        u = u.clamp(1e-10, 1 - 1e-10)
        logits = logits - torch.log(-torch.log(u))
    return torch.softmax(logits / temperature, dim=-1)


def codes_from_logits(logits: torch.Tensor, temperature: float = 1.0, mode: str = 'hard',
                      noise: bool = True, generator: torch.Generator | None = None) -> DiscreteCode:
    """``logits [..., 2N]`` as ``N`` consecutive pairs; the code is category 1 of each pair.

    Hard mode outputs the argmax indicator and routes gradients through the
    relaxed probability (straight-through).
    """
    if mode not in ('hard', 'relaxed'):
        raise ValueError(f'unknown mode {mode!r}')
    pairs = logits.reshape(*logits.shape[:-1], -1, 2)
    p = gumbel_pairs(pairs, temperature, noise, generator)[..., 0]
    if mode == 'relaxed':
        return DiscreteCode(p, mode)
    hard = (p > 0.5).to(p.dtype)
    return DiscreteCode(hard + (p - p.detach()), mode)   # exact 0/1 forward


def discretize(frames, projection: nn.Linear, temperature: float = 1.0, mode: str = 'hard',
               noise: bool = True, generator: torch.Generator | None = None) -> DiscreteCode:
    """Project ``[..., T, 768]`` to 32 logit pairs and discretise."""
    frames = torch.as_tensor(frames, dtype=projection.weight.dtype)
    return codes_from_logits(projection(frames), temperature, mode, noise, generator)


def integrate_speaker(h, speaker_id, K: int) -> torch.Tensor:
    """Outer product of a one-hot speaker with ``h``: ``[..., T, K*32]``.

    ``speaker_id`` is an int for ``h [T, N]`` or a ``[B]`` tensor for ``h [B, T, N]``.
    """
    h = h.h if isinstance(h, DiscreteCode) else torch.as_tensor(h)
    sid = torch.as_tensor(speaker_id)
    if sid.numel() and (int(sid.min()) < 0 or int(sid.max()) >= K):
        raise SpeakerOutOfRange(f'speaker {speaker_id} outside [0, {K})')
    s = nn.functional.one_hot(sid.long(), K).to(h.dtype)
    if h.ndim == 2:
        z = s[:, None, None] * h[None]              # [K, T, N]
        return z.permute(1, 0, 2).reshape(h.shape[0], -1)
    z = s[:, None, :, None] * h[:, :, None, :]      # [B, T, K, N]
    return z.reshape(h.shape[0], h.shape[1], -1)


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

class VCModel(nn.Module):
    def __init__(self, cfg: VCConfig, builtin_encoder: bool = True):
        super().__init__()
        self.cfg = cfg
        self.stage = 'training'
        self.step = 0
        self.encoder = BuiltinContentEncoder(cfg) if builtin_encoder else None
        self.projection = nn.Linear(cfg.content_dim, 2 * cfg.n_codes)
        nn.init.zeros_(self.projection.bias)
        self.decoder = SpectralDecoder(cfg.n_speakers * cfg.n_codes + cfg.pos_dim, cfg.prenet_dim,
                                       cfg.prenet_dropout, cfg.decoder_dim, cfg.decoder_layers,
                                       cfg.postnet_channels, cfg.postnet_layers, cfg.postnet_kernel)
        self.register_buffer('mel_mean', torch.zeros(N_MEL))
        self.register_buffer('mel_std', torch.ones(N_MEL))
        self.register_buffer('voc_mean', torch.zeros(N_VOC))
        self.register_buffer('voc_std', torch.ones(N_VOC))

    def set_normalizer(self, mel_mean, mel_std, voc_mean, voc_std):
        for name, v in (('mel_mean', mel_mean), ('mel_std', mel_std),
                        ('voc_mean', voc_mean), ('voc_std', voc_std)):
            getattr(self, name).copy_(torch.as_tensor(np.asarray(v), dtype=torch.float32))

    def freeze(self):
        """Mark the model inference-only."""
        self.stage = 'frozen'
        self.eval()
        return self

    def content(self, batch):
        if 'content' in batch:
            return batch['content']
        if self.encoder is None:
            raise MissingEncoder('batch has no precomputed content and the model no encoder')
        return self.encoder(batch['frontend'], batch['enc_lengths'])

    def codes(self, batch, mode: str | None = None, noise: bool = True, generator=None) -> DiscreteCode:
        resampled = torch.bmm(batch['resample'], self.content(batch))
        return discretize(resampled, self.projection, self.cfg.temperature,
                          mode or self.cfg.train_mode, noise, generator)

    def decode(self, h, speakers, durations, mel_target=None, frame_mask=None):
        z = integrate_speaker(h, speakers, self.cfg.n_speakers)
        pe = positional_encoding(durations, z.shape[1], self.cfg.pos_dim).to(z.dtype)
        ctx = torch.cat([z, pe], dim=-1)
        return self.decoder(ctx, mel_target, frame_mask)

    def forward(self, batch, generator=None):
        code = self.codes(batch, generator=generator)
        T = batch['mel'].shape[1]
        frame_mask = lengths_to_mask(batch['frame_lengths'], T)
        mel_t = (batch['mel'] - self.mel_mean) / self.mel_std
        mel, voc_pre, voc_post = self.decode(code.h, batch['speakers'], batch['durations'],
                                             mel_t, frame_mask)
        return {'h': code.h, 'mel': mel, 'voc_pre': voc_pre, 'voc_post': voc_post,
                'frame_mask': frame_mask}


# --------------------------------------------------------------------------
# data and training
# --------------------------------------------------------------------------

@dataclass
class VCItem:
    speaker: int
    durations: np.ndarray      # [L] TTS-rate frames
    mel: np.ndarray            # [T, 80]
    vocoder: np.ndarray        # [T, 22]
    frontend: np.ndarray | None = None    # [T_enc, bins] for the built-in encoder
    content: np.ndarray | None = None     # [T_enc, 768] precomputed
    utterance_id: str = ''
    _resample: np.ndarray | None = None

    def n_source(self) -> int:
        src = self.frontend if self.content is None else self.content
        return len(src)

    def resample(self, cfg: VCConfig) -> np.ndarray:
        if self._resample is None:
            self._resample = resample_matrix(self.durations, self.n_source(), cfg.encoder_rate,
                                             TTS_RATE, cfg.resample_sigma)
        return self._resample


def vc_collate(items: list[VCItem], cfg: VCConfig) -> dict:
    B = len(items)
    T = max(len(it.mel) for it in items)
    L = max(len(it.durations) for it in items)
    S = max(it.n_source() for it in items)
    batch = {
        'speakers': torch.tensor([it.speaker for it in items]),
        'durations': torch.zeros(B, L),
        'mel': torch.zeros(B, T, N_MEL),
        'vocoder': torch.zeros(B, T, N_VOC),
        'frame_lengths': torch.tensor([len(it.mel) for it in items]),
        'resample': torch.zeros(B, T, S),
        'enc_lengths': torch.tensor([it.n_source() for it in items]),
    }
    precomputed = items[0].content is not None
    if precomputed:
        batch['content'] = torch.zeros(B, S, CONTENT_DIM)
    else:
        batch['frontend'] = torch.zeros(B, S, items[0].frontend.shape[1])
    for b, it in enumerate(items):
        t, n = len(it.mel), len(it.durations)
        if int(np.sum(it.durations)) != t:
            raise ValueError(f'{it.utterance_id}: durations sum {np.sum(it.durations)} != {t}')
        batch['durations'][b, :n] = torch.as_tensor(it.durations, dtype=torch.float32)
        batch['mel'][b, :t] = torch.as_tensor(it.mel)
        batch['vocoder'][b, :t] = torch.as_tensor(it.vocoder)
        W = it.resample(cfg)
        batch['resample'][b, :t, :W.shape[1]] = torch.as_tensor(W, dtype=torch.float32)
        if precomputed:
            batch['content'][b, :it.n_source()] = torch.as_tensor(it.content)
        else:
            batch['frontend'][b, :it.n_source()] = torch.as_tensor(it.frontend)
    return batch


VC_TERMS = ('mel', 'vocoder_pre', 'vocoder_post')


def vc_loss(model: VCModel, batch: dict, out: dict | None = None, generator=None):
    out = model(batch, generator) if out is None else out
    mask = out['frame_mask']
    mel_t = (batch['mel'] - model.mel_mean) / model.mel_std
    voc_t = (batch['vocoder'] - model.voc_mean) / model.voc_std
    terms = {'mel': l1_l2(out['mel'], mel_t, mask),
             'vocoder_pre': l1_l2(out['voc_pre'], voc_t, mask),
             'vocoder_post': l1_l2(out['voc_post'], voc_t, mask)}
    return terms, sum(terms.values())


def trainable_parameters(model: VCModel):
    return [p for p in model.parameters() if p.requires_grad]


def vc_train_step(model: VCModel, optimizer, batch: dict, grad_clip: float = 1.0,
                  generator=None) -> dict:
    """Reconstruction step with the utterance's own speaker in the latent."""
    if model.stage != 'training':
        raise StageMismatch(f'VC training on a {model.stage!r} model')
    model.train()
    optimizer.zero_grad()
    terms, total = vc_loss(model, batch, generator=generator)
    total.backward()
    if grad_clip:
        nn.utils.clip_grad_norm_(trainable_parameters(model), grad_clip)
    optimizer.step()
    model.step += 1
    record = {k: float(v.detach()) for k, v in terms.items()}
    record['total'] = float(total.detach())
    return record


def train_vc(model: VCModel, items: list[VCItem], steps: int, batch_size: int = 16,
             lr: float = 1e-3, seed: int = 0, grad_clip: float = 1.0, callback=None) -> list[dict]:
    from .nat2 import feature_normalizer, iterate_batches
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    if model.step == 0:
        model.set_normalizer(*feature_normalizer(items))
    optimizer = torch.optim.Adam(trainable_parameters(model), lr=lr)
    batches = iterate_batches(items, batch_size, rng)
    history = []
    for _ in range(steps):
        rec = vc_train_step(model, optimizer, vc_collate(next(batches), model.cfg), grad_clip, gen)
        rec['step'] = model.step
        history.append(rec)
        if callback is not None:
            callback(model, rec)
    return history


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

@dataclass
class ConversionResult:
    features: AcousticFeatures
    speaker_id: int
    h: np.ndarray
    style: str = 'conversational'


@torch.no_grad()
def hard_codes(model: VCModel, item: VCItem) -> torch.Tensor:
    """Noise-free hard codes ``[T, 32]`` for one utterance."""
    model.eval()
    return model.codes(vc_collate([item], model.cfg), mode='hard', noise=False).h[0]


@torch.no_grad()
def convert(model: VCModel, item: VCItem, target_speaker: int,
            teacher_forced: bool = False) -> ConversionResult:
    """Re-render ``item`` in ``target_speaker``'s voice; durations are kept as-is.

    Codes are hard and noise-free. ``teacher_forced`` feeds back the source
    mel instead of the model's own output (reconstruction diagnostics only).
    """
    if model.step == 0:
        raise UntrainedModel('VC model has not been trained')
    if not 0 <= target_speaker < model.cfg.n_speakers:
        raise SpeakerOutOfRange(f'speaker {target_speaker} outside [0, {model.cfg.n_speakers})')
    model.eval()
    batch = vc_collate([item], model.cfg)
    h = model.codes(batch, mode='hard', noise=False).h
    target = None
    if teacher_forced:
        target = (batch['mel'] - model.mel_mean) / model.mel_std
    mel, _, voc = model.decode(h, torch.tensor([target_speaker]), batch['durations'], target)
    mel = (mel[0] * model.mel_std + model.mel_mean).numpy()
    voc = (voc[0] * model.voc_std + model.voc_mean).numpy()
    if len(mel) != int(np.sum(item.durations)):
        raise EmptyOutput('converted length differs from the source')
    feats = AcousticFeatures(mel.astype(np.float32), voc.astype(np.float32),
                             np.asarray(item.durations, dtype=np.int64), f0_from_vocoder(voc))
    return ConversionResult(feats, target_speaker, h[0].numpy())


def reconstruction_error(model: VCModel, items: list[VCItem], teacher_forced: bool = False) -> float:
    """Mean absolute error between features and their self-conversion, in normalised units."""
    errs = []
    for it in items:
        res = convert(model, it, it.speaker, teacher_forced)
        mel_e = np.abs((res.features.mel - it.mel) / model.mel_std.numpy()).mean()
        voc_e = np.abs((res.features.vocoder - it.vocoder) / model.voc_std.numpy()).mean()
        errs.append(0.5 * (mel_e + voc_e))
    return float(np.mean(errs))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_vc_checkpoint(path, model: VCModel, **extra) -> None:
    torch.save({'format': 1, 'kind': 'vc', 'config': model.cfg.to_dict(),
                'config_hash': model.cfg.digest(), 'step': model.step,
                'builtin_encoder': model.encoder is not None,
                'state_dict': {k: v.detach().clone() for k, v in model.state_dict().items()},
                'extra': extra}, path)


def load_vc_checkpoint(path) -> tuple[VCModel, dict]:
    ck = torch.load(path, map_location='cpu', weights_only=False)
    if ck.get('kind') != 'vc':
        raise ValueError(f'{path}: not a VC checkpoint')
    model = VCModel(VCConfig(**ck['config']), ck['builtin_encoder'])
    model.load_state_dict(ck['state_dict'])
    model.step = ck['step']
    return model.freeze(), ck
