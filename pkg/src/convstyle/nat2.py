"""HPC-controllable non-attentive acoustic model.

Extended symbol embeddings feed a convolutional + recurrent front-end (FE)
encoder. Its outputs are concatenated with a speaker embedding and an HPC
embedding; duration and range predictors drive Gaussian upsampling to the
frame rate, a positional encoding is appended, and a two-layer autoregressive
LSTM decoder emits mel frames (fed back) and vocoder features, refined by
separate cepstrum and pitch post-nets.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .adversary import SpeakerAdversary, speaker_adversarial_loss
from .config import ModelConfig
from .errors import (EmptyOutput, HpcShapeMismatch, MissingBaseCheckpoint,
                     SpeakerOutOfRange, StageMismatch, UntrainedModel,
                     VocabularyMismatch)
from .features import HPCVector
from .frontend import (DIALOG_TAGS, INTERJECTIONS, STYLES, SymbolSequence,
                       VocabularyTables, encode_symbol_ids)

log = logging.getLogger(__name__)

N_MEL = 80
N_VOC = 22
N_CEP = 20


# --------------------------------------------------------------------------
# stateless pieces
# --------------------------------------------------------------------------

def round_half_up(d: torch.Tensor) -> torch.Tensor:
    return torch.floor(d + 0.5)


def lengths_to_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def gaussian_weights(durations: torch.Tensor, ranges: torch.Tensor, n_frames: int,
                     mask: torch.Tensor | None = None) -> torch.Tensor:
    """Upsampling weights ``[B, T, L]``.

    Symbol ``i`` is centred at ``cumsum(d)_i - d_i / 2``; frame ``t`` sits at
    ``t + 0.5``; weights are Gaussian in that distance with width ``ranges``
    and normalised over symbols.
    """
    centers = torch.cumsum(durations, dim=-1) - 0.5 * durations
    t = torch.arange(n_frames, dtype=durations.dtype, device=durations.device) + 0.5
    logits = -(t[None, :, None] - centers[:, None, :]) ** 2 / (2 * ranges[:, None, :] ** 2)
    if mask is not None:
        logits = logits.masked_fill(~mask[:, None, :], float('-inf'))
    return torch.softmax(logits, dim=-1)


def gaussian_upsample(enc, durations, ranges):
    """Upsample one encoder sequence ``[L, D]`` to ``[sum(round(d)), D]``."""
    enc = torch.as_tensor(enc)
    durations = round_half_up(torch.as_tensor(durations, dtype=enc.dtype))
    ranges = torch.as_tensor(ranges, dtype=enc.dtype)
    T = int(durations.sum())
    if T < 1:
        raise EmptyOutput('all durations round to zero')
    w = gaussian_weights(durations[None], ranges[None], T)[0]
    return w @ enc


def positional_encoding(durations: torch.Tensor, n_frames: int, dim: int) -> torch.Tensor:
    """Sinusoidal encoding of each frame's index within its symbol, ``[B, T, dim]``."""
    B = durations.shape[0]
    d = durations.long()
    pos = torch.zeros(B, n_frames)
    for b in range(B):
        starts = torch.cumsum(d[b], 0) - d[b]
        idx = torch.repeat_interleave(starts, d[b])[:n_frames]
        pos[b, :len(idx)] = torch.arange(len(idx)) - idx
    freqs = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2) / dim)
    ang = pos[..., None] * freqs
    pe = torch.zeros(B, n_frames, dim)
    pe[..., 0::2] = torch.sin(ang)
    pe[..., 1::2] = torch.cos(ang)[..., :dim // 2]
    return pe


def l1_l2(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean absolute plus mean squared error over valid frames."""
    diff = pred - target
    if mask is None:
        return diff.abs().mean() + (diff ** 2).mean()
    m = mask[..., None].to(diff.dtype).expand_as(diff)
    n = m.sum()
    return (diff.abs() * m).sum() / n + (diff ** 2 * m).sum() / n


def run_bilstm(lstm: nn.LSTM, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
    out, _ = lstm(packed)
    out, _ = pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
    return out


# --------------------------------------------------------------------------
# modules
# --------------------------------------------------------------------------

class FEEncoder(nn.Module):
    """Symbol embeddings -> 3 conv layers -> bidirectional LSTM."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.n_joint <= 0:
            raise ValueError('n_joint must come from the vocabulary tables')
        self.joint = nn.Embedding(cfg.n_joint, cfg.d_fe)
        self.tags = nn.ModuleList([
            nn.Embedding(n, cfg.tag_dim)
            for n in (len(STYLES), 2, len(DIALOG_TAGS), len(INTERJECTIONS))])
        dim = cfg.d_fe + 4 * cfg.tag_dim
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        for _ in range(cfg.enc_conv_layers):
            self.convs.append(nn.Conv1d(dim, cfg.d_fe, cfg.enc_kernel, padding=cfg.enc_kernel // 2))
            self.norms.append(nn.LayerNorm(cfg.d_fe))
            dim = cfg.d_fe
        self.dropout = nn.Dropout(cfg.enc_dropout)
        self.lstm = nn.LSTM(cfg.d_fe, cfg.d_fe // 2, batch_first=True, bidirectional=True)
        self.sizes = (cfg.n_joint, len(STYLES), 2, len(DIALOG_TAGS), len(INTERJECTIONS))

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        for col, n in enumerate(self.sizes):
            if ids[..., col].min() < 0 or ids[..., col].max() >= n:
                raise VocabularyMismatch(f'id column {col} outside [0, {n})')
        x = torch.cat([self.joint(ids[..., 0])]
                      + [emb(ids[..., k + 1]) for k, emb in enumerate(self.tags)], dim=-1)
        mask = lengths_to_mask(lengths, ids.shape[1])[..., None].to(x.dtype)
        for conv, norm in zip(self.convs, self.norms):
            x = conv((x * mask).transpose(1, 2)).transpose(1, 2)
            x = self.dropout(F.relu(norm(x)))
        return run_bilstm(self.lstm, x * mask, lengths)


class DurationPredictor(nn.Module):
    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.lstm = nn.LSTM(in_dim, hidden // 2, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * (hidden // 2), 1)

    def forward(self, enc, lengths):
        return F.softplus(self.proj(run_bilstm(self.lstm, enc, lengths))).squeeze(-1)


class RangePredictor(nn.Module):
    def __init__(self, in_dim: int, hidden: int, floor: float):
        super().__init__()
        self.lstm = nn.LSTM(in_dim + 1, hidden // 2, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * (hidden // 2), 1)
        self.floor = floor

    def forward(self, enc, durations, lengths):
        x = torch.cat([enc, durations[..., None].to(enc.dtype)], dim=-1)
        return F.softplus(self.proj(run_bilstm(self.lstm, x, lengths))).squeeze(-1) + self.floor


class Prenet(nn.Module):
    def __init__(self, in_dim: int, dim: int, dropout: float):
        super().__init__()
        self.layers = nn.ModuleList([nn.Linear(in_dim, dim), nn.Linear(dim, dim)])
        self.p = dropout

    def forward(self, x):
        for layer in self.layers:
            x = F.dropout(F.relu(layer(x)), self.p, self.training)
        return x


class Postnet(nn.Module):
    """Residual conv refiner; the last layer starts at zero so it begins as identity."""

    def __init__(self, dim: int, channels: int, layers: int, kernel: int):
        super().__init__()
        convs = []
        c_in = dim
        for _ in range(layers - 1):
            convs.append(nn.Conv1d(c_in, channels, kernel, padding=kernel // 2))
            c_in = channels
        self.convs = nn.ModuleList(convs)
        self.out = nn.Conv1d(c_in, dim, kernel, padding=kernel // 2)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):  # [B, T, dim]
        y = x.transpose(1, 2)
        for conv in self.convs:
            y = torch.tanh(conv(y))
        return x + self.out(y).transpose(1, 2)


class SpectralDecoder(nn.Module):
    """Autoregressive two-layer LSTM decoder with mel feedback and dual heads."""

    def __init__(self, ctx_dim: int, prenet_dim: int, prenet_dropout: float, dim: int,
                 layers: int, post_channels: int, post_layers: int, post_kernel: int):
        super().__init__()
        self.prenet = Prenet(N_MEL, prenet_dim, prenet_dropout)
        self.lstm = nn.LSTM(prenet_dim + ctx_dim, dim, num_layers=layers, batch_first=True)
        self.mel_head = nn.Linear(dim + ctx_dim, N_MEL)
        self.voc_head = nn.Linear(dim + ctx_dim, N_VOC)
        self.cep_postnet = Postnet(N_CEP, post_channels, post_layers, post_kernel)
        self.pitch_postnet = Postnet(N_VOC - N_CEP, max(post_channels // 4, 8), post_layers, post_kernel)

    def postnets(self, voc_pre, frame_mask=None):
        if frame_mask is not None:
            voc_pre = voc_pre * frame_mask[..., None].to(voc_pre.dtype)
        return torch.cat([self.cep_postnet(voc_pre[..., :N_CEP]),
                          self.pitch_postnet(voc_pre[..., N_CEP:])], dim=-1)

    def forward(self, ctx, mel_target=None, frame_mask=None):
        """Teacher-forced when ``mel_target`` is given, free-running otherwise."""
        if mel_target is None:
            return self.infer(ctx)
        go = torch.zeros_like(mel_target[:, :1])
        prev = torch.cat([go, mel_target[:, :-1]], dim=1)
        h, _ = self.lstm(torch.cat([self.prenet(prev), ctx], dim=-1))
        hc = torch.cat([h, ctx], dim=-1)
        voc_pre = self.voc_head(hc)
        return self.mel_head(hc), voc_pre, self.postnets(voc_pre, frame_mask)

    def infer(self, ctx):
        B, T, _ = ctx.shape
        prev = ctx.new_zeros(B, 1, N_MEL)
        state = None
        mels, hs = [], []
        for t in range(T):
            c = ctx[:, t:t + 1]
            h, state = self.lstm(torch.cat([self.prenet(prev), c], dim=-1), state)
            hc = torch.cat([h, c], dim=-1)
            prev = self.mel_head(hc)
            mels.append(prev)
            hs.append(hc)
        hc = torch.cat(hs, dim=1)
        voc_pre = self.voc_head(hc)
        return torch.cat(mels, dim=1), voc_pre, self.postnets(voc_pre)


class HPCPredictor(nn.Module):
    """Two-layer recurrent net over FE outputs; mean-pooled per word and per utterance."""

    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.lstm = nn.LSTM(in_dim, hidden, num_layers=2, batch_first=True, bidirectional=True)
        self.head = nn.Linear(2 * hidden, 6)

    def forward(self, fe, lengths, word_index):
        out = self.head(run_bilstm(self.lstm, fe, lengths))
        mask = lengths_to_mask(lengths, fe.shape[1]).to(out.dtype)
        utt = (out[..., 3:] * mask[..., None]).sum(1) / mask.sum(1, keepdim=True)
        W = max(int(word_index.max()) + 1, 1)
        onehot = (word_index[..., None] == torch.arange(W)).to(out.dtype)   # [B, L, W]
        counts = onehot.sum(1).clamp(min=1)[..., None]
        word = torch.einsum('blw,blk->bwk', onehot, out[..., :3]) / counts
        return utt, word


def hpc_symbol_matrix(utt: torch.Tensor, word: torch.Tensor, word_index: torch.Tensor) -> torch.Tensor:
    """Broadcast ``utt [B, 3]`` and ``word [B, W, 3]`` to ``[B, L, 6]``."""
    idx = word_index.clamp(min=0)
    w = torch.gather(word, 1, idx[..., None].expand(*idx.shape, 3))
    w = w * (word_index >= 0)[..., None].to(w.dtype)
    return torch.cat([w, utt[:, None, :].expand(-1, word_index.shape[1], -1)], dim=-1)


@dataclass
class DecoderOutput:
    mel: np.ndarray
    vocoder_pre: np.ndarray
    vocoder_post: np.ndarray


@dataclass
class DurationRange:
    durations: torch.Tensor
    ranges: torch.Tensor


@dataclass
class SynthesisResult:
    mel: np.ndarray
    vocoder_pre: np.ndarray
    vocoder_post: np.ndarray
    durations: np.ndarray      # rounded, frames per symbol
    hpc: HPCVector


class NAT2(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.stage = 'acoustic'
        self.step = 0
        self.fe = FEEncoder(cfg)
        self.speaker_embedding = nn.Embedding(cfg.n_speakers, cfg.d_spk)
        self.hpc_embedding = nn.Linear(6, cfg.d_hpc)
        self.duration_predictor = DurationPredictor(cfg.d_enc, cfg.predictor_hidden)
        self.range_predictor = RangePredictor(cfg.d_enc, cfg.predictor_hidden, cfg.range_floor)
        self.decoder = SpectralDecoder(cfg.d_enc + cfg.pos_dim, cfg.prenet_dim, cfg.prenet_dropout,
                                       cfg.decoder_dim, cfg.decoder_layers, cfg.postnet_channels,
                                       cfg.postnet_layers, cfg.postnet_kernel)
        self.adversary = SpeakerAdversary(cfg.d_fe, cfg.n_speakers, cfg.adv_hidden)
        self.hpc_predictor = HPCPredictor(cfg.d_fe, cfg.hpc_pred_hidden)
        self.register_buffer('mel_mean', torch.zeros(N_MEL))
        self.register_buffer('mel_std', torch.ones(N_MEL))
        self.register_buffer('voc_mean', torch.zeros(N_VOC))
        self.register_buffer('voc_std', torch.ones(N_VOC))

    def acoustic_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith('hpc_predictor.')]

    def set_normalizer(self, mel_mean, mel_std, voc_mean, voc_std):
        for name, v in (('mel_mean', mel_mean), ('mel_std', mel_std),
                        ('voc_mean', voc_mean), ('voc_std', voc_std)):
            getattr(self, name).copy_(torch.as_tensor(np.asarray(v), dtype=torch.float32))

    def encode(self, ids, lengths, hpc_sym):
        """Encoder output ``[B, L, D_fe + D_spk + D_hpc]`` and the FE slice."""
        if hpc_sym.shape[:2] != ids.shape[:2] or hpc_sym.shape[-1] != 6:
            raise HpcShapeMismatch(f'HPC matrix {tuple(hpc_sym.shape)} vs ids {tuple(ids.shape)}')
        spk = ids[..., 5]
        if spk.min() < 0 or spk.max() >= self.cfg.n_speakers:
            raise SpeakerOutOfRange(f'speaker id outside [0, {self.cfg.n_speakers})')
        fe = self.fe(ids, lengths)
        enc = torch.cat([fe, self.speaker_embedding(spk),
                         self.hpc_embedding(hpc_sym.to(fe.dtype))], dim=-1)
        return enc, fe

    def upsample(self, enc, durations, ranges, lengths, n_frames):
        mask = lengths_to_mask(lengths, enc.shape[1])
        w = gaussian_weights(durations.to(enc.dtype), ranges, n_frames, mask)
        up = torch.bmm(w, enc)
        pe = positional_encoding(durations, n_frames, self.cfg.pos_dim).to(enc.dtype)
        return torch.cat([up, pe], dim=-1)

    def forward(self, batch):
        """Teacher-forced pass with ground-truth durations."""
        lengths = batch['lengths']
        enc, fe = self.encode(batch['ids'], lengths, batch['hpc_sym'])
        dur_pred = self.duration_predictor(enc, lengths)
        ranges = self.range_predictor(enc, batch['durations'], lengths)
        T = batch['mel'].shape[1]
        ctx = self.upsample(enc, batch['durations'], ranges, lengths, T)
        frame_mask = lengths_to_mask(batch['frame_lengths'], T)
        mel_t = (batch['mel'] - self.mel_mean) / self.mel_std
        mel, voc_pre, voc_post = self.decoder(ctx, mel_t.to(ctx.dtype), frame_mask)
        return {'fe': fe, 'enc': enc, 'dur_pred': dur_pred, 'ranges': ranges,
                'mel': mel, 'voc_pre': voc_pre, 'voc_post': voc_post, 'frame_mask': frame_mask}

    def adversarial_lambda(self, step: int | None = None) -> float:
        step = self.step if step is None else step
        if self.cfg.adv_warmup_steps <= 0:
            return self.cfg.adv_lambda
        return self.cfg.adv_lambda * min(1.0, step / self.cfg.adv_warmup_steps)


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------

@dataclass
class TTSItem:
    ids: np.ndarray            # [L, 6]
    speaker: int
    word_index: np.ndarray     # [L]
    hpc: HPCVector
    durations: np.ndarray      # [L] integer frames
    mel: np.ndarray            # [T, 80]
    vocoder: np.ndarray        # [T, 22]
    utterance_id: str = ''


def collate(items: list[TTSItem], dtype=torch.float32) -> dict:
    B = len(items)
    L = max(len(it.ids) for it in items)
    T = max(len(it.mel) for it in items)
    W = max(len(it.hpc.word_level) for it in items)
    batch = {
        'ids': torch.zeros(B, L, 6, dtype=torch.long),
        'lengths': torch.tensor([len(it.ids) for it in items]),
        'speakers': torch.tensor([it.speaker for it in items]),
        'word_index': torch.full((B, L), -1, dtype=torch.long),
        'hpc_sym': torch.zeros(B, L, 6, dtype=dtype),
        'hpc_utt': torch.zeros(B, 3, dtype=dtype),
        'hpc_word': torch.zeros(B, W, 3, dtype=dtype),
        'word_mask': torch.zeros(B, W, dtype=torch.bool),
        'durations': torch.zeros(B, L, dtype=dtype),
        'mel': torch.zeros(B, T, N_MEL, dtype=dtype),
        'vocoder': torch.zeros(B, T, N_VOC, dtype=dtype),
        'frame_lengths': torch.tensor([len(it.mel) for it in items]),
    }
    for b, it in enumerate(items):
        n, t, w = len(it.ids), len(it.mel), len(it.hpc.word_level)
        if int(np.sum(it.durations)) != t:
            raise ValueError(f'{it.utterance_id}: durations sum {np.sum(it.durations)} != {t} frames')
        ids = np.array(it.ids, copy=True)
        ids[:, 5] = it.speaker
        batch['ids'][b, :n] = torch.from_numpy(ids)
        batch['word_index'][b, :n] = torch.from_numpy(np.asarray(it.word_index))
        batch['hpc_sym'][b, :n] = torch.from_numpy(it.hpc.per_symbol(it.word_index)).to(dtype)
        batch['hpc_utt'][b] = torch.as_tensor(it.hpc.utterance_level, dtype=dtype)
        batch['hpc_word'][b, :w] = torch.as_tensor(it.hpc.word_level, dtype=dtype)
        batch['word_mask'][b, :w] = True
        batch['durations'][b, :n] = torch.as_tensor(it.durations, dtype=dtype)
        batch['mel'][b, :t] = torch.as_tensor(it.mel, dtype=dtype)
        batch['vocoder'][b, :t] = torch.as_tensor(it.vocoder, dtype=dtype)
    return batch


def feature_normalizer(items: list[TTSItem]):
    mel = np.concatenate([it.mel for it in items])
    voc = np.concatenate([it.vocoder for it in items])
    return (mel.mean(0), np.maximum(mel.std(0), 1e-3), voc.mean(0), np.maximum(voc.std(0), 1e-3))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

ACOUSTIC_TERMS = ('mel', 'vocoder_pre', 'vocoder_post')


def tts_loss(model: NAT2, batch: dict, mode: str = 'base', out: dict | None = None):
    """Weighted loss terms and their sum (``total``), as tensors."""
    if mode not in ('base', 'adversarial'):
        raise ValueError(f'unknown mode {mode!r}')
    out = model(batch) if out is None else out
    mask = out['frame_mask']
    voc_t = (batch['vocoder'] - model.voc_mean) / model.voc_std
    mel_t = (batch['mel'] - model.mel_mean) / model.mel_std
    sym_mask = lengths_to_mask(batch['lengths'], batch['ids'].shape[1])
    dur_err = (out['dur_pred'] - batch['durations']) ** 2
    terms = {
        'mel': l1_l2(out['mel'], mel_t.to(out['mel'].dtype), mask),
        'vocoder_pre': l1_l2(out['voc_pre'], voc_t.to(out['mel'].dtype), mask),
        'vocoder_post': l1_l2(out['voc_post'], voc_t.to(out['mel'].dtype), mask),
        'duration': model.cfg.w_dur * (dur_err * sym_mask).sum() / sym_mask.sum(),
    }
    if mode == 'adversarial':
        logits = model.adversary(out['fe'], model.adversarial_lambda())
        terms['adversarial'] = model.cfg.w_adv * speaker_adversarial_loss(
            logits, batch['speakers'], sym_mask)
    total = sum(terms.values())
    return terms, total


def tts_train_step(model: NAT2, optimizer, batch: dict, mode: str = 'base',
                   grad_clip: float = 1.0) -> dict:
    """One optimisation step; returns every loss term plus ``acoustic`` and ``total``."""
    if model.stage != 'acoustic':
        raise StageMismatch(f'acoustic training on a {model.stage!r} model')
    model.train()
    optimizer.zero_grad()
    terms, total = tts_loss(model, batch, mode)
    total.backward()
    if grad_clip:
        nn.utils.clip_grad_norm_(model.acoustic_parameters(), grad_clip)
    optimizer.step()
    model.step += 1
    record = {k: float(v.detach()) for k, v in terms.items()}
    record['acoustic'] = math.fsum(record[k] for k in ACOUSTIC_TERMS)
    # reported terms are rounded to float64 first, so the sum is exact over them
    record['total'] = math.fsum(record[k] for k in terms)
    return record


def iterate_batches(items: list, batch_size: int, rng: np.random.Generator):
    """Endless stream of shuffled batches."""
    while True:
        order = rng.permutation(len(items))
        for i in range(0, len(order), batch_size):
            yield [items[j] for j in order[i:i + batch_size]]


def train_acoustic(model: NAT2, items: list[TTSItem], steps: int, batch_size: int = 16,
                   lr: float = 1e-3, mode: str = 'base', seed: int = 0, grad_clip: float = 1.0,
                   callback=None, optimizer=None) -> list[dict]:
    """Stage 1: acoustic model with ground-truth HPCs."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    if model.step == 0:
        model.set_normalizer(*feature_normalizer(items))
    if optimizer is None:
        optimizer = torch.optim.Adam(model.acoustic_parameters(), lr=lr)
    batches = iterate_batches(items, batch_size, rng)
    history = []
    for _ in range(steps):
        rec = tts_train_step(model, optimizer, collate(next(batches)), mode, grad_clip)
        rec['step'] = model.step
        history.append(rec)
        if callback is not None:
            callback(model, rec)
    return history


def hpc_predictor_loss(model: NAT2, batch: dict) -> torch.Tensor:
    with torch.no_grad():
        was = model.fe.training
        model.fe.eval()
        fe = model.fe(batch['ids'], batch['lengths'])
        model.fe.train(was)
    utt, word = model.hpc_predictor(fe, batch['lengths'], batch['word_index'])
    W = batch['hpc_word'].shape[1]
    if word.shape[1] < W:
        word = F.pad(word, (0, 0, 0, W - word.shape[1]))
    word = word[:, :W]
    wm = batch['word_mask'][..., None].to(word.dtype)
    word_l2 = (((word - batch['hpc_word']) ** 2) * wm).sum() / (wm.sum() * 3)
    utt_l2 = ((utt - batch['hpc_utt']) ** 2).mean()
    return word_l2 + utt_l2


def train_hpc_predictor(model: NAT2, items: list[TTSItem], steps: int = 300, batch_size: int = 16,
                        lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Stage 2: fit the HPC predictor with every acoustic weight frozen."""
    if model.step == 0 or model.stage not in ('acoustic', 'hpc_predictor'):
        raise MissingBaseCheckpoint('stage-2 training needs a trained acoustic model')
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    for p in model.acoustic_parameters():
        p.requires_grad_(False)
    optimizer = torch.optim.Adam(model.hpc_predictor.parameters(), lr=lr)
    model.hpc_predictor.train()
    history = []
    batches = iterate_batches(items, batch_size, rng)
    try:
        for _ in range(steps):
            optimizer.zero_grad()
            loss = hpc_predictor_loss(model, collate(next(batches)))
            loss.backward()
            optimizer.step()
            history.append(float(loss.detach()))
    finally:
        for p in model.acoustic_parameters():
            p.requires_grad_(True)
    model.stage = 'hpc_predictor'
    return history


# --------------------------------------------------------------------------
# single-utterance inference API
# --------------------------------------------------------------------------

def _single(ids: np.ndarray, speaker_id: int):
    ids = np.array(ids, copy=True)
    ids[:, 5] = speaker_id
    return torch.from_numpy(ids)[None], torch.tensor([len(ids)])


def encode(model: NAT2, ids: np.ndarray, speaker_id: int, hpc: HPCVector,
           word_index: np.ndarray) -> torch.Tensor:
    """Encoder output ``[L, D_enc]`` for one utterance."""
    word_index = np.asarray(word_index)
    n_words = int(word_index.max()) + 1
    if len(word_index) != len(ids) or hpc.word_level.shape != (n_words, 3):
        raise HpcShapeMismatch(f'{hpc.word_level.shape[0]} word HPCs for {n_words} words')
    ids_t, lengths = _single(ids, speaker_id)
    hpc_sym = torch.from_numpy(hpc.per_symbol(word_index))[None]
    enc, _ = model.encode(ids_t, lengths, hpc_sym)
    return enc[0]


def predict_duration_range(model: NAT2, enc: torch.Tensor) -> DurationRange:
    lengths = torch.tensor([enc.shape[0]])
    d = model.duration_predictor(enc[None], lengths)
    r = model.range_predictor(enc[None], round_half_up(d), lengths)
    return DurationRange(d[0], r[0])


def decode_frames(model: NAT2, upsampled: torch.Tensor, durations,
                  mel_target: np.ndarray | None = None) -> DecoderOutput:
    """Append positional encoding and run the decoder; output in feature units."""
    d = round_half_up(torch.as_tensor(durations, dtype=torch.float32))[None]
    T = upsampled.shape[0]
    pe = positional_encoding(d, T, model.cfg.pos_dim).to(upsampled.dtype)
    ctx = torch.cat([upsampled[None], pe], dim=-1)
    if mel_target is not None:
        mel_target = ((torch.as_tensor(mel_target) - model.mel_mean) / model.mel_std)[None]
        mel_target = mel_target.to(ctx.dtype)
    mel, voc_pre, voc_post = model.decoder(ctx, mel_target)
    return DecoderOutput(*(x.detach().numpy() for x in _denormalize(model, mel[0], voc_pre[0], voc_post[0])))


def _denormalize(model, mel, voc_pre, voc_post):
    return (mel * model.mel_std + model.mel_mean,
            voc_pre * model.voc_std + model.voc_mean,
            voc_post * model.voc_std + model.voc_mean)


@torch.no_grad()
def predict_hpc(model: NAT2, ids: np.ndarray, word_index: np.ndarray) -> HPCVector:
    ids_t, lengths = _single(ids, 0)
    fe = model.fe(ids_t, lengths)
    wi = torch.from_numpy(np.asarray(word_index))[None]
    utt, word = model.hpc_predictor(fe, lengths, wi)
    n_words = int(np.max(word_index)) + 1
    return HPCVector(utt[0].double().numpy(), word[0, :n_words].double().numpy())


@torch.no_grad()
def synthesize(model: NAT2, seq: SymbolSequence, tables: VocabularyTables, speaker_id: int,
               hpc_offsets=None, hpc: HPCVector | None = None) -> SynthesisResult:
    """Full inference: HPC prediction (+ offsets), durations, upsampling, decoding.

    Passing ``hpc`` bypasses the predictor (ground-truth controls).
    """
    if hpc is None and model.stage != 'hpc_predictor':
        raise UntrainedModel('HPC predictor has not been trained')
    if model.step == 0:
        raise UntrainedModel('acoustic model has not been trained')
    model.eval()
    ids = encode_symbol_ids(seq, tables)
    word_index = seq.word_indices()
    if hpc is None:
        hpc = predict_hpc(model, ids, word_index)
    if hpc_offsets is not None:
        hpc = hpc.offset(hpc_offsets)
    enc = encode(model, ids, speaker_id, hpc, word_index)
    dr = predict_duration_range(model, enc)
    d = round_half_up(dr.durations)
    if int(d.sum()) < 1:
        raise EmptyOutput('all predicted durations round to zero')
    up = gaussian_upsample(enc, d, dr.ranges)
    out = decode_frames(model, up, d)
    return SynthesisResult(out.mel, out.vocoder_pre, out.vocoder_post,
                           d.numpy().astype(np.int64), hpc)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_FORMAT = 1


def save_checkpoint(path, model: NAT2, tables: VocabularyTables | None = None, **extra) -> None:
    torch.save({
        'format': CHECKPOINT_FORMAT,
        'kind': 'nat2',
        'config': model.cfg.to_dict(),
        'config_hash': model.cfg.digest(),
        'step': model.step,
        'stage': model.stage,
        'tables': tables.to_dict() if tables is not None else None,
        'state_dict': {k: v.detach().clone() for k, v in model.state_dict().items()},
        'extra': extra,
    }, path)


def load_checkpoint(path) -> tuple[NAT2, dict]:
    ck = torch.load(path, map_location='cpu', weights_only=False)
    if ck.get('format') != CHECKPOINT_FORMAT or ck.get('kind') != 'nat2':
        raise ValueError(f'{path}: not a NAT2 checkpoint (format {ck.get("format")})')
    cfg = ModelConfig(**ck['config'])
    if cfg.digest() != ck['config_hash']:
        raise ValueError(f'{path}: config hash mismatch')
    model = NAT2(cfg)
    model.load_state_dict(ck['state_dict'])
    model.step = ck['step']
    model.stage = ck['stage']
    return model, ck
