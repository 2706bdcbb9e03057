"""Acoustic feature extraction and hierarchical prosodic controls (HPCs).

All tracks share one frame grid: hop 256 samples at 22.05 kHz, frame ``t``
centred on sample ``t * hop + hop / 2``, ``T = ceil(n_samples / hop)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from . import HOP_LENGTH, SAMPLE_RATE
from .errors import DurationMismatch, EmptyAudio, NoVoicedFrames

N_FFT = 1024
N_MELS = 80
N_CEPSTRA = 20
MEL_FLOOR = 1e-5
HPC_DIMS = ('pitch_level', 'pitch_range', 'log_rate')


@dataclass
class F0Track:
    f0: np.ndarray          # Hz, 0 where unvoiced
    voicing: np.ndarray     # [0, 1]
    frame_hop: float = HOP_LENGTH / SAMPLE_RATE

    def __len__(self):
        return len(self.f0)


@dataclass
class AcousticFeatures:
    mel: np.ndarray         # [T, 80]
    vocoder: np.ndarray     # [T, 22]; 20 cepstra, pitch period, pitch correlation
    durations: np.ndarray   # [L] frames per symbol
    f0track: F0Track

    @property
    def num_frames(self) -> int:
        return self.mel.shape[0]


@dataclass
class HPCVector:
    utterance_level: np.ndarray   # [3]
    word_level: np.ndarray        # [W, 3]

    def per_symbol(self, word_index: np.ndarray) -> np.ndarray:
        """``[L, 6]`` matrix: word-level controls (zeros off-word) then utterance-level."""
        word_index = np.asarray(word_index)
        out = np.zeros((len(word_index), 6), dtype=np.float32)
        on = word_index >= 0
        out[on, :3] = self.word_level[word_index[on]]
        out[:, 3:] = self.utterance_level
        return out

    def offset(self, offsets) -> HPCVector:
        """Add constant offsets; ``offsets`` is ``[3]`` (both levels) or ``[2, 3]``."""
        offsets = np.asarray(offsets, dtype=np.float64)
        if offsets.ndim == 1:
            offsets = np.stack([offsets, offsets])
        return HPCVector(self.utterance_level + offsets[0], self.word_level + offsets[1])


@dataclass
class SpeakerStats:
    """Per-speaker mean/std of raw HPC dimensions, per level."""
    utt_mean: np.ndarray
    utt_std: np.ndarray
    word_mean: np.ndarray
    word_std: np.ndarray

    @classmethod
    def identity(cls) -> SpeakerStats:
        z, o = np.zeros(3), np.ones(3)
        return cls(z, o, z.copy(), o.copy())

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ('utt_mean', 'utt_std', 'word_mean', 'word_std')}

    @classmethod
    def from_dict(cls, d: dict) -> SpeakerStats:
        return cls(*(np.asarray(d[k], dtype=np.float64)
                     for k in ('utt_mean', 'utt_std', 'word_mean', 'word_std')))


# --------------------------------------------------------------------------
# framing and spectra
# --------------------------------------------------------------------------

def num_frames(n_samples: int, hop: int = HOP_LENGTH) -> int:
    return math.ceil(n_samples / hop)


def frame_signal(wave: np.ndarray, frame_length: int = N_FFT, hop: int = HOP_LENGTH) -> np.ndarray:
    n = len(wave)
    T = num_frames(n, hop)
    left = (frame_length - hop) // 2
    padded = np.zeros(left + T * hop + frame_length, dtype=np.float64)
    padded[left:left + n] = wave
    idx = np.arange(frame_length)[None, :] + hop * np.arange(T)[:, None]
    return padded[idx]


def mel_filterbank(sr: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """HTK-scale triangular filters, ``[n_mels, n_fft // 2 + 1]``, area-normalised."""
    fmax = sr / 2 if fmax is None else fmax
    hz_to_mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)   # noqa: E731
    mel_to_hz = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)  # noqa: E731
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.linspace(0, sr / 2, n_fft // 2 + 1)
    lower = (freqs[None, :] - edges[:-2, None]) / (edges[1:-1, None] - edges[:-2, None])
    upper = (edges[2:, None] - freqs[None, :]) / (edges[2:, None] - edges[1:-1, None])
    fb = np.maximum(0.0, np.minimum(lower, upper))
    fb *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return fb


_MEL_FB = None


def log_mel(wave: np.ndarray, hop: int = HOP_LENGTH) -> np.ndarray:
    global _MEL_FB
    if _MEL_FB is None:
        _MEL_FB = mel_filterbank()
    frames = frame_signal(wave, N_FFT, hop) * np.hanning(N_FFT)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    return np.log(np.maximum(power @ _MEL_FB.T, MEL_FLOOR))


# --------------------------------------------------------------------------
# f0
# --------------------------------------------------------------------------

def extract_f0_voicing(wave: np.ndarray, frame_hop: float = HOP_LENGTH / SAMPLE_RATE,
                       sr: int = SAMPLE_RATE, fmin: float = 60.0, fmax: float = 500.0,
                       voicing_threshold: float = 0.45, energy_floor: float = 1e-4) -> F0Track:
    """Autocorrelation pitch tracker.

    The windowed autocorrelation is divided by the window's own
    autocorrelation; voicing is the normalised peak height, zeroed below
    ``voicing_threshold`` or in frames below ``energy_floor`` RMS. Among
    peaks within 10% of the best, the shortest lag wins to avoid octave
    errors.
    """
    wave = np.asarray(wave, dtype=np.float64)
    if wave.size == 0:
        raise EmptyAudio('zero-length waveform')
    hop = int(round(frame_hop * sr))
    frames = frame_signal(wave, N_FFT, hop)
    rms = np.sqrt(np.mean(frames ** 2, axis=1))
    frames = frames - frames.mean(axis=1, keepdims=True)
    win = np.hanning(N_FFT)
    nfft = 2 * N_FFT
    r = np.fft.irfft(np.abs(np.fft.rfft(frames * win, nfft, axis=1)) ** 2, nfft, axis=1)[:, :N_FFT]
    rw = np.fft.irfft(np.abs(np.fft.rfft(win, nfft)) ** 2, nfft)[:N_FFT]
    lag_min, lag_max = int(sr / fmax), int(math.ceil(sr / fmin))
    with np.errstate(divide='ignore', invalid='ignore'):
        nacf = (r[:, :lag_max + 2] / rw[:lag_max + 2]) / (r[:, :1] / rw[0])
    nacf = np.nan_to_num(nacf)

    T = len(frames)
    f0 = np.zeros(T)
    voicing = np.zeros(T)
    for t in range(T):
        if rms[t] < energy_floor:
            continue
        seg = nacf[t]
        k = np.arange(lag_min, lag_max + 1)
        peaks = k[(seg[k] >= seg[k - 1]) & (seg[k] > seg[k + 1])]
        if peaks.size == 0:
            continue
        best = seg[peaks].max()
        if best < voicing_threshold:
            continue
        lag = peaks[seg[peaks] >= 0.9 * best][0]
        a, b, c = seg[lag - 1], seg[lag], seg[lag + 1]
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if denom < 0 else 0.0
        f0[t] = sr / (lag + shift)
        voicing[t] = min(1.0, max(b, voicing_threshold))
    return F0Track(f0, voicing, hop / sr)


PERIOD_CENTER = 100.0
PERIOD_SCALE = 50.0


def pitch_columns(track: F0Track, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Vocoder pitch columns ``[T, 2]``: normalised pitch period and correlation.

    The period is interpolated (in log f0) through unvoiced frames.
    """
    voiced = track.voicing > 0
    out = np.zeros((len(track.f0), 2))
    if voiced.any():
        t = np.arange(len(track.f0))
        logf0 = np.interp(t, t[voiced], np.log(track.f0[voiced]))
        out[:, 0] = (sr / np.exp(logf0) - PERIOD_CENTER) / PERIOD_SCALE
    out[:, 1] = track.voicing
    return out


def f0_from_vocoder(vocoder: np.ndarray, sr: int = SAMPLE_RATE,
                    voicing_threshold: float = 0.5,
                    frame_hop: float = HOP_LENGTH / SAMPLE_RATE) -> F0Track:
    """Recover an :class:`F0Track` from the two pitch columns of vocoder features."""
    vocoder = np.asarray(vocoder, dtype=np.float64)
    period = np.maximum(vocoder[:, 20] * PERIOD_SCALE + PERIOD_CENTER, 20.0)
    voicing = np.clip(vocoder[:, 21], 0.0, 1.0)
    voicing[voicing < voicing_threshold] = 0.0
    f0 = np.where(voicing > 0, sr / period, 0.0)
    return F0Track(f0, voicing, frame_hop)


def extract_acoustic_features(wave: np.ndarray, durations, sr: int = SAMPLE_RATE,
                              hop: int = HOP_LENGTH, tolerance: int = 2) -> AcousticFeatures:
    """Mel, vocoder features and f0 on the shared frame grid.

    Frame tracks are edge-padded or truncated to ``sum(durations)`` when the
    mismatch is within ``tolerance`` frames.
    """
    wave = np.asarray(wave, dtype=np.float64)
    if wave.size == 0:
        raise EmptyAudio('zero-length waveform')
    durations = np.asarray(durations, dtype=np.int64)
    T_wave = num_frames(len(wave), hop)
    T = int(durations.sum())
    if abs(T - T_wave) > tolerance:
        raise DurationMismatch(f'durations sum to {T} frames, audio has {T_wave}')

    mel = log_mel(wave, hop)
    track = extract_f0_voicing(wave, hop / sr, sr)
    cep = dct(mel, type=2, norm='ortho', axis=1)[:, :N_CEPSTRA]
    vocoder = np.concatenate([cep, pitch_columns(track, sr)], axis=1)

    def fit(a):
        if len(a) >= T:
            return a[:T]
        return np.concatenate([a, np.repeat(a[-1:], T - len(a), axis=0)])

    f0 = fit(track.f0[:, None])[:, 0]
    voicing = fit(track.voicing[:, None])[:, 0]
    return AcousticFeatures(fit(mel).astype(np.float32), fit(vocoder).astype(np.float32),
                            durations, F0Track(f0, voicing, hop / sr))


def save_features(path: str | Path, feats: AcousticFeatures, **extra) -> None:
    np.savez(path, mel=feats.mel, vocoder=feats.vocoder, durations=feats.durations,
             f0=feats.f0track.f0, voicing=feats.f0track.voicing,
             frame_hop=np.float64(feats.f0track.frame_hop), **extra)


def load_features(path: str | Path) -> AcousticFeatures:
    with np.load(path) as z:
        return AcousticFeatures(z['mel'], z['vocoder'], z['durations'],
                                F0Track(z['f0'], z['voicing'], float(z['frame_hop'])))


# --------------------------------------------------------------------------
# HPC
# --------------------------------------------------------------------------

def word_spans_from_durations(word_index: np.ndarray, durations) -> np.ndarray:
    """Frame intervals ``[W, 2]`` tiling ``[0, T)``.

    Word ``k`` runs from the first frame of its first phone to the first
    frame of word ``k + 1``; leading and trailing boundary/pause frames join
    the first and last word.
    """
    word_index = np.asarray(word_index)
    durations = np.asarray(durations)
    starts = np.concatenate([[0], np.cumsum(durations)[:-1]])
    W = int(word_index.max()) + 1
    first = np.array([starts[np.flatnonzero(word_index == k)[0]] for k in range(W)])
    first[0] = 0
    ends = np.append(first[1:], durations.sum())
    return np.stack([first, ends], axis=1).astype(np.int64)


def _pitch_stats(f0: np.ndarray) -> tuple[float, float] | None:
    voiced = f0 > 0
    if not voiced.any():
        return None
    lf = np.log(f0[voiced])
    return float(np.median(lf)), float(np.percentile(lf, 90) - np.percentile(lf, 10))


def raw_hpc(feats: AcousticFeatures, word_spans: np.ndarray,
            phone_mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Un-normalised ``(utterance[3], word[W, 3])`` controls.

    ``phone_mask`` selects which symbols count towards the duration term;
    by default every symbol with a non-zero duration.
    """
    f0 = np.asarray(feats.f0track.f0)
    durations = np.asarray(feats.durations, dtype=np.float64)
    T = len(f0)
    word_spans = np.asarray(word_spans, dtype=np.int64)
    if (word_spans[0, 0] != 0 or word_spans[-1, 1] != T
            or np.any(word_spans[1:, 0] != word_spans[:-1, 1])
            or np.any(word_spans[:, 1] < word_spans[:, 0])):
        raise ValueError('word spans must tile [0, T)')
    mask = np.ones(len(durations), bool) if phone_mask is None else np.asarray(phone_mask, bool)
    mask = mask & (durations > 0)

    utt_pitch = _pitch_stats(f0)
    if utt_pitch is None:
        raise NoVoicedFrames('utterance has no voiced frames')
    utt_rate = float(np.mean(np.log(durations[mask]))) if mask.any() else 0.0
    utt = np.array([utt_pitch[0], utt_pitch[1], utt_rate])

    starts = np.concatenate([[0], np.cumsum(durations)[:-1]])
    words = np.empty((len(word_spans), 3))
    for k, (a, b) in enumerate(word_spans):
        p = _pitch_stats(f0[a:b])
        words[k, :2] = p if p is not None else utt[:2]
        sel = mask & (starts >= a) & (starts < b)
        words[k, 2] = np.mean(np.log(durations[sel])) if sel.any() else utt_rate
    return utt, words


def compute_speaker_stats(raws) -> SpeakerStats:
    """Population mean/std over a speaker's ``(utt, word)`` raw controls."""
    utts = np.stack([u for u, _ in raws])
    words = np.concatenate([w for _, w in raws])

    def std(x):
        s = x.std(axis=0)
        return np.where(s > 1e-8, s, 1.0)
    return SpeakerStats(utts.mean(axis=0), std(utts), words.mean(axis=0), std(words))


def normalize_hpc(raw: tuple[np.ndarray, np.ndarray], stats: SpeakerStats) -> HPCVector:
    utt, words = raw
    return HPCVector((utt - stats.utt_mean) / stats.utt_std,
                     (words - stats.word_mean) / stats.word_std)


def compute_hpc(feats: AcousticFeatures, word_spans: np.ndarray, speaker_stats: SpeakerStats,
                phone_mask: np.ndarray | None = None) -> HPCVector:
    """Speaker-normalised controls: median log-f0, 90-10 log-f0 spread and
    mean log phone duration, for the utterance and for every word span."""
    return normalize_hpc(raw_hpc(feats, word_spans, phone_mask), speaker_stats)
