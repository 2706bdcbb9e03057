"""Deterministic multi-speaker toy corpus.

Utterances are rendered with a small source-filter synthesizer: harmonic
excitation for voiced phones, shaped noise otherwise, a phone-specific formant
envelope and a per-speaker spectral tilt. Prosody is rule-driven: dialog tags
shift pitch and tempo, questions rise and statements fall over the last two
words, emphasis raises pitch and lengthens the word. Phone durations are known
exactly, so the corpus doubles as its own forced alignment.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import firwin2, lfilter

from . import HOP_LENGTH, SAMPLE_RATE
from .frontend import (Lexicon, SymbolSequence, build_symbol_sequence,
                       parse_markup)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpeakerProfile:
    name: str
    f0: float             # Hz
    tilt: float           # dB per octave above 500 Hz
    rate: float = 1.0     # duration multiplier
    formant_shift: float = 1.0


NEUTRAL_SPEAKERS = (
    SpeakerProfile('F1', 205.0, -9.0, 1.0, 1.08),
    SpeakerProfile('F2', 225.0, -3.0, 1.05, 1.12),
    SpeakerProfile('M1', 125.0, -6.0, 0.95, 0.92),
)
CONVERSATIONAL_SPEAKER = SpeakerProfile('C1', 215.0, -12.0, 1.0, 1.05)

# (log-pitch shift, tempo multiplier)
TAG_PROSODY = {
    'agreement': (0.05, 0.95), 'farewell': (0.08, 1.1), 'greeting': (0.18, 0.9),
    'empathy': (-0.12, 1.25), 'instruction': (0.0, 1.0), 'positive_feedback': (0.12, 0.95),
    'surprise': (0.25, 0.9), 'thanks': (0.1, 1.05), 'uncertainty': (-0.06, 1.2),
    'waiting': (-0.08, 1.15), 'none': (0.0, 1.0),
}
STYLE_PROSODY = {'neutral': (0.0, 1.0, 1.0), 'conversational': (0.04, 0.9, 1.4)}  # shift, tempo, range

UNVOICED = frozenset({'p', 't', 'k', 'f', 'th', 's', 'sh', 'hh', 'ch'})
VOWELS = frozenset({'aa', 'ae', 'ah', 'ao', 'aw', 'ay', 'eh', 'er', 'ey', 'ih', 'iy',
                    'ow', 'oy', 'uh', 'uw'})

CONVERSATIONAL_LINES = [
    '[da:greeting]Hi there![/da]',
    '[da:greeting]Hello, thank you for your call.[/da]',
    '[da:agreement][intj:uh_huh]Uh-huh[/intj], got it.[/da]',
    '[da:agreement]Sure, I can help with that.[/da]',
    '[da:positive_feedback][intj:aha]Aha[/intj], [emph]perfect[/emph]![/da]',
    '[da:positive_feedback]Great, your order is ready.[/da]',
    '[da:empathy][intj:oh]Oh[/intj], I am sorry to hear about that.[/da]',
    '[da:empathy]I see, that is not nice.[/da]',
    '[da:waiting][intj:um]Um[/intj], please wait a moment.[/da]',
    '[da:waiting]Just a second, let me check.[/da]',
    '[da:surprise]Wow, really?[/da]',
    '[da:surprise][intj:huh]Huh[/intj], really?[/da]',
    '[da:uncertainty][intj:hmm]Hmm[/intj], I am not sure.[/da]',
    '[da:uncertainty][intj:uh]Uh[/intj], maybe tomorrow?[/da]',
    '[da:instruction]Open the settings page and type the code.[/da]',
    '[da:instruction]Click the [emph]button[/emph] now.[/da]',
    '[da:thanks]Thanks, have a nice day![/da]',
    '[da:thanks]Thank you, we will call you back soon.[/da]',
    '[da:farewell]Goodbye, have a nice day.[/da]',
    '[da:farewell]Bye now![/da]',
    '[da:agreement]Okay, all set.[/da]',
    '[da:greeting]Hi, what is your name?[/da]',
    '[da:positive_feedback]Perfect, I found your account.[/da]',
    '[da:empathy][intj:oh]Oh[/intj], your card is late?[/da]',
    '[da:waiting]One more moment please.[/da]',
    '[da:instruction]Check your phone number again.[/da]',
    '[da:uncertainty][intj:um]Um[/intj], do you need anything else?[/da]',
    '[da:agreement][intj:uh_huh]Uh-huh[/intj], your bill is ready.[/da]',
]

NEUTRAL_LINES = [
    'Your order is ready.',
    'Please check the settings page.',
    'The new card arrived today.',
    'Your account is ready.',
    'Click the button and type the code.',
    'My phone number changed.',
    'We will call you back tomorrow.',
    'Your bill is late.',
    'Is your order ready?',
    'Did the card arrive?',
    'Let me check your account.',
    'Type the code again.',
    'The settings page is open.',
    'Have a nice day.',
    'Your new phone arrived.',
    'Is the page open now?',
    'What is your name?',
    'Please wait a moment.',
    'The code is not ready.',
    'Call me back tomorrow.',
]


def _phone_envelope(phone: str) -> tuple[list[float], list[float]]:
    """Deterministic pseudo-formants for a phone."""
    h = int(hashlib.md5(phone.encode()).hexdigest(), 16)
    f1 = 300 + (h % 500)
    f2 = 900 + ((h // 500) % 1400)
    f3 = 2300 + ((h // 700000) % 900)
    return [f1, f2, f3], [1.0, 0.6, 0.3]


def _harmonic_gain(freqs: np.ndarray, formants, amps, tilt: float, shift: float) -> np.ndarray:
    g = 0.02 * np.ones_like(freqs)
    for f, a in zip(formants, amps):
        g = g + a * np.exp(-0.5 * ((freqs - f * shift) / (80 + 0.08 * f)) ** 2)
    octaves = np.log2(np.maximum(freqs, 1.0) / 500.0)
    return g * 10 ** (tilt * np.maximum(octaves, 0) / 20)


def _pseudo(seed_text: str) -> np.random.Generator:
    return np.random.default_rng(int(hashlib.md5(seed_text.encode()).hexdigest()[:8], 16))


def plan_prosody(seq: SymbolSequence, lexicon: Lexicon, speaker: SpeakerProfile,
                 style: str, jitter_seed: str = ''):
    """Integer durations per symbol and a per-frame f0 contour (Hz, 0 = unvoiced)."""
    rng = _pseudo(f'{jitter_seed}|{speaker.name}')
    s_shift, s_tempo, s_range = STYLE_PROSODY[style]
    durations = np.zeros(len(seq.symbols), dtype=np.int64)
    voiced = []
    for i, sym in enumerate(seq.symbols):
        phone = lexicon.phones[sym.phone_id]
        if sym.kind == 'word_boundary':
            d = 0
        elif sym.kind == 'pause':
            d = 6 * speaker.rate
        else:
            base = 7.0 if phone in VOWELS else 4.0
            if sym.stress == 'primary':
                base *= 1.25
            tempo = TAG_PROSODY[sym.dialog_tag][1] * s_tempo * speaker.rate
            if sym.emphasis:
                tempo *= 1.35
            if sym.interjection != 'none':
                tempo *= 1.5
            d = max(2.0, base * tempo * (1.0 + 0.12 * rng.standard_normal()))
        durations[i] = int(np.floor(d + 0.5))
        voiced.append(sym.kind == 'phone' and phone not in UNVOICED)

    T = int(durations.sum())
    word_index = seq.word_indices()
    n_words = int(word_index.max()) + 1
    starts = np.concatenate([[0], np.cumsum(durations)[:-1]])
    frame_sym = np.repeat(np.arange(len(durations)), durations)
    pos = np.arange(T) / max(T - 1, 1)
    logf0 = np.log(speaker.f0) + s_shift - 0.12 * s_range * pos    # declination
    for t in range(T):
        sym = seq.symbols[frame_sym[t]]
        logf0[t] += TAG_PROSODY[sym.dialog_tag][0]
        if sym.emphasis:
            logf0[t] += 0.15 * s_range
    # final contour over the last two words
    tail_words = [k for k in range(max(0, n_words - 2), n_words)]
    tail_start = starts[np.flatnonzero(word_index == tail_words[0])[0]]
    phrase = seq.symbols[-2].phrase_type if len(seq.symbols) > 1 else 'declarative'
    span = max(T - tail_start, 1)
    ramp = (np.arange(T) - tail_start).clip(min=0) / span
    slope = 0.35 if phrase == 'interrogative' else -0.25
    logf0 += slope * s_range * ramp
    # smooth
    kernel = np.hanning(7)
    kernel /= kernel.sum()
    logf0 = np.convolve(np.pad(logf0, 3, mode='edge'), kernel, mode='valid')
    f0 = np.exp(logf0)
    vmask = np.array([voiced[s] for s in frame_sym], dtype=bool)
    return durations, np.where(vmask, f0, 0.0)


def render(seq: SymbolSequence, lexicon: Lexicon, speaker: SpeakerProfile,
           durations: np.ndarray, f0: np.ndarray, seed_text: str = '',
           sr: int = SAMPLE_RATE, hop: int = HOP_LENGTH) -> np.ndarray:
    """Synthesize ``sum(durations) * hop`` samples."""
    T = int(durations.sum())
    n = T * hop
    frame_sym = np.repeat(np.arange(len(durations)), durations)
    rng = _pseudo(f'noise|{seed_text}|{speaker.name}')

    # harmonic part with per-sample interpolated f0 and gains
    frame_f0 = f0.copy()
    voiced = frame_f0 > 0
    t_frames = (np.arange(T) + 0.5) * hop
    t_samp = np.arange(n)
    if voiced.any():
        f_cont = np.interp(np.arange(T), np.flatnonzero(voiced), frame_f0[voiced])
    else:
        f_cont = np.full(T, speaker.f0)
    inst_f0 = np.interp(t_samp, t_frames, f_cont)
    amp_v = np.interp(t_samp, t_frames, voiced.astype(float))
    phase = 2 * np.pi * np.cumsum(inst_f0) / sr
    n_harm = int(5000 / max(inst_f0.min(), 60))
    gains = np.zeros((T, n_harm))
    for t in range(T):
        phone = lexicon.phones[seq.symbols[frame_sym[t]].phone_id]
        formants, amps = _phone_envelope(phone)
        freqs = f_cont[t] * np.arange(1, n_harm + 1)
        g = _harmonic_gain(freqs, formants, amps, speaker.tilt, speaker.formant_shift)
        g[freqs > sr / 2 - 500] = 0.0
        gains[t] = g
    harm = np.zeros(n)
    for k in range(n_harm):
        gk = np.interp(t_samp, t_frames, gains[:, k])
        harm += gk * np.sin((k + 1) * phase)
    harm *= amp_v

    # noise part, filtered per symbol
    noise = np.zeros(n)
    freq_grid = np.linspace(0, sr / 2, 64)
    pos = 0
    for i, d in enumerate(durations):
        seg = int(d) * hop
        if seg == 0:
            continue
        sym = seq.symbols[i]
        phone = lexicon.phones[sym.phone_id]
        if sym.kind == 'pause':
            level = 0.05
        elif sym.kind == 'phone' and phone in UNVOICED:
            level = 1.0
        else:
            level = 0.08
        formants, amps = _phone_envelope(phone)
        shape = _harmonic_gain(freq_grid, [f * 2.2 for f in formants], amps,
                               speaker.tilt, speaker.formant_shift)
        shape[-1] = 0.0
        fir = firwin2(65, freq_grid / (sr / 2), shape / shape.max())
        white = rng.standard_normal(seg + 64)
        noise[pos:pos + seg] = level * 0.3 * lfilter(fir, [1.0], white)[64:]
        pos += seg
    wave = harm + noise
    peak = np.max(np.abs(wave))
    return (0.5 * wave / peak if peak > 0 else wave).astype(np.float32)


def write_wav(path, wave: np.ndarray, sr: int = SAMPLE_RATE) -> None:
    wavfile.write(path, sr, np.clip(wave, -1, 1).astype(np.float32))


def read_wav(path) -> np.ndarray:
    sr, data = wavfile.read(path)
    if sr != SAMPLE_RATE:
        raise ValueError(f'{path}: expected {SAMPLE_RATE} Hz, got {sr}')
    if data.dtype == np.int16:
        return data.astype(np.float32) / 32768.0
    return data.astype(np.float32)


def _emit(root: Path, rows: list, utt_id: str, markup: str, speaker_id: int,
          prof: SpeakerProfile, style: str, role: str, lexicon: Lexicon) -> None:
    utt = parse_markup(markup, utterance_id=utt_id, speaker_role=role, style=style)
    seq = build_symbol_sequence(utt, lexicon)
    durations, f0 = plan_prosody(seq, lexicon, prof, style, jitter_seed=markup)
    wave = render(seq, lexicon, prof, durations, f0, seed_text=utt_id)
    (root / 'markup').mkdir(parents=True, exist_ok=True)
    (root / 'wav').mkdir(exist_ok=True)
    (root / 'align').mkdir(exist_ok=True)
    (root / 'markup' / f'{utt_id}.txt').write_text(markup + '\n')
    write_wav(root / 'wav' / f'{utt_id}.wav', wave)
    np.save(root / 'align' / f'{utt_id}.npy', durations)
    rows.append({
        'utterance_id': utt_id, 'speaker_id': speaker_id, 'style': style, 'role': role,
        'markup_path': f'markup/{utt_id}.txt', 'feature_path': f'features/{utt_id}.npz',
        'origin': 'recorded', 'wave_path': f'wav/{utt_id}.wav',
        'durations_path': f'align/{utt_id}.npy',
    })


def write_jsonl(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        for row in rows:
            f.write(json.dumps(row) + '\n')


def make_toy_corpus(root, n_neutral: int = 3, utts_per_neutral: int = 8,
                    n_conversational: int = 10, n_heldout: int = 6, script_lines: int = 70,
                    seed: int = 0, lexicon: Lexicon | None = None) -> dict:
    """Write a toy corpus under ``root``; returns the paths it created.

    Speakers ``0 .. n_neutral - 1`` are neutral, speaker ``n_neutral`` is the
    conversational speaker (90% conversational style, the rest neutral).
    """
    root = Path(root)
    lexicon = lexicon or Lexicon.load()
    rng = np.random.default_rng(seed)
    rows, heldout = [], []
    speakers = list(NEUTRAL_SPEAKERS[:n_neutral])
    conv_id = len(speakers)
    for s, prof in enumerate(speakers):
        for j, k in enumerate(rng.permutation(len(NEUTRAL_LINES))[:utts_per_neutral]):
            _emit(root, rows, f'{prof.name}_n{j:03d}', NEUTRAL_LINES[k], s, prof,
                  'neutral', 'agent', lexicon)
    n_conv_neutral = max(1, n_conversational // 9)
    conv_order = rng.permutation(len(CONVERSATIONAL_LINES))
    for j in range(n_conversational):
        line = CONVERSATIONAL_LINES[conv_order[j % len(conv_order)]]
        _emit(root, rows, f'C1_c{j:03d}', line, conv_id, CONVERSATIONAL_SPEAKER,
              'conversational', 'agent', lexicon)
    for j, k in enumerate(rng.permutation(len(NEUTRAL_LINES))[:n_conv_neutral]):
        _emit(root, rows, f'C1_n{j:03d}', NEUTRAL_LINES[k], conv_id, CONVERSATIONAL_SPEAKER,
              'neutral', 'agent', lexicon)
    for j in range(n_heldout):
        s = j % (n_neutral + 1)
        prof = speakers[s] if s < n_neutral else CONVERSATIONAL_SPEAKER
        style = 'conversational' if s == conv_id else 'neutral'
        pool = CONVERSATIONAL_LINES if style == 'conversational' else NEUTRAL_LINES
        line = pool[(7 * j + 3) % len(pool)]
        _emit(root, heldout, f'{prof.name}_h{j:03d}', line, s, prof, style, 'agent', lexicon)

    write_jsonl(root / 'manifests' / 'recorded.jsonl', rows)
    write_jsonl(root / 'manifests' / 'heldout.jsonl', heldout)
    script = root / 'scripts' / 'test_script.txt'
    script.parent.mkdir(parents=True, exist_ok=True)
    script.write_text(''.join(CONVERSATIONAL_LINES[j % len(CONVERSATIONAL_LINES)] + '\n'
                              for j in range(script_lines)))
    speakers_meta = [{'id': i, 'name': p.name, 'f0': p.f0, 'tilt': p.tilt,
                      'kind': 'neutral'} for i, p in enumerate(speakers)]
    speakers_meta.append({'id': conv_id, 'name': CONVERSATIONAL_SPEAKER.name,
                          'f0': CONVERSATIONAL_SPEAKER.f0, 'tilt': CONVERSATIONAL_SPEAKER.tilt,
                          'kind': 'conversational'})
    (root / 'speakers.json').write_text(json.dumps(speakers_meta, indent=1))
    log.info('toy corpus: %d recorded, %d held-out utterances', len(rows), len(heldout))
    return {'recorded': root / 'manifests' / 'recorded.jsonl',
            'heldout': root / 'manifests' / 'heldout.jsonl', 'script': script,
            'conversational_speaker': conv_id}


def make_tilt_pair_corpus(root, n_utts: int = 12, tilts=(-12.0, 0.0), lexicon: Lexicon | None = None):
    """Two speakers reading identical content with identical prosody and
    differing only in spectral tilt."""
    root = Path(root)
    lexicon = lexicon or Lexicon.load()
    rows = []
    base = SpeakerProfile('P', 180.0, 0.0)
    lines = (NEUTRAL_LINES + CONVERSATIONAL_LINES)[:n_utts]
    for s, tilt in enumerate(tilts):
        prof = SpeakerProfile(f'P{s}', base.f0, tilt)
        for j, line in enumerate(lines):
            utt = parse_markup(line, utterance_id=f'P{s}_{j:03d}', style='neutral')
            seq = build_symbol_sequence(utt, lexicon)
            durations, f0 = plan_prosody(seq, lexicon, base, 'neutral', jitter_seed=line)
            wave = render(seq, lexicon, prof, durations, f0, seed_text=f'{j}')
            for sub in ('markup', 'wav', 'align'):
                (root / sub).mkdir(parents=True, exist_ok=True)
            uid = f'P{s}_{j:03d}'
            (root / 'markup' / f'{uid}.txt').write_text(line + '\n')
            write_wav(root / 'wav' / f'{uid}.wav', wave)
            np.save(root / 'align' / f'{uid}.npy', durations)
            rows.append({'utterance_id': uid, 'speaker_id': s, 'style': 'neutral',
                         'role': 'agent', 'markup_path': f'markup/{uid}.txt',
                         'feature_path': f'features/{uid}.npz', 'origin': 'recorded',
                         'wave_path': f'wav/{uid}.wav', 'durations_path': f'align/{uid}.npy'})
    write_jsonl(root / 'manifests' / 'recorded.jsonl', rows)
    return root / 'manifests' / 'recorded.jsonl'
