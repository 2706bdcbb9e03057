"""Conversational markup parsing and symbol compilation.

Scripts are annotated with bracket tags::

    [da:greeting]Hi there![/da]
    [da:agreement][intj:uh_huh]Uh-huh[/intj], got it.[/da]
    I can [emph]definitely[/emph] help.

The compiled :class:`SymbolSequence` is the extended phone sequence fed to the
acoustic model: phones with lexical stress and phrase type, pauses and word
boundaries, each carrying style, emphasis, dialog-tag and interjection labels.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import (MalformedMarkup, NonWordEmphasis, OovWord, UnknownTag,
                     VocabularyMismatch)

DIALOG_TAGS = ('agreement', 'farewell', 'greeting', 'empathy', 'instruction',
               'positive_feedback', 'surprise', 'thanks', 'uncertainty',
               'waiting', 'none')
INTERJECTIONS = ('aha', 'oh', 'hmm', 'huh', 'uh', 'uh_huh', 'um', 'none')
INTERJECTION_ORTHOGRAPHY = {
    'aha': 'aha', 'oh': 'oh', 'hmm': 'hmm', 'huh': 'huh', 'uh': 'uh',
    'uh_huh': 'uh-huh', 'um': 'um',
}
ORTHOGRAPHY_TO_INTERJECTION = {v: k for k, v in INTERJECTION_ORTHOGRAPHY.items()}
KINDS = ('phone', 'pause', 'word_boundary')
STRESSES = ('none', 'primary', 'secondary')
PHRASE_TYPES = ('declarative', 'interrogative', 'other')
STYLES = ('neutral', 'conversational')
ROLES = ('agent', 'user')

WORD_BOUNDARY = '#'
PAUSE = '_'

# ARPAbet base inventory; lexicon-specific phones are appended after these.
BASE_PHONES = (
    'aa', 'ae', 'ah', 'ao', 'aw', 'ay', 'b', 'ch', 'd', 'dh', 'eh', 'er', 'ey',
    'f', 'g', 'hh', 'ih', 'iy', 'jh', 'k', 'l', 'm', 'n', 'ng', 'ow', 'oy', 'p',
    'r', 's', 'sh', 't', 'th', 'uh', 'uw', 'v', 'w', 'y', 'z', 'zh',
)
VOWELS = frozenset({'aa', 'ae', 'ah', 'ao', 'aw', 'ay', 'eh', 'er', 'ey', 'ih',
                    'iy', 'ow', 'oy', 'uh', 'uw'})

_TAG_RE = re.compile(r'\[(/?)([a-z]+)(?::([A-Za-z_]+))?\]')
_WORD_RE = re.compile(r"[A-Za-z0-9]+(?:['\-][A-Za-z0-9]+)*")
_TOKEN_RE = re.compile(
    r"(?P<word>[A-Za-z0-9]+(?:['\-][A-Za-z0-9]+)*)"
    r"|(?P<comma>[,;:])"
    r"|(?P<dash>\s-{1,2}\s|—|–)"
    r"|(?P<end>[.!?]+)")


def _is_word_char(ch: str) -> bool:
    return ch.isalnum() or ch == "'"


@dataclass(frozen=True)
class Span:
    text: str
    dialog_tag: str = 'none'
    interjection: str = 'none'
    emphasis: bool = False


@dataclass(frozen=True)
class AnnotatedUtterance:
    spans: tuple[Span, ...]
    utterance_id: str = ''
    speaker_role: str = 'agent'
    style: str = 'conversational'

    @property
    def text(self) -> str:
        return ''.join(s.text for s in self.spans)


@dataclass(frozen=True)
class Symbol:
    kind: str
    phone_id: int
    stress: str = 'none'
    phrase_type: str = 'declarative'
    emphasis: bool = False
    dialog_tag: str = 'none'
    interjection: str = 'none'
    style: str = 'neutral'


@dataclass(frozen=True)
class SymbolSequence:
    symbols: tuple[Symbol, ...]
    utterance_id: str = ''

    def __len__(self) -> int:
        return len(self.symbols)

    def word_indices(self) -> np.ndarray:
        """Word number of every symbol; -1 for boundaries and pauses."""
        out = np.full(len(self.symbols), -1, dtype=np.int64)
        word = -1
        in_word = False
        for i, sym in enumerate(self.symbols):
            if sym.kind == 'phone':
                if not in_word:
                    word += 1
                    in_word = True
                out[i] = word
            else:
                in_word = False
        return out

    @property
    def num_words(self) -> int:
        idx = self.word_indices()
        return int(idx.max()) + 1 if len(idx) else 0


# --------------------------------------------------------------------------
# markup
# --------------------------------------------------------------------------

def _check_word_aligned(plain: str, start: int, end: int, what: str) -> None:
    if start > 0 and _is_word_char(plain[start - 1]) and _is_word_char(plain[start]):
        raise NonWordEmphasis(f'{what} starts inside a word at offset {start}')
    if end < len(plain) and _is_word_char(plain[end - 1]) and _is_word_char(plain[end]):
        raise NonWordEmphasis(f'{what} ends inside a word at offset {end}')


def _split_bare_interjections(span: Span) -> list[Span]:
    """Promote untagged interjection words to their own interjection spans."""
    if span.interjection != 'none':
        return [span]
    out = []
    pos = 0
    for m in _WORD_RE.finditer(span.text):
        intj = ORTHOGRAPHY_TO_INTERJECTION.get(m.group(0).lower())
        if intj is None:
            continue
        if m.start() > pos:
            out.append(Span(span.text[pos:m.start()], span.dialog_tag, 'none', span.emphasis))
        out.append(Span(m.group(0), span.dialog_tag, intj, span.emphasis))
        pos = m.end()
    if pos == 0:
        return [span]
    if pos < len(span.text):
        out.append(Span(span.text[pos:], span.dialog_tag, 'none', span.emphasis))
    return out


def parse_markup(text: str, utterance_id: str = '', speaker_role: str = 'agent',
                 style: str = 'conversational') -> AnnotatedUtterance:
    """Parse one line of annotated script into an :class:`AnnotatedUtterance`.

    A new span starts at every tag boundary. Untagged interjection words are
    promoted to interjection spans so that every interjection in the text is
    labelled.
    """
    if speaker_role not in ROLES:
        raise MalformedMarkup(f'unknown speaker role {speaker_role!r}')
    if style not in STYLES:
        raise MalformedMarkup(f'unknown style {style!r}')

    da = intj = None
    emph = False
    raw_spans: list[tuple[int, int, str, str, bool]] = []
    plain: list[str] = []
    offset = 0
    pos = 0
    intj_start = 0

    def flush(chunk: str) -> None:
        nonlocal offset
        if '[' in chunk or ']' in chunk:
            raise MalformedMarkup(f'stray bracket in {chunk!r}')
        if chunk:
            raw_spans.append((offset, offset + len(chunk), da or 'none',
                              intj or 'none', emph))
            plain.append(chunk)
            offset += len(chunk)

    for m in _TAG_RE.finditer(text):
        flush(text[pos:m.start()])
        pos = m.end()
        closing, name, value = m.group(1) == '/', m.group(2), m.group(3)
        if name == 'da':
            if closing:
                if da is None or value is not None:
                    raise MalformedMarkup('unbalanced [/da]')
                if intj is not None or emph:
                    raise MalformedMarkup('[/da] closes over an open inner tag')
                da = None
            else:
                if da is not None:
                    raise MalformedMarkup('nested [da:...] tags')
                if value is None:
                    raise MalformedMarkup('[da] needs a tag value')
                if value not in DIALOG_TAGS or value == 'none':
                    raise UnknownTag(f'unknown dialog tag {value!r}')
                da = value
        elif name == 'intj':
            if closing:
                if intj is None or value is not None:
                    raise MalformedMarkup('unbalanced [/intj]')
                body = ''.join(plain)[intj_start:offset]
                if body.strip().lower() != INTERJECTION_ORTHOGRAPHY[intj]:
                    raise MalformedMarkup(
                        f'[intj:{intj}] must wrap {INTERJECTION_ORTHOGRAPHY[intj]!r}, got {body!r}')
                intj = None
            else:
                if intj is not None:
                    raise MalformedMarkup('nested [intj:...] tags')
                if value is None:
                    raise MalformedMarkup('[intj] needs a type value')
                if value not in INTERJECTIONS or value == 'none':
                    raise UnknownTag(f'unknown interjection type {value!r}')
                intj = value
                intj_start = offset
        elif name == 'emph':
            if value is not None:
                raise MalformedMarkup('[emph] takes no value')
            if closing:
                if not emph:
                    raise MalformedMarkup('unbalanced [/emph]')
                emph = False
            else:
                if emph:
                    raise MalformedMarkup('nested [emph] tags')
                emph = True
        else:
            raise UnknownTag(f'unknown markup tag {name!r}')
    flush(text[pos:])
    if da is not None or intj is not None or emph:
        raise MalformedMarkup('unclosed tag at end of line')

    full = ''.join(plain)
    for start, end, _, j, e in raw_spans:
        if j != 'none' or e:
            stripped_start = start + (len(full[start:end]) - len(full[start:end].lstrip()))
            stripped_end = end - (len(full[start:end]) - len(full[start:end].rstrip()))
            if stripped_end > stripped_start:
                _check_word_aligned(full, stripped_start, stripped_end,
                                    'interjection' if j != 'none' else 'emphasis')
    spans: list[Span] = []
    for start, end, d, j, e in raw_spans:
        spans.extend(_split_bare_interjections(Span(full[start:end], d, j, e)))
    return AnnotatedUtterance(tuple(spans), utterance_id, speaker_role, style)


def serialize_markup(utt: AnnotatedUtterance) -> str:
    """Inverse of :func:`parse_markup`: each span is wrapped independently."""
    parts = []
    for span in utt.spans:
        body = span.text
        if span.interjection != 'none':
            body = f'[intj:{span.interjection}]{body}[/intj]'
        if span.emphasis:
            body = f'[emph]{body}[/emph]'
        if span.dialog_tag != 'none':
            body = f'[da:{span.dialog_tag}]{body}[/da]'
        parts.append(body)
    return ''.join(parts)


def read_script(path: str | Path) -> Iterator[tuple[int, str, str]]:
    """Yield ``(line_no, utterance_id, markup)`` for each non-blank line.

    A line may carry an explicit id as ``id<TAB>markup``; otherwise the id is
    ``line<NNN>``.
    """
    with open(path, encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip('\n')
            if not line.strip() or line.lstrip().startswith('//'):
                continue
            if '\t' in line:
                utt_id, markup = line.split('\t', 1)
            else:
                utt_id, markup = f'line{line_no:03d}', line
            yield line_no, utt_id.strip(), markup


# --------------------------------------------------------------------------
# lexicon
# --------------------------------------------------------------------------

# letter-to-phone fallback; deliberately crude
_LETTER_PHONES = {
    'a': 'ae', 'b': 'b', 'c': 'k', 'd': 'd', 'e': 'eh', 'f': 'f', 'g': 'g',
    'h': 'hh', 'i': 'ih', 'j': 'jh', 'k': 'k', 'l': 'l', 'm': 'm', 'n': 'n',
    'o': 'aa', 'p': 'p', 'q': 'k', 'r': 'r', 's': 's', 't': 't', 'u': 'ah',
    'v': 'v', 'w': 'w', 'x': 'k', 'y': 'y', 'z': 'z', "'": None,
}

_STRESS_DIGIT = {'0': 'none', '1': 'primary', '2': 'secondary'}


def split_stress(token: str) -> tuple[str, str]:
    if token and token[-1] in _STRESS_DIGIT:
        return token[:-1], _STRESS_DIGIT[token[-1]]
    return token, 'none'


class Lexicon:
    """Pronunciation lexicon with an optional letter-to-phone fallback.

    Entries map lower-cased orthography to phone tokens; vowels carry a stress
    digit (``aj1``). The lexicon also owns the phone table.
    """

    def __init__(self, entries: dict[str, list[str]], fallback: bool = True):
        self.entries = {k.lower(): list(v) for k, v in entries.items()}
        self.fallback = fallback
        extra = sorted({split_stress(p)[0] for pron in self.entries.values()
                        for p in pron} - set(BASE_PHONES))
        self.phones: tuple[str, ...] = BASE_PHONES + tuple(extra) + (WORD_BOUNDARY, PAUSE)
        self.phone_index = {p: i for i, p in enumerate(self.phones)}

    @classmethod
    def load(cls, path: str | Path | None = None, fallback: bool = True) -> Lexicon:
        if path is None:
            text = resources.files('convstyle').joinpath('data/lexicon.tsv').read_text('utf-8')
        else:
            text = Path(path).read_text('utf-8')
        entries = {}
        for n, line in enumerate(text.splitlines(), start=1):
            if not line.strip() or line.startswith(';'):
                continue
            try:
                word, phones = line.split('\t')
            except ValueError:
                raise MalformedMarkup(f'lexicon line {n}: expected word<TAB>phones') from None
            entries[word.strip()] = phones.split()
        return cls(entries, fallback=fallback)

    def pronounce(self, word: str) -> list[tuple[str, str]]:
        key = word.lower()
        pron = self.entries.get(key)
        if pron is None and '-' in key:
            parts = [self.entries.get(p) for p in key.split('-')]
            if all(p is not None for p in parts):
                pron = [ph for p in parts for ph in p]
        if pron is None:
            if not self.fallback:
                raise OovWord(f'{word!r} not in lexicon')
            pron = self._letters_to_phones(key)
            if not pron:
                raise OovWord(f'no fallback pronunciation for {word!r}')
        return [split_stress(p) for p in pron]

    @staticmethod
    def _letters_to_phones(word: str) -> list[str]:
        out = []
        stressed = False
        for ch in word:
            ph = _LETTER_PHONES.get(ch)
            if ph is None:
                if ch.isalpha() or ch.isdigit():
                    return []
                continue
            if ph in VOWELS:
                ph += '0' if stressed else '1'
                stressed = True
            out.append(ph)
        return out


# --------------------------------------------------------------------------
# symbols
# --------------------------------------------------------------------------

def _tokenize(utt: AnnotatedUtterance):
    """Words with their owning span and the punctuation events between them."""
    text = utt.text
    owner = np.empty(len(text), dtype=np.int64)
    pos = 0
    for i, span in enumerate(utt.spans):
        owner[pos:pos + len(span.text)] = i
        pos += len(span.text)
    tokens = []
    for m in _TOKEN_RE.finditer(text):
        kind = m.lastgroup
        tokens.append((kind, m.group(0), int(owner[m.start()]) if kind == 'word' else -1))
    return tokens


def build_symbol_sequence(utt: AnnotatedUtterance, lexicon: Lexicon) -> SymbolSequence:
    """Compile an annotated utterance into its extended phone sequence.

    Layout is ``# w1 # w2 # _ w3 #``: one boundary between consecutive words,
    with a pause after the boundary wherever a comma or sentence-internal dash
    separates them. Phrase type comes from the terminal punctuation of each
    word's sentence.
    """
    tokens = _tokenize(utt)
    words: list[tuple[str, Span, bool, str]] = []   # text, span, pause_before, phrase
    pending_pause = False
    sentence_start = 0
    for kind, text, owner in tokens:
        if kind == 'word':
            words.append((text, utt.spans[owner], pending_pause and bool(words), 'declarative'))
            pending_pause = False
        elif kind in ('comma', 'dash'):
            pending_pause = True
        elif kind == 'end':
            phrase = 'interrogative' if '?' in text else 'declarative'
            for k in range(sentence_start, len(words)):
                w = words[k]
                words[k] = (w[0], w[1], w[2], phrase)
            sentence_start = len(words)
            pending_pause = False
    if not words:
        raise MalformedMarkup(f'utterance {utt.utterance_id!r} has no words')

    wb_id = lexicon.phone_index[WORD_BOUNDARY]
    pau_id = lexicon.phone_index[PAUSE]
    first = words[0]
    symbols = [Symbol('word_boundary', wb_id, 'none', first[3], False,
                      first[1].dialog_tag, 'none', utt.style)]
    for text, span, pause_before, phrase in words:
        if pause_before:
            prev = symbols[-1]
            symbols.append(Symbol('pause', pau_id, 'none', prev.phrase_type, False,
                                  prev.dialog_tag, 'none', utt.style))
        for phone, stress in lexicon.pronounce(text):
            if phone not in lexicon.phone_index:
                raise OovWord(f'phone {phone!r} of {text!r} not in phone table')
            symbols.append(Symbol('phone', lexicon.phone_index[phone], stress, phrase,
                                  span.emphasis, span.dialog_tag, span.interjection,
                                  utt.style))
        symbols.append(Symbol('word_boundary', wb_id, 'none', phrase, False,
                              span.dialog_tag, 'none', utt.style))
    return SymbolSequence(tuple(symbols), utt.utterance_id)


@dataclass
class VocabularyTables:
    """Id tables for the six input columns of the acoustic model."""
    phones: tuple[str, ...]
    joint: list[tuple[str, str, str]] = field(init=False)
    joint_index: dict[tuple[str, str, str], int] = field(init=False, repr=False)

    def __post_init__(self):
        self.phones = tuple(self.phones)
        joint = []
        for p in self.phones:
            stresses = ('none',) if p in (WORD_BOUNDARY, PAUSE) else STRESSES
            for s in stresses:
                for q in PHRASE_TYPES:
                    joint.append((p, s, q))
        self.joint = joint
        self.joint_index = {k: i for i, k in enumerate(joint)}

    @classmethod
    def from_lexicon(cls, lexicon: Lexicon) -> VocabularyTables:
        return cls(lexicon.phones)

    @property
    def sizes(self) -> tuple[int, int, int, int, int]:
        return (len(self.joint), len(STYLES), 2, len(DIALOG_TAGS), len(INTERJECTIONS))

    def digest(self) -> str:
        return hashlib.sha1(json.dumps(self.phones).encode()).hexdigest()[:12]

    def to_dict(self) -> dict:
        return {'phones': list(self.phones)}

    @classmethod
    def from_dict(cls, d: dict) -> VocabularyTables:
        return cls(tuple(d['phones']))


def encode_symbol_ids(seq: SymbolSequence, tables: VocabularyTables) -> np.ndarray:
    """Integer matrix ``[L, 6]``: joint id, style, emphasis, dialog tag,
    interjection, and a speaker slot left at 0."""
    ids = np.zeros((len(seq.symbols), 6), dtype=np.int64)
    for i, sym in enumerate(seq.symbols):
        if not 0 <= sym.phone_id < len(tables.phones):
            raise VocabularyMismatch(f'phone id {sym.phone_id} outside table')
        key = (tables.phones[sym.phone_id], sym.stress, sym.phrase_type)
        try:
            ids[i, 0] = tables.joint_index[key]
            ids[i, 1] = STYLES.index(sym.style)
            ids[i, 3] = DIALOG_TAGS.index(sym.dialog_tag)
            ids[i, 4] = INTERJECTIONS.index(sym.interjection)
        except (KeyError, ValueError) as exc:
            raise VocabularyMismatch(f'symbol {i} not representable: {exc}') from None
        ids[i, 2] = int(sym.emphasis)
    return ids


def decode_symbol_ids(ids: np.ndarray, tables: VocabularyTables) -> list[Symbol]:
    out = []
    kinds = {WORD_BOUNDARY: 'word_boundary', PAUSE: 'pause'}
    for row in np.asarray(ids):
        if not 0 <= row[0] < len(tables.joint):
            raise VocabularyMismatch(f'joint id {row[0]} outside table')
        phone, stress, phrase = tables.joint[row[0]]
        out.append(Symbol(kinds.get(phone, 'phone'), tables.phones.index(phone), stress,
                          phrase, bool(row[2]), DIALOG_TAGS[row[3]],
                          INTERJECTIONS[row[4]], STYLES[row[1]]))
    return out


def sequence_to_json(seq: SymbolSequence, utt: AnnotatedUtterance,
                     lexicon: Lexicon | None = None) -> dict:
    symbols = []
    for sym in seq.symbols:
        d = asdict(sym)
        if lexicon is not None:
            d['phone'] = lexicon.phones[sym.phone_id]
        symbols.append(d)
    return {'utterance_id': seq.utterance_id, 'speaker_role': utt.speaker_role,
            'style': utt.style, 'symbols': symbols}


def compile_script(lines: Iterable[str], lexicon: Lexicon, style: str = 'conversational'):
    """Parse and compile plain markup lines; convenience for tests and tools."""
    for n, line in enumerate(lines):
        utt = parse_markup(line, utterance_id=f'u{n:04d}', style=style)
        yield utt, build_symbol_sequence(utt, lexicon)
