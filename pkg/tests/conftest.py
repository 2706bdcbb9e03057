import numpy as np
import pytest
import torch

from convstyle.dataset import build_tts_items, extract_corpus_features, load_corpus
from convstyle.frontend import Lexicon, VocabularyTables
from convstyle.manifest import CorpusManifest
from convstyle.toy import make_toy_corpus

torch.set_num_threads(1)


@pytest.fixture(scope='session')
def lexicon():
    return Lexicon.load()


@pytest.fixture(scope='session')
def tables(lexicon):
    return VocabularyTables.from_lexicon(lexicon)


@pytest.fixture(scope='session')
def small_corpus(tmp_path_factory):
    """Toy corpus (4 speakers) with features extracted."""
    root = tmp_path_factory.mktemp('toy')
    paths = make_toy_corpus(root, n_neutral=3, utts_per_neutral=4, n_conversational=7,
                            n_heldout=4, script_lines=8)
    manifest = CorpusManifest.load(paths['recorded'])
    extract_corpus_features(manifest)
    return {'root': root, 'paths': paths, 'manifest': manifest}


@pytest.fixture(scope='session')
def small_items(small_corpus, lexicon, tables):
    corpus = load_corpus(small_corpus['manifest'], lexicon)
    items, stats = build_tts_items(corpus, tables)
    return items


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(n: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        print(line)
        _VERDICTS.append(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section('acceptance criteria')
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[2].rstrip(':'))):
            terminalreporter.write_line(line)
