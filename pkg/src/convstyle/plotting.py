"""Figures for run reports, rendered to image files."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_TERMS = ('mel', 'vocoder_pre', 'vocoder_post', 'duration', 'adversarial', 'total')


def plot_losses(records: list[dict], path: str | Path, stage: str = 'acoustic') -> Path | None:
    recs = [r for r in records if r.get('event') == 'loss' and r.get('stage') == stage]
    if not recs:
        return None
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [r['step'] for r in recs]
    for term in LOSS_TERMS:
        vals = [r.get(term) for r in recs]
        if all(v is not None for v in vals):
            ax.plot(steps, vals, label=term, lw=1)
    ax.set_yscale('log')
    ax.set_xlabel('step')
    ax.set_ylabel('loss')
    ax.set_title(f'{stage} training')
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_ranking(ranking: dict, path: str | Path) -> Path | None:
    ranked = ranking.get('ranked') or []
    if not ranked:
        return None
    fig, ax = plt.subplots(figsize=(7, 3.5))
    names = [r['checkpoint_id'] for r in ranked]
    counts = [r['unnatural_count'] for r in ranked]
    totals = [r['total'] for r in ranked]
    x = np.arange(len(names))
    ax.bar(x, totals, color='0.85', label='judged')
    ax.bar(x, counts, color='tab:red', label='unnatural')
    ax.set_xticks(x, names, rotation=45, ha='right', fontsize=8)
    ax.set_ylabel('utterances')
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_synthesis(synth_dir: str | Path, path: str | Path, limit: int = 6) -> Path | None:
    """f0 contours and HPC values of the first few synthesized utterances."""
    synth_dir = Path(synth_dir)
    report_path = synth_dir / 'report.json'
    if not report_path.exists():
        return None
    utts = json.loads(report_path.read_text())['utterances'][:limit]
    if not utts:
        return None
    fig, (a0, a1) = plt.subplots(1, 2, figsize=(10, 4))
    for u in utts:
        with np.load(synth_dir / u['path']) as z:
            f0 = np.where(z['voicing'] > 0, z['f0'], np.nan)
        a0.plot(f0, lw=1, label=u['utterance_id'])
    a0.set_xlabel('frame')
    a0.set_ylabel('f0 (Hz)')
    a0.legend(fontsize=7)
    hpc = np.array([u['hpc_utterance'] for u in utts])
    for k, name in enumerate(('pitch level', 'pitch range', 'log duration')):
        a1.plot(hpc[:, k], 'o-', label=name)
    a1.set_xlabel('utterance')
    a1.set_ylabel('normalised control')
    a1.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
