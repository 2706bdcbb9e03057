"""Run report: tab-delimited summary rows plus figures written next to them."""
from __future__ import annotations

import json
from pathlib import Path

from .plotting import plot_losses, plot_ranking, plot_synthesis


def build_report(run_dir: str | Path, out_dir: str | Path | None = None,
                 synth_dir: str | Path | None = None) -> list[tuple[str, str, str]]:
    """Rows of ``(section, key, value)``; figures land in ``out_dir``."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir / 'report'
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[tuple[str, str, str]] = []
    records = []
    log_path = run_dir / 'runlog.jsonl'
    if log_path.exists():
        records = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
    marker = run_dir / 'run.json'
    if marker.exists():
        run = json.loads(marker.read_text())
        rows.append(('run', 'status', run.get('status', '')))
        rows.append(('run', 'system', run.get('spec', {}).get('system', '')))
        rows.append(('run', 'top_checkpoint', str(run.get('top_checkpoint'))))
        for k, v in sorted((run.get('final_losses') or {}).items()):
            rows.append(('final_loss', k, f'{v:.6g}'))
    ranking_path = run_dir / 'ranking.json'
    ranking = json.loads(ranking_path.read_text()) if ranking_path.exists() else {}
    for r in ranking.get('ranked', []):
        rows.append(('ranking', r['checkpoint_id'], f"{r['unnatural_count']}/{r['total']}"))
    for name, fig in (('loss_acoustic', plot_losses(records, out_dir / 'loss_acoustic.png')),
                      ('loss_vc', plot_losses(records, out_dir / 'loss_vc.png', 'vc')),
                      ('ranking', plot_ranking(ranking, out_dir / 'ranking.png')),
                      ('synthesis', plot_synthesis(synth_dir, out_dir / 'synthesis.png')
                       if synth_dir is not None else None)):
        if fig is not None:
            rows.append(('figure', name, str(fig)))
    return rows
