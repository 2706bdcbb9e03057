"""Corpus manifests: one JSON object per utterance, paths relative to a root."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationFailure
from .frontend import ROLES, STYLES

ORIGINS = ('recorded', 'vc')


@dataclass
class ManifestRow:
    utterance_id: str
    speaker_id: int
    style: str
    role: str
    markup_path: str
    feature_path: str
    origin: str = 'recorded'
    source_speaker: int | None = None
    target_speaker: int | None = None
    wave_path: str | None = None
    durations_path: str | None = None

    def __post_init__(self):
        if self.style not in STYLES:
            raise ValidationFailure(f'{self.utterance_id}: unknown style {self.style!r}')
        if self.role not in ROLES:
            raise ValidationFailure(f'{self.utterance_id}: unknown role {self.role!r}')
        if self.origin not in ORIGINS:
            raise ValidationFailure(f'{self.utterance_id}: unknown origin {self.origin!r}')

    def to_dict(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}


@dataclass
class CorpusManifest:
    rows: list[ManifestRow] = field(default_factory=list)
    root: Path = Path('.')

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    @classmethod
    def load(cls, path: str | Path, root: str | Path | None = None) -> CorpusManifest:
        """Read a JSON-lines manifest; ``root`` defaults to the parent of its directory."""
        path = Path(path)
        if not path.exists():
            raise ValidationFailure(f'manifest {path} does not exist')
        rows = []
        with open(path) as f:
            for n, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    rows.append(ManifestRow(**json.loads(line)))
                except (TypeError, json.JSONDecodeError) as exc:
                    raise ValidationFailure(f'{path}:{n}: {exc}') from None
        return cls(rows, Path(root) if root is not None else path.parent.parent)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            for row in self.rows:
                f.write(json.dumps(row.to_dict()) + '\n')

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def speakers(self) -> list[int]:
        return sorted({r.speaker_id for r in self.rows})

    def filter(self, pred) -> CorpusManifest:
        return CorpusManifest([r for r in self.rows if pred(r)], self.root)

    def validate(self, require_features: bool = True) -> None:
        """Uniqueness of ``(utterance_id, speaker, origin)`` and existence of every path."""
        seen = set()
        missing = []
        for r in self.rows:
            key = (r.utterance_id, r.speaker_id, r.origin)
            if key in seen:
                raise ValidationFailure(f'duplicate manifest key {key}')
            seen.add(key)
            paths = [r.markup_path] + ([r.feature_path] if require_features else [])
            paths += [p for p in (r.wave_path, r.durations_path) if p and not require_features]
            missing += [p for p in paths if not self.resolve(p).exists()]
        if missing:
            raise ValidationFailure(f'{len(missing)} manifest paths missing, e.g. {missing[:3]}')

    def keys(self) -> set[tuple[str, int, str]]:
        return {(r.utterance_id, r.speaker_id, r.origin) for r in self.rows}
