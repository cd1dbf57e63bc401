"""
Dataset manifests: which image / mask / landmark files form a case and which
split (train / val / test) each case belongs to.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, PrivateAttr, ValidationError

from engine.errors import ConfigurationError
from engine.landmarks import LandmarkManifest, LandmarkSet, load_landmark_manifest, read_landmarks
from engine.volume import Volume, read_volume

SPLITS = ('train', 'val', 'test')
MANIFEST_VERSION = 1


def split_counts(n: int):
    """70/10/20 split: floor for val and test, remainder to train."""
    n_val = n * 1 // 10
    n_test = n * 2 // 10
    return n - n_val - n_test, n_val, n_test


class CaseEntry(BaseModel):
    model_config = ConfigDict(extra='forbid')

    case_id: str
    image: str
    mask: Optional[str] = None
    landmarks: Optional[str] = None
    split: Literal['train', 'val', 'test']
    modality: Literal['cbct', 'ct'] = 'cbct'


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra='forbid')

    version: int = MANIFEST_VERSION
    seed: int = 0
    landmark_manifest: str
    cases: List[CaseEntry]

    _root: Path = PrivateAttr(default=Path('.'))

    @property
    def root(self) -> Path:
        return self._root

    def resolve(self, relative: str) -> Path:
        return self._root / relative

    def split(self, name: str) -> List[CaseEntry]:
        if name not in SPLITS:
            raise ConfigurationError(f'unknown split {name!r}')
        return [c for c in self.cases if c.split == name]

    def landmarks(self) -> LandmarkManifest:
        return load_landmark_manifest(self.resolve(self.landmark_manifest))

    def load_case(self, entry: CaseEntry) -> 'Case':
        return Case(
            case_id=entry.case_id,
            image=read_volume(self.resolve(entry.image)),
            mask=read_volume(self.resolve(entry.mask), kind='label') if entry.mask else None,
            landmarks=read_landmarks(self.resolve(entry.landmarks)) if entry.landmarks else None,
            modality=entry.modality,
        )


@dataclass
class Case:
    case_id: str
    image: Volume
    mask: Optional[Volume]
    landmarks: Optional[LandmarkSet]
    modality: str = 'cbct'


def load_dataset_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'dataset manifest not found: {path}')
    try:
        manifest = DatasetManifest(**json.loads(path.read_text(encoding='utf-8')))
    except (json.JSONDecodeError, ValidationError, TypeError) as e:
        raise ConfigurationError(f'invalid dataset manifest {path}: {e}') from e
    if manifest.version != MANIFEST_VERSION:
        raise ConfigurationError(f'{path}: unsupported manifest version {manifest.version}')
    manifest._root = path.parent
    return manifest


def save_dataset_manifest(manifest: DatasetManifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.model_dump(mode='json'), indent=2) + '\n', encoding='utf-8')
    manifest._root = path.parent
