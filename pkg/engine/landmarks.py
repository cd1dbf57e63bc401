"""
Landmark sets, their sphere-mask encoding and the decoding of probability maps
back to world coordinates.
"""

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from engine.errors import ConfigurationError, InvalidArgumentError, VolumeFormatError
from engine.provenance import Provenance, warn
from engine.volume import GridLike, Volume, as_grid

GROUPS = ('bone', 'teeth', 'face')
CSV_FIELDS = ['name', 'group', 'x', 'y', 'z', 'present']
DECODE_METHODS = ('centroid', 'argmax')

_NAN3 = (math.nan, math.nan, math.nan)


@dataclass(frozen=True)
class Landmark:
    name: str
    group: str
    position: Tuple[float, float, float] = _NAN3
    present: bool = True

    def __post_init__(self):
        if self.group not in GROUPS:
            raise InvalidArgumentError(f'landmark {self.name!r}: unknown group {self.group!r}')
        object.__setattr__(self, 'position', tuple(float(v) for v in self.position))


class LandmarkSet:
    """Ordered, uniquely named landmarks. Order defines the class index (i + 1)."""

    def __init__(self, entries: Iterable[Landmark] = ()):
        self._entries: Tuple[Landmark, ...] = tuple(entries)
        self._index = {}
        for i, lm in enumerate(self._entries):
            if lm.name in self._index:
                raise InvalidArgumentError(f'duplicate landmark name {lm.name!r}')
            self._index[lm.name] = i

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __getitem__(self, key: Union[int, str]) -> Landmark:
        if isinstance(key, str):
            return self._entries[self._index[key]]
        return self._entries[key]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __eq__(self, other):
        if not isinstance(other, LandmarkSet) or len(self) != len(other):
            return False
        for a, b in zip(self, other):
            if (a.name, a.group, a.present) != (b.name, b.group, b.present):
                return False
            if a.present and not np.array_equal(a.position, b.position):
                return False
        return True

    def __repr__(self):
        return f'LandmarkSet({len(self)} landmarks, {int(self.present.sum())} present)'

    @property
    def names(self) -> List[str]:
        return [lm.name for lm in self._entries]

    @property
    def positions(self) -> np.ndarray:
        return np.array([lm.position for lm in self._entries], dtype=np.float64).reshape(-1, 3)

    @property
    def present(self) -> np.ndarray:
        return np.array([lm.present for lm in self._entries], dtype=bool)

    def get(self, name: str) -> Optional[Landmark]:
        i = self._index.get(name)
        return None if i is None else self._entries[i]

    def group(self, group: str) -> 'LandmarkSet':
        return LandmarkSet(lm for lm in self._entries if lm.group == group)

    def absent(self) -> 'LandmarkSet':
        """Same names and groups, every landmark flagged not detected."""
        return LandmarkSet(replace(lm, position=_NAN3, present=False) for lm in self._entries)

    def updated(self, other: 'LandmarkSet') -> 'LandmarkSet':
        """Copy of self with entries replaced by same-named entries of `other`."""
        return LandmarkSet(other.get(lm.name) or lm for lm in self._entries)


def _format_coord(v: float) -> str:
    return 'nan' if math.isnan(v) else f'{v:.6f}'


def write_landmarks(lms: LandmarkSet, path):
    """Write landmarks as UTF-8 CSV: name,group,x,y,z,present (world mm)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS, lineterminator='\n')
        writer.writeheader()
        for lm in lms:
            x, y, z = lm.position if lm.present else _NAN3
            writer.writerow({
                'name': lm.name, 'group': lm.group,
                'x': _format_coord(x), 'y': _format_coord(y), 'z': _format_coord(z),
                'present': int(lm.present),
            })


def read_landmarks(path) -> LandmarkSet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'landmark file not found: {path}')
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_FIELDS:
            raise VolumeFormatError(f'{path}: expected header {",".join(CSV_FIELDS)}, got {reader.fieldnames}')
        entries = []
        for row in reader:
            try:
                present = row['present'].strip() == '1'
                position = tuple(float(row[k]) for k in ('x', 'y', 'z')) if present else _NAN3
                entries.append(Landmark(row['name'], row['group'], position, present))
            except (ValueError, InvalidArgumentError) as e:
                raise VolumeFormatError(f'{path}: bad landmark row {row}: {e}') from e
    return LandmarkSet(entries)


class LandmarkManifest(BaseModel):
    """Landmark inventory: names per group (class order) plus ROI and flip anchors."""
    model_config = ConfigDict(extra='forbid', frozen=True)

    bone: List[str]
    teeth: List[str]
    face: List[str]
    thin_bone_pair: Tuple[str, str]
    tooth_anchors: List[str]
    flip_pairs: List[Tuple[str, str]] = []

    @field_validator('bone', 'teeth', 'face')
    @classmethod
    def _non_empty(cls, names):
        if not names:
            raise ValueError('every landmark group needs at least one name')
        return names

    @model_validator(mode='after')
    def _check_names(self):
        names = self.bone + self.teeth + self.face
        if len(set(names)) != len(names):
            raise ValueError('landmark names must be unique across groups')
        known = set(names)
        referenced = list(self.thin_bone_pair) + list(self.tooth_anchors)
        referenced += [n for pair in self.flip_pairs for n in pair]
        unknown = [n for n in referenced if n not in known]
        if unknown:
            raise ValueError(f'unknown landmark names referenced: {unknown}')
        for n in list(self.thin_bone_pair) + list(self.tooth_anchors):
            if n not in self.bone:
                raise ValueError(f'ROI anchor {n!r} must be a bone landmark')
        return self

    def group_names(self, group: str) -> List[str]:
        if group not in GROUPS:
            raise ConfigurationError(f'unknown landmark group {group!r}')
        return list(getattr(self, group))

    def template(self, group: str = None) -> LandmarkSet:
        """All landmarks (or one group) flagged absent, in class order."""
        groups = GROUPS if group is None else (group,)
        return LandmarkSet(Landmark(n, g, _NAN3, False) for g in groups for n in self.group_names(g))

    def num_classes(self, group: str) -> int:
        return len(self.group_names(group)) + 1

    @property
    def size(self) -> int:
        return len(self.bone) + len(self.teeth) + len(self.face)


def load_landmark_manifest(path) -> LandmarkManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'landmark manifest not found: {path}')
    try:
        raw = yaml.safe_load(path.read_text(encoding='utf-8')) or {}
        return LandmarkManifest(**raw)
    except (yaml.YAMLError, ValidationError, TypeError) as e:
        raise ConfigurationError(f'invalid landmark manifest {path}: {e}') from e


def save_landmark_manifest(manifest: LandmarkManifest, path):
    data = manifest.model_dump(mode='json')
    Path(path).write_text(yaml.safe_dump(data, sort_keys=False), encoding='utf-8')


@dataclass(frozen=True)
class SphereRadius:
    radius_voxels: int = 3

    def __post_init__(self):
        if int(self.radius_voxels) != self.radius_voxels or self.radius_voxels < 1:
            raise InvalidArgumentError(f'sphere radius must be a positive integer, got {self.radius_voxels}')


def _radius(r) -> int:
    if isinstance(r, SphereRadius):
        return int(r.radius_voxels)
    return int(SphereRadius(r).radius_voxels)


def ball_offsets(r: int) -> np.ndarray:
    """Integer offsets d with ||d|| <= r (inclusive shell)."""
    span = np.arange(-r, r + 1)
    d = np.stack(np.meshgrid(span, span, span, indexing='ij'), axis=-1).reshape(-1, 3)
    return d[(d ** 2).sum(axis=1) <= r * r]


def landmark_voxels(lms: LandmarkSet, grid: GridLike) -> List[Optional[np.ndarray]]:
    """Rounded voxel index per landmark (None when absent)."""
    grid = as_grid(grid)
    return [np.rint(grid.world_to_voxel(lm.position)).astype(int) if lm.present else None for lm in lms]


def resolve_sphere_overlap(voxel, centers: Sequence[Optional[np.ndarray]], radius) -> int:
    """Label of one voxel given every landmark's voxel index.

    Among landmarks whose sphere covers the voxel, the nearest wins (index
    distance); ties go to the lowest class index. 0 when no sphere covers it.
    """
    r2 = _radius(radius) ** 2
    v = np.asarray(voxel)
    best_label, best_d2 = 0, None
    for i, c in enumerate(centers):
        if c is None:
            continue
        d2 = int(((v - c) ** 2).sum())
        if d2 <= r2 and (best_d2 is None or d2 < best_d2):
            best_label, best_d2 = i + 1, d2
    return best_label


def encode_landmarks(lms: LandmarkSet, grid: GridLike, radius=3,
                     provenance: Provenance = None) -> Volume:
    """Label volume with class i+1 on the radius-`radius` voxel sphere of landmark i.

    Spheres are measured in voxel-index space, so on anisotropic grids they are
    physical ellipsoids. Parts outside the grid are clipped.
    """
    grid = as_grid(grid)
    r = _radius(radius)
    dtype = np.uint8 if len(lms) < 255 else np.int32
    labels = np.zeros(grid.shape, dtype=dtype)
    best = np.full(grid.shape, np.iinfo(np.int32).max, dtype=np.int64)
    offsets = ball_offsets(r)
    dist2 = (offsets ** 2).sum(axis=1)
    shape = np.asarray(grid.shape)
    for i, (lm, c) in enumerate(zip(lms, landmark_voxels(lms, grid))):
        if c is None:
            continue
        pts = c + offsets
        keep = np.all((pts >= 0) & (pts < shape), axis=1)
        if not keep.any():
            warn(provenance, 'landmarks', f'sphere of {lm.name} lies outside the grid; encoded as background')
            continue
        if not keep.all():
            warn(provenance, 'landmarks', f'sphere of {lm.name} clipped by the grid boundary')
        pts, d2 = pts[keep], dist2[keep]
        idx = tuple(pts.T)
        win = d2 < best[idx]
        win_idx = tuple(pts[win].T)
        labels[win_idx] = i + 1
        best[win_idx] = d2[win]
    return Volume(labels, grid.spacing, grid.origin, 'label')


def labels_to_probabilities(labels: Volume, num_classes: int) -> Volume:
    """One-hot probability volume (C, x, y, z) from a label volume."""
    if labels.data.max(initial=0) >= num_classes:
        raise InvalidArgumentError(f'label {int(labels.data.max())} out of range for {num_classes} classes')
    eye = np.eye(num_classes, dtype=np.float32)
    probs = np.moveaxis(eye[labels.data], -1, 0)
    return Volume(probs, labels.spacing, labels.origin, 'probability')


def decode_landmarks(prob: Volume, template: LandmarkSet, threshold: float = 0.5,
                     method: str = 'centroid') -> LandmarkSet:
    """Recover landmark coordinates from a (C, x, y, z) probability volume.

    Channel c >= 1 maps to template entry c - 1. A landmark is present when any
    voxel exceeds `threshold`; its position is the probability-weighted
    centroid of those voxels (or the arg-max voxel with method='argmax').
    """
    if method not in DECODE_METHODS:
        raise ConfigurationError(f'unknown decode method {method!r}')
    if prob.data.ndim != 4 or prob.channels != len(template) + 1:
        raise ConfigurationError(
            f'probability map has {prob.channels} channels, expected {len(template) + 1} '
            f'for {len(template)} landmarks')
    grid = prob.grid
    out = []
    for c, lm in enumerate(template, start=1):
        p = prob.data[c]
        mask = p > threshold
        if not mask.any():
            out.append(replace(lm, position=_NAN3, present=False))
            continue
        if method == 'argmax':
            idx = np.array(np.unravel_index(int(np.argmax(p)), p.shape), dtype=np.float64)
        else:
            coords = np.argwhere(mask).astype(np.float64)
            w = p[mask].astype(np.float64)
            idx = (coords * w[:, None]).sum(axis=0) / w.sum()
        out.append(replace(lm, position=tuple(grid.voxel_to_world(idx)), present=True))
    return LandmarkSet(out)
