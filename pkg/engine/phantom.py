"""
Procedural skull-like phantoms with analytically exact ground truth.

A phantom has two bony structures, a "midface" ellipsoid shell with two thin
lateral wall patches and a "mandible" horseshoe tube carrying a row of small
tooth bumps, plus an unlabelled soft-tissue envelope that hosts the face
landmarks. Every mask voxel is decided by a closed-form membership test at its
centre and every landmark sits on a closed-form surface point.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Tuple

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy import ndimage

from engine.dataset import CaseEntry, DatasetManifest, save_dataset_manifest, split_counts
from engine.errors import PhantomSpecError
from engine.landmarks import Landmark, LandmarkManifest, LandmarkSet, save_landmark_manifest, write_landmarks
from engine.volume import Grid, Volume, write_volume
from utils.logger import get_logger

logger = get_logger()

MIDFACE, MANDIBLE = 1, 2
BONE_NAMES = ['thin_wall_left', 'thin_wall_right', 'midface_front', 'midface_top',
              'menton', 'mandible_left_front', 'mandible_right_front']
FACE_NAMES = ['face_front', 'face_top', 'face_left', 'face_right']
ANCHOR_ANGLE_DEG = 30.0

Triple = Tuple[float, float, float]


class PhantomSpec(BaseModel):
    model_config = ConfigDict(extra='forbid')

    seed: int = 0
    shape: Tuple[int, int, int] = (128, 128, 128)
    spacing: Triple = (1.0, 1.0, 1.0)
    coarse_spacing: float = Field(2.0, gt=0)
    modality: Literal['cbct', 'ct'] = 'cbct'
    # pose
    translation_mm: Triple = (0.0, 0.0, 0.0)
    scale: float = Field(1.0, gt=0)
    # midface shell
    midface_center: Triple = (0.0, 0.0, 12.0)
    midface_radii: Triple = (44.0, 46.0, 36.0)
    shell_thickness_mm: float = Field(3.0, gt=0)
    midface_floor_mm: float = -28.0
    thin_wall_thickness_mm: float = Field(1.2, gt=0)
    thin_patch_radius_mm: float = Field(12.0, gt=0)
    # mandible horseshoe
    mandible_center: Triple = (0.0, 0.0, -38.0)
    arch_radius_mm: float = Field(35.0, gt=0)
    arch_half_angle_deg: float = Field(110.0, gt=0, le=180)
    tube_outer_radius_mm: float = Field(6.0, gt=0)
    tube_inner_radius_mm: float = Field(3.5, ge=0)
    tooth_count: int = Field(6, ge=6)
    tooth_pitch_mm: float = Field(3.2, gt=0)
    tooth_radius_mm: float = Field(1.5, gt=0)
    face_offset_mm: float = Field(6.0, gt=0)
    # appearance
    bone_intensity: float = 1000.0
    soft_tissue_intensity: float = 0.0
    background_intensity: float = 0.0
    noise_sigma: float = Field(60.0, ge=0)
    smoothing_sigma_mm: float = Field(0.6, ge=0)

    @property
    def tooth_names(self) -> List[str]:
        return [f'tooth_{k + 1}' for k in range(self.tooth_count)]


class JitterRules(BaseModel):
    """Per-case variation of the phantom spec.

    With `enabled` off every case keeps the base geometry and the base
    modality; only the noise realisation differs between cases.
    """
    model_config = ConfigDict(extra='forbid')

    enabled: bool = True
    translation_mm: float = Field(4.0, ge=0)
    scale: float = Field(0.04, ge=0, lt=0.5)
    shell_thickness_mm: float = Field(0.4, ge=0)
    thin_wall_thickness_mm: float = Field(0.2, ge=0)
    ct_fraction: float = Field(78 / 170, ge=0, le=1)


def load_phantom_spec(path) -> Tuple[PhantomSpec, JitterRules]:
    """YAML with optional top-level `phantom` and `jitter` sections."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'phantom spec not found: {path}')
    try:
        raw = yaml.safe_load(path.read_text(encoding='utf-8')) or {}
        unknown = set(raw) - {'phantom', 'jitter'}
        if unknown:
            raise PhantomSpecError(f'{path}: unknown section(s) {sorted(unknown)}')
        return PhantomSpec(**(raw.get('phantom') or {})), JitterRules(**(raw.get('jitter') or {}))
    except (yaml.YAMLError, ValidationError, TypeError, AttributeError) as e:
        raise PhantomSpecError(f'invalid phantom spec {path}: {e}') from e


def phantom_landmark_manifest(spec: PhantomSpec) -> LandmarkManifest:
    return LandmarkManifest(
        bone=list(BONE_NAMES),
        teeth=spec.tooth_names,
        face=list(FACE_NAMES),
        thin_bone_pair=('thin_wall_left', 'thin_wall_right'),
        tooth_anchors=['mandible_left_front', 'mandible_right_front'],
        flip_pairs=[('thin_wall_left', 'thin_wall_right'),
                    ('mandible_left_front', 'mandible_right_front'),
                    ('face_left', 'face_right')],
    )


def _angle_diff_deg(a, b):
    return (a - b + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class PhantomGeometry:
    """Closed-form membership tests and landmark positions in world mm."""
    spec: PhantomSpec

    @property
    def s(self) -> float:
        return self.spec.scale

    @property
    def midface_center(self) -> np.ndarray:
        return np.asarray(self.spec.translation_mm) + self.s * np.asarray(self.spec.midface_center)

    @property
    def midface_radii(self) -> np.ndarray:
        return self.s * np.asarray(self.spec.midface_radii)

    @property
    def mandible_center(self) -> np.ndarray:
        return np.asarray(self.spec.translation_mm) + self.s * np.asarray(self.spec.mandible_center)

    @property
    def arch_radius(self) -> float:
        return self.s * self.spec.arch_radius_mm

    @property
    def tube_outer(self) -> float:
        return self.s * self.spec.tube_outer_radius_mm

    @property
    def tube_inner(self) -> float:
        return self.s * self.spec.tube_inner_radius_mm

    @property
    def tooth_radius(self) -> float:
        return self.s * self.spec.tooth_radius_mm

    @property
    def envelope_radii(self) -> np.ndarray:
        return self.midface_radii + self.spec.face_offset_mm

    def thin_wall_points(self) -> Tuple[np.ndarray, np.ndarray]:
        c, r = self.midface_center, self.midface_radii
        return c + np.array([-r[0], 0.0, 0.0]), c + np.array([r[0], 0.0, 0.0])

    def tooth_angles_deg(self) -> np.ndarray:
        n = self.spec.tooth_count
        step = math.degrees(self.spec.tooth_pitch_mm / self.arch_radius)
        return 90.0 + (np.arange(n) - (n - 1) / 2.0) * step

    def tooth_bump_centers(self) -> np.ndarray:
        phi = np.radians(self.tooth_angles_deg())
        m, a = self.mandible_center, self.arch_radius
        return np.stack([m[0] + a * np.cos(phi), m[1] + a * np.sin(phi),
                         np.full_like(phi, m[2] + self.tube_outer)], axis=1)

    # membership tests take broadcastable x, y, z arrays (world mm)

    def midface(self, x, y, z):
        c, r = self.midface_center, self.midface_radii
        dx, dy, dz = x - c[0], y - c[1], z - c[2]
        outer = (dx / r[0]) ** 2 + (dy / r[1]) ** 2 + (dz / r[2]) ** 2 <= 1.0
        near_patch = np.zeros(np.broadcast(dx, dy, dz).shape, dtype=bool)
        for p in self.thin_wall_points():
            near_patch |= (x - p[0]) ** 2 + (y - p[1]) ** 2 + (z - p[2]) ** 2 <= (self.s * self.spec.thin_patch_radius_mm) ** 2
        thickness = np.where(near_patch, self.spec.thin_wall_thickness_mm, self.spec.shell_thickness_mm)
        inner = (dx / (r[0] - thickness)) ** 2 + (dy / (r[1] - thickness)) ** 2 + (dz / (r[2] - thickness)) ** 2 >= 1.0
        above_floor = dz >= self.s * self.spec.midface_floor_mm
        return outer & inner & above_floor

    def mandible(self, x, y, z):
        m = self.mandible_center
        dx, dy, dz = x - m[0], y - m[1], z - m[2]
        phi = np.degrees(np.arctan2(dy, dx))
        in_arc = np.abs(_angle_diff_deg(phi, 90.0)) <= self.spec.arch_half_angle_deg
        d = np.sqrt((np.hypot(dx, dy) - self.arch_radius) ** 2 + dz ** 2)
        tube = in_arc & (d <= self.tube_outer) & (d >= self.tube_inner)
        for t in self.tooth_bump_centers():
            tube = tube | ((x - t[0]) ** 2 + (y - t[1]) ** 2 + (z - t[2]) ** 2 <= self.tooth_radius ** 2)
        return tube

    def envelope(self, x, y, z):
        c, r = self.midface_center, self.envelope_radii
        return ((x - c[0]) / r[0]) ** 2 + ((y - c[1]) / r[1]) ** 2 + ((z - c[2]) / r[2]) ** 2 <= 1.0

    def structure_of(self, group: str, name: str) -> str:
        if group == 'face':
            return 'envelope'
        if group == 'teeth' or name in ('menton', 'mandible_left_front', 'mandible_right_front'):
            return 'mandible'
        return 'midface'

    def contains(self, structure: str, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return getattr(self, structure)(p[..., 0], p[..., 1], p[..., 2])

    def landmarks(self) -> LandmarkSet:
        c, r = self.midface_center, self.midface_radii
        m, a, ro = self.mandible_center, self.arch_radius, self.tube_outer
        e = self.envelope_radii
        left, right = self.thin_wall_points()

        def arch_outer(deg):
            rad = math.radians(deg)
            return m + np.array([(a + ro) * math.cos(rad), (a + ro) * math.sin(rad), 0.0])

        bone = {
            'thin_wall_left': left,
            'thin_wall_right': right,
            'midface_front': c + np.array([0.0, r[1], 0.0]),
            'midface_top': c + np.array([0.0, 0.0, r[2]]),
            'menton': m + np.array([0.0, a, -ro]),
            'mandible_left_front': arch_outer(90.0 + ANCHOR_ANGLE_DEG),
            'mandible_right_front': arch_outer(90.0 - ANCHOR_ANGLE_DEG),
        }
        diag = math.sqrt(0.5)
        face = {
            'face_front': c + np.array([0.0, e[1], 0.0]),
            'face_top': c + np.array([0.0, 0.0, e[2]]),
            'face_left': c + np.array([-diag * e[0], diag * e[1], 0.0]),
            'face_right': c + np.array([diag * e[0], diag * e[1], 0.0]),
        }
        apex = self.tooth_bump_centers() + np.array([0.0, 0.0, self.tooth_radius])
        entries = [Landmark(n, 'bone', tuple(bone[n])) for n in BONE_NAMES]
        entries += [Landmark(n, 'teeth', tuple(p)) for n, p in zip(self.spec.tooth_names, apex)]
        entries += [Landmark(n, 'face', tuple(face[n])) for n in FACE_NAMES]
        return LandmarkSet(entries)


def phantom_grid(spec: PhantomSpec) -> Grid:
    """Grid centred on world (0, 0, 0)."""
    shape = np.asarray(spec.shape)
    spacing = np.asarray(spec.spacing)
    return Grid(tuple(spec.shape), spec.spacing, tuple(-(shape - 1) / 2.0 * spacing))


def validate_spec(spec: PhantomSpec):
    if spec.thin_wall_thickness_mm >= spec.coarse_spacing:
        raise PhantomSpecError('thin wall must be thinner than the coarse spacing')
    if spec.thin_wall_thickness_mm >= spec.shell_thickness_mm:
        raise PhantomSpecError('thin wall must be thinner than the regular shell')
    if spec.shell_thickness_mm >= min(spec.midface_radii):
        raise PhantomSpecError('shell thickness exceeds the midface radii')
    if spec.tube_inner_radius_mm >= spec.tube_outer_radius_mm:
        raise PhantomSpecError('mandible tube inner radius must be < outer radius')
    if spec.tooth_pitch_mm >= 2 * spec.coarse_spacing:
        raise PhantomSpecError('tooth pitch must be < 2x coarse spacing')
    geometry = PhantomGeometry(spec)
    midface_bottom = geometry.midface_center[2] + spec.scale * spec.midface_floor_mm
    mandible_top = geometry.mandible_center[2] + geometry.tube_outer + 2 * geometry.tooth_radius
    if mandible_top >= midface_bottom:
        raise PhantomSpecError(f'structures overlap: mandible top {mandible_top:.1f} mm reaches the '
                               f'midface floor {midface_bottom:.1f} mm')
    grid = phantom_grid(spec)
    outside = [lm.name for lm in geometry.landmarks() if not grid.contains(lm.position)]
    if outside:
        raise PhantomSpecError(f'landmarks outside the grid: {outside}')


def generate(spec: PhantomSpec) -> Tuple[Volume, Volume, LandmarkSet]:
    """(image, ground-truth mask, ground-truth landmarks) for one phantom."""
    validate_spec(spec)
    geometry = PhantomGeometry(spec)
    grid = phantom_grid(spec)
    x = grid.axis_centers(0)[:, None, None]
    y = grid.axis_centers(1)[None, :, None]
    z = grid.axis_centers(2)[None, None, :]
    midface = geometry.midface(x, y, z)
    mandible = geometry.mandible(x, y, z)
    if np.any(midface & mandible):
        raise PhantomSpecError('midface and mandible share voxels')
    mask = np.zeros(grid.shape, dtype=np.uint8)
    mask[midface] = MIDFACE
    mask[mandible] = MANDIBLE

    image = np.full(grid.shape, spec.background_intensity, dtype=np.float64)
    image[np.broadcast_to(geometry.envelope(x, y, z), grid.shape)] = spec.soft_tissue_intensity
    image[mask > 0] = spec.bone_intensity
    if spec.smoothing_sigma_mm > 0:
        image = ndimage.gaussian_filter(image, sigma=spec.smoothing_sigma_mm / np.asarray(spec.spacing))
    sigma = spec.noise_sigma * (0.5 if spec.modality == 'ct' else 1.0)
    if sigma > 0:
        rng = np.random.default_rng(spec.seed)
        image = image + rng.normal(0.0, sigma, size=grid.shape)
    return (Volume(image.astype(np.float32), grid.spacing, grid.origin, 'image'),
            Volume(mask, grid.spacing, grid.origin, 'label'),
            geometry.landmarks())


def jittered_spec(base: PhantomSpec, jitter: JitterRules, rng: np.random.Generator, modality: str) -> PhantomSpec:
    updates = {'seed': int(rng.integers(0, 2 ** 31 - 1)), 'modality': modality}
    if jitter.enabled:
        t = rng.uniform(-jitter.translation_mm, jitter.translation_mm, size=3)
        updates['translation_mm'] = tuple(float(v) for v in np.asarray(base.translation_mm) + t)
        updates['scale'] = float(base.scale * (1.0 + rng.uniform(-jitter.scale, jitter.scale)))
        updates['shell_thickness_mm'] = float(base.shell_thickness_mm
                                              + rng.uniform(-jitter.shell_thickness_mm, jitter.shell_thickness_mm))
        thin = base.thin_wall_thickness_mm + rng.uniform(-jitter.thin_wall_thickness_mm, jitter.thin_wall_thickness_mm)
        updates['thin_wall_thickness_mm'] = float(np.clip(thin, 0.5 * base.thin_wall_thickness_mm,
                                                          0.95 * base.coarse_spacing))
    return base.model_copy(update=updates)


def stratified_splits(modalities: List[str], rng: np.random.Generator) -> List[str]:
    """Split labels with 70/10/20 counts, balanced across modalities."""
    n = len(modalities)
    _, n_val, n_test = split_counts(n)
    strata: Dict[str, List[int]] = {}
    for i, m in enumerate(modalities):
        strata.setdefault(m, []).append(i)
    queues = [list(rng.permutation(strata[m])) for m in sorted(strata)]
    order = []
    while any(queues):
        for q in queues:
            if q:
                order.append(int(q.pop(0)))
    splits = ['train'] * n
    for rank, i in enumerate(order):
        if rank < n_test:
            splits[i] = 'test'
        elif rank < n_test + n_val:
            splits[i] = 'val'
    return splits


def generate_dataset(n: int, base_spec: PhantomSpec, jitter: JitterRules, out_dir) -> DatasetManifest:
    """Write `n` phantoms plus a dataset manifest under `out_dir`."""
    if n < 1:
        raise PhantomSpecError('phantom count must be >= 1')
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(base_spec.seed)
    split_rng = np.random.default_rng(root.spawn(1)[0])
    case_rngs = [np.random.default_rng(s) for s in root.spawn(n)]
    if jitter.enabled:
        modalities = ['ct' if split_rng.random() < jitter.ct_fraction else 'cbct' for _ in range(n)]
    else:
        modalities = [base_spec.modality] * n
    splits = stratified_splits(modalities, split_rng)

    manifest_name = 'landmarks.yaml'
    save_landmark_manifest(phantom_landmark_manifest(base_spec), out_dir / manifest_name)
    cases = []
    for i in range(n):
        case_id = f'case_{i:03d}'
        spec = jittered_spec(base_spec, jitter, case_rngs[i], modalities[i])
        image, mask, landmarks = generate(spec)
        entry = CaseEntry(
            case_id=case_id,
            image=f'images/{case_id}.nii',
            mask=f'masks/{case_id}.nii',
            landmarks=f'landmarks/{case_id}.csv',
            split=splits[i],
            modality=modalities[i],
        )
        write_volume(image, out_dir / entry.image)
        write_volume(mask, out_dir / entry.mask)
        write_landmarks(landmarks, out_dir / entry.landmarks)
        cases.append(entry)
        logger.info(f'Generated {case_id} ({entry.modality}, {entry.split})')
    manifest = DatasetManifest(seed=base_spec.seed, landmark_manifest=manifest_name, cases=cases)
    save_dataset_manifest(manifest, out_dir / 'manifest.json')
    return manifest
