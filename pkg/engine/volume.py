"""
Geometry-aware 3D volumes: resampling, cropping, pasting and NIfTI I/O.

Conventions shared by every module:
  - storage axis order is (x, y, z); probability volumes may carry a leading
    class axis, i.e. (C, x, y, z)
  - `origin` is the world position (mm) of the centre of voxel (0, 0, 0)
  - a volume covers [origin - spacing/2, origin + (shape - 1/2) * spacing]
  - anything sampled outside that extent is 0
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import nibabel as nib
import numpy as np
from scipy import ndimage

from engine.errors import (
    DegenerateGeometryError,
    EmptyRoiError,
    InvalidArgumentError,
    VolumeFormatError,
)

KINDS = ('image', 'label', 'probability')
MODES = ('linear', 'nearest')

# tolerance (in voxels) for containment and grid-size rounding
_EPS = 1e-6

Triple = Tuple[float, float, float]


def _triple(values, name: str) -> Triple:
    try:
        out = tuple(float(v) for v in values)
    except TypeError:
        out = (float(values),) * 3
    if len(out) != 3:
        raise InvalidArgumentError(f'{name} must have 3 components, got {len(out)}')
    if not all(math.isfinite(v) for v in out):
        raise InvalidArgumentError(f'{name} must be finite, got {out}')
    return out


def _positive_triple(values, name: str) -> Triple:
    out = _triple(values, name)
    if any(v <= 0 for v in out):
        raise InvalidArgumentError(f'{name} components must be > 0, got {out}')
    return out


def grid_size(length_mm, spacing) -> Tuple[int, int, int]:
    """Voxel count per axis covering `length_mm` at `spacing`: ceil(length / spacing)."""
    length = np.asarray(length_mm, dtype=np.float64)
    step = np.asarray(spacing, dtype=np.float64)
    return tuple(int(math.ceil(n - _EPS)) for n in length / step)


@dataclass(frozen=True)
class Grid:
    """Voxel lattice geometry without data."""
    shape: Tuple[int, int, int]
    spacing: Triple
    origin: Triple

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        if len(shape) != 3 or any(n < 1 for n in shape):
            raise DegenerateGeometryError(f'grid extents must be >= 1 along every axis, got {shape}')
        object.__setattr__(self, 'shape', shape)
        object.__setattr__(self, 'spacing', _positive_triple(self.spacing, 'spacing'))
        object.__setattr__(self, 'origin', _triple(self.origin, 'origin'))

    @property
    def lower_edge(self) -> np.ndarray:
        return np.asarray(self.origin) - np.asarray(self.spacing) / 2.0

    @property
    def upper_edge(self) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(self.shape) - 0.5) * np.asarray(self.spacing)

    @property
    def center(self) -> np.ndarray:
        return (self.lower_edge + self.upper_edge) / 2.0

    def world_to_voxel(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - np.asarray(self.origin)) / np.asarray(self.spacing)

    def voxel_to_world(self, index) -> np.ndarray:
        idx = np.asarray(index, dtype=np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def contains(self, points) -> np.ndarray:
        """True where a world point lies inside the grid's extent."""
        idx = self.world_to_voxel(points)
        n = np.asarray(self.shape)
        return np.all((idx >= -0.5 - _EPS) & (idx <= n - 0.5 + _EPS), axis=-1)

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + np.arange(self.shape[axis]) * self.spacing[axis]

    def box_mask(self, lower, upper) -> np.ndarray:
        """Boolean array over the grid: voxel centre inside [lower, upper]."""
        lower = np.asarray(lower, dtype=np.float64)
        upper = np.asarray(upper, dtype=np.float64)
        tol = _EPS * np.asarray(self.spacing)
        per_axis = []
        for axis in range(3):
            c = self.axis_centers(axis)
            per_axis.append((c >= lower[axis] - tol[axis]) & (c <= upper[axis] + tol[axis]))
        return per_axis[0][:, None, None] & per_axis[1][None, :, None] & per_axis[2][None, None, :]

    def same_as(self, other: 'Grid', tol: float = 1e-6) -> bool:
        return (self.shape == other.shape
                and np.allclose(self.spacing, other.spacing, rtol=0, atol=tol)
                and np.allclose(self.origin, other.origin, rtol=0, atol=tol))


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable 3D scalar grid (image, label or probability map)."""
    data: np.ndarray
    spacing: Triple
    origin: Triple
    kind: str = 'image'

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f'unknown volume kind {self.kind!r}')
        data = np.array(self.data, copy=True)
        spatial_ndim = 4 if (self.kind == 'probability' and data.ndim == 4) else 3
        if data.ndim != spatial_ndim:
            raise InvalidArgumentError(f'{self.kind} volume needs a 3D array, got shape {data.shape}')
        if any(n < 1 for n in data.shape):
            raise DegenerateGeometryError(f'volume extents must be >= 1 along every axis, got {data.shape}')
        if self.kind == 'label':
            if not np.issubdtype(data.dtype, np.integer):
                if not np.all(np.equal(np.mod(data, 1), 0)):
                    raise InvalidArgumentError('label volume contains non-integer values')
                data = data.astype(np.int32)
            if data.size and data.min() < 0:
                raise InvalidArgumentError('label volume contains negative values')
        elif self.kind == 'probability':
            data = data.astype(np.float32, copy=False)
            if data.size and (data.min() < -1e-6 or data.max() > 1 + 1e-6):
                raise InvalidArgumentError('probability volume must lie in [0, 1]')
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)
        object.__setattr__(self, 'spacing', _positive_triple(self.spacing, 'spacing'))
        object.__setattr__(self, 'origin', _triple(self.origin, 'origin'))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape[-3:])

    @property
    def channels(self) -> int:
        return self.data.shape[0] if self.data.ndim == 4 else 1

    @property
    def grid(self) -> Grid:
        return Grid(self.shape, self.spacing, self.origin)

    def with_data(self, data, kind: str = None) -> 'Volume':
        """New volume on the same geometry."""
        return Volume(data, self.spacing, self.origin, kind or self.kind)

    def __repr__(self):
        return (f'Volume(kind={self.kind}, shape={self.data.shape}, '
                f'spacing={self.spacing}, origin={self.origin})')


@dataclass(frozen=True)
class RoiBox:
    """Axis-aligned world-space crop region sampled at `target_spacing`."""
    lower_corner: Triple
    upper_corner: Triple
    target_spacing: Triple

    def __post_init__(self):
        lower = _triple(self.lower_corner, 'lower_corner')
        upper = _triple(self.upper_corner, 'upper_corner')
        if not all(lo < hi for lo, hi in zip(lower, upper)):
            raise InvalidArgumentError(f'roi lower corner {lower} must be < upper corner {upper}')
        object.__setattr__(self, 'lower_corner', lower)
        object.__setattr__(self, 'upper_corner', upper)
        object.__setattr__(self, 'target_spacing', _positive_triple(self.target_spacing, 'target_spacing'))

    @classmethod
    def around(cls, center, extent_mm, target_spacing) -> 'RoiBox':
        """Box of total size `extent_mm` centred at `center`."""
        center = np.asarray(_triple(center, 'center'))
        half = np.asarray(_positive_triple(extent_mm, 'extent_mm')) / 2.0
        return cls(tuple(center - half), tuple(center + half), target_spacing)

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.lower_corner)

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.upper_corner)

    @property
    def size(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def center(self) -> np.ndarray:
        return (self.lower + self.upper) / 2.0

    @property
    def grid(self) -> Grid:
        spacing = np.asarray(self.target_spacing)
        return Grid(grid_size(self.size, spacing), self.target_spacing, self.lower + spacing / 2.0)

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= self.lower) & (p <= self.upper), axis=-1)

    def to_dict(self) -> dict:
        return {
            'lower_corner': list(self.lower_corner),
            'upper_corner': list(self.upper_corner),
            'target_spacing': list(self.target_spacing),
        }

    @classmethod
    def from_dict(cls, d: dict) -> 'RoiBox':
        return cls(tuple(d['lower_corner']), tuple(d['upper_corner']), tuple(d['target_spacing']))


GridLike = Union[Grid, Volume]


def as_grid(obj: GridLike) -> Grid:
    return obj.grid if isinstance(obj, Volume) else obj


def world_to_voxel(v: GridLike, p) -> np.ndarray:
    """Continuous voxel index of world point(s) `p`."""
    return as_grid(v).world_to_voxel(p)


def voxel_to_world(v: GridLike, idx) -> np.ndarray:
    """World position (mm) of continuous voxel index(es) `idx`."""
    return as_grid(v).voxel_to_world(idx)


def _order(v: Volume, mode: str) -> int:
    if mode not in MODES:
        raise InvalidArgumentError(f'unknown interpolation mode {mode!r}')
    if v.kind == 'label' and mode != 'nearest':
        raise InvalidArgumentError('label volumes can only be resampled with nearest mode')
    return 0 if mode == 'nearest' else 1


def _aligned_offsets(scale: np.ndarray, offset: np.ndarray):
    """Integer offsets when the target lattice is a pure shift of the source one."""
    if not np.allclose(scale, 1.0, rtol=0, atol=1e-9):
        return None
    rounded = np.rint(offset)
    if not np.allclose(offset, rounded, rtol=0, atol=1e-6):
        return None
    return rounded.astype(int)


def _shift_copy(data: np.ndarray, shift, out_shape) -> np.ndarray:
    """out[i] = data[i + shift] with clamp-to-edge indexing."""
    index = [np.clip(np.arange(n) + s, 0, m - 1) for n, s, m in zip(out_shape, shift, data.shape)]
    return data[np.ix_(*index)]


def _sample_channel(data, src: Grid, dst: Grid, order: int, zero_outside: bool) -> np.ndarray:
    scale = np.asarray(dst.spacing) / np.asarray(src.spacing)
    offset = (np.asarray(dst.origin) - np.asarray(src.origin)) / np.asarray(src.spacing)
    shift = _aligned_offsets(scale, offset)
    if shift is not None:
        out = _shift_copy(data, shift, dst.shape)
    else:
        out = ndimage.affine_transform(
            data, scale, offset=offset, output_shape=dst.shape,
            order=order, mode='nearest', output=data.dtype,
        )
    if zero_outside:
        inside = dst.box_mask(src.lower_edge, src.upper_edge)
        if not inside.all():
            out = np.where(inside, out, np.zeros((), dtype=out.dtype))
    return np.asarray(out, dtype=data.dtype)


def _sample(v: Volume, dst: Grid, order: int, zero_outside: bool) -> Volume:
    src = v.grid
    if v.data.ndim == 4:
        data = np.stack([_sample_channel(c, src, dst, order, zero_outside) for c in v.data])
    else:
        data = _sample_channel(v.data, src, dst, order, zero_outside)
    return Volume(data, dst.spacing, dst.origin, v.kind)


def resample(v: Volume, target_spacing, mode: str = 'linear') -> Volume:
    """Resample onto a lattice with `target_spacing` covering the same world extent.

    The output has ceil(extent / target_spacing) voxels per axis and keeps the
    lower edge of the extent fixed; it may overhang the input by less than one
    output voxel, where values are clamped to the nearest edge voxel.
    """
    order = _order(v, mode)
    ts = _positive_triple(target_spacing, 'target_spacing')
    if np.allclose(ts, v.spacing, rtol=0, atol=1e-12):
        return Volume(v.data, v.spacing, v.origin, v.kind)
    extent = np.asarray(v.shape) * np.asarray(v.spacing)
    shape = grid_size(extent, ts)
    if any(n < 1 for n in shape):
        raise DegenerateGeometryError(f'resampling to {ts} yields an empty grid')
    origin = v.grid.lower_edge + np.asarray(ts) / 2.0
    return _sample(v, Grid(shape, ts, origin), order, zero_outside=False)


def crop(v: Volume, roi, mode: str = 'linear') -> Volume:
    """Sample `v` over `roi` at `roi.target_spacing`; outside `v` is 0."""
    order = _order(v, mode)
    grid = v.grid
    if np.any(roi.upper <= grid.lower_edge) or np.any(roi.lower >= grid.upper_edge):
        raise EmptyRoiError(f'roi [{roi.lower}, {roi.upper}] does not intersect the volume extent '
                            f'[{grid.lower_edge}, {grid.upper_edge}]')
    return _sample(v, roi.grid, order, zero_outside=True)


def paste_into_reference(sub: Volume, reference: GridLike) -> Volume:
    """Place `sub` on the reference grid, zero-padding everywhere outside `sub`."""
    order = 0 if sub.kind == 'label' else 1
    return _sample(sub, as_grid(reference), order, zero_outside=True)


def rescale_intensity(v: Volume, shift: float = 0.0, scale: float = 1.0) -> Volume:
    """Linear intensity rescale (x - shift) / scale."""
    if scale == 0:
        raise InvalidArgumentError('intensity scale must be non-zero')
    data = (v.data.astype(np.float32) - np.float32(shift)) / np.float32(scale)
    return Volume(data, v.spacing, v.origin, 'image')


_DESCRIP_PREFIX = 'skullengine kind='
# NIfTI header extension holding the float64 geometry; pixdim and the sform are float32
_GEOMETRY_KEY = 'skullengine_geometry'


def _affine(spacing: Sequence[float], origin: Sequence[float]) -> np.ndarray:
    affine = np.diag([*spacing, 1.0])
    affine[:3, 3] = origin
    return affine


def write_volume(v: Volume, path):
    """Write a 3D volume as NIfTI-1 (.nii or .nii.gz).

    The exact spacing and origin ride along in a comment extension, so a
    volume read back by `read_volume` has bit-identical geometry.
    """
    path = Path(path)
    if v.data.ndim != 3:
        raise InvalidArgumentError('only 3D volumes can be written to NIfTI')
    if v.kind == 'label':
        dtype = np.uint8 if v.data.max(initial=0) <= np.iinfo(np.uint8).max else np.int16
    else:
        dtype = np.float32
    img = nib.Nifti1Image(np.asarray(v.data, dtype=dtype), _affine(v.spacing, v.origin))
    img.header.set_xyzt_units('mm')
    img.header['descrip'] = f'{_DESCRIP_PREFIX}{v.kind}'.encode('ascii')
    geometry = {_GEOMETRY_KEY: {'spacing': list(v.spacing), 'origin': list(v.origin)}}
    img.header.extensions.append(nib.nifti1.Nifti1Extension('comment', json.dumps(geometry).encode('ascii')))
    img.set_qform(img.affine, code=1)
    img.set_sform(img.affine, code=1)
    path.parent.mkdir(parents=True, exist_ok=True)
    nib.save(img, str(path))


def _kind_from_header(header) -> str:
    """Kind stamped by `write_volume`; anything else is read as an image."""
    descrip = header['descrip'].item()
    if isinstance(descrip, bytes):
        descrip = descrip.decode('ascii', 'ignore')
    descrip = descrip.strip('\x00 ')
    if descrip.startswith(_DESCRIP_PREFIX):
        kind = descrip[len(_DESCRIP_PREFIX):]
        if kind in KINDS:
            return kind
    return 'image'


def _stored_geometry(header, spacing, origin):
    """Full-precision (spacing, origin) from the extension when it agrees with the affine."""
    for ext in header.extensions:
        if ext.get_code() != 6:
            continue
        content = ext.get_content()
        if isinstance(content, bytes):
            content = content.decode('ascii', 'ignore')
        try:
            stored = json.loads(content.strip('\x00 '))[_GEOMETRY_KEY]
            s, o = _triple(stored['spacing'], 'spacing'), _triple(stored['origin'], 'origin')
        except (ValueError, KeyError, TypeError, InvalidArgumentError):
            continue
        # an edited affine wins over a stale extension
        if np.allclose(s, spacing, rtol=1e-5, atol=1e-6) and np.allclose(o, origin, rtol=1e-5, atol=1e-4):
            return s, o
    return spacing, origin


def read_volume(path, kind: Optional[str] = None) -> Volume:
    """Read an axis-aligned NIfTI-1 volume.

    `kind` overrides the stamped kind; pass 'label' for masks that came from
    other tools. Unstamped files are images whatever their dtype.
    """
    path = Path(path)
    if kind is not None and kind not in KINDS:
        raise InvalidArgumentError(f'unknown volume kind {kind!r}')
    if not path.exists():
        raise FileNotFoundError(f'volume not found: {path}')
    try:
        img = nib.load(str(path))
        data = np.asanyarray(img.dataobj)
    except Exception as e:
        raise VolumeFormatError(f'cannot read NIfTI file {path}: {e}') from e
    if data.ndim != 3:
        raise VolumeFormatError(f'{path}: expected a 3D image, got shape {data.shape}')
    affine = np.asarray(img.affine, dtype=np.float64)
    linear = affine[:3, :3]
    if np.any(np.abs(linear - np.diag(np.diag(linear))) > 1e-6) or np.any(np.diag(linear) <= 0):
        raise VolumeFormatError(f'{path}: only axis-aligned grids with positive axis directions are supported')
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    origin = tuple(float(o) for o in affine[:3, 3])
    spacing, origin = _stored_geometry(img.header, spacing, origin)
    kind = kind or _kind_from_header(img.header)
    if kind == 'probability':
        data = np.clip(data, 0.0, 1.0)
    try:
        return Volume(np.array(data), spacing, origin, kind)
    except InvalidArgumentError as e:
        raise VolumeFormatError(f'{path}: not a valid {kind} volume: {e}') from e
