"""
Orthomosaic rasters and their decomposition into a non-overlapping patch grid.
"""

import json
import logging
import math
from dataclasses import dataclass
from typing import Iterator, List, Optional

import numpy as np
from PIL import Image

from .errors import ParseError, PatchIndexError, UnsupportedVersionError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_PATCH_SIZE = 608
MANIFEST_VERSION = "1"


@dataclass(frozen=True, eq=False)
class Raster:
    """
    An 8-bit image held as a (height, width, channels) array.

    ``valid_mask`` is an optional (height, width) boolean array; False marks
    nodata padding.
    """
    pixels: np.ndarray
    valid_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim == 2:
            pixels = pixels[:, :, np.newaxis]
        if pixels.ndim != 3 or pixels.shape[2] not in (1, 3):
            raise ValidationError(f"raster must have 1 or 3 channels, got shape {pixels.shape}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ValidationError(f"raster dimensions must be >= 1, got {pixels.shape[1]}x{pixels.shape[0]}")
        if pixels.dtype != np.uint8:
            raise ValidationError(f"raster samples must be 8-bit, got {pixels.dtype}")
        pixels = np.array(pixels, copy=True)
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

        if self.valid_mask is not None:
            mask = np.array(self.valid_mask, dtype=bool, copy=True)
            if mask.shape != pixels.shape[:2]:
                raise ValidationError(
                    f"valid_mask shape {mask.shape} does not match raster {pixels.shape[:2]}")
            mask.setflags(write=False)
            object.__setattr__(self, "valid_mask", mask)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        if not np.array_equal(self.pixels, other.pixels):
            return False
        if (self.valid_mask is None) != (other.valid_mask is None):
            return False
        return self.valid_mask is None or np.array_equal(self.valid_mask, other.valid_mask)


@dataclass(frozen=True)
class PatchBounds:
    """Pixel window of one patch, clipped to the source extent."""
    x0: int
    y0: int
    width: int
    height: int
    row: int
    col: int

    @property
    def x1(self) -> int:
        return self.x0 + self.width

    @property
    def y1(self) -> int:
        return self.y0 + self.height

    @property
    def area(self) -> int:
        return self.width * self.height

    def to_dict(self) -> dict:
        return {
            'row': self.row, 'col': self.col,
            'x0': self.x0, 'y0': self.y0,
            'width': self.width, 'height': self.height,
        }


@dataclass(frozen=True)
class PatchGrid:
    """Deterministic row-major decomposition of a source raster into patches."""
    source_width: int
    source_height: int
    patch_size: int
    rows: int
    cols: int
    include_partial: bool

    def __len__(self) -> int:
        return self.rows * self.cols

    def __iter__(self) -> Iterator[PatchBounds]:
        return iter_patches(self)

    def patch_index(self, row: int, col: int) -> int:
        return row * self.cols + col

    def locate(self, x: float, y: float) -> Optional[tuple]:
        """(row, col) of the patch containing point (x, y), or None if outside the grid."""
        col = int(math.floor(x / self.patch_size))
        row = int(math.floor(y / self.patch_size))
        if 0 <= row < self.rows and 0 <= col < self.cols:
            bounds = patch_bounds(self, row, col)
            if bounds.x0 <= x < bounds.x1 and bounds.y0 <= y < bounds.y1:
                return row, col
        return None

    def to_dict(self) -> dict:
        return {
            'source_width': self.source_width,
            'source_height': self.source_height,
            'patch_size': self.patch_size,
            'include_partial': self.include_partial,
            'rows': self.rows,
            'cols': self.cols,
        }


def build_grid(source_width: int, source_height: int,
               patch_size: int = DEFAULT_PATCH_SIZE, include_partial: bool = True) -> PatchGrid:
    """
    Split a source extent into patch_size x patch_size cells.

    With include_partial the clipped remainder cells on the right and bottom
    edges are kept (ceil); otherwise they are dropped (floor).
    """
    for name, value in (("source_width", source_width), ("source_height", source_height),
                        ("patch_size", patch_size)):
        if int(value) != value or value < 1:
            raise ValidationError(f"{name} must be a positive integer, got {value}")
    if include_partial:
        cols = -(-source_width // patch_size)
        rows = -(-source_height // patch_size)
    else:
        cols = source_width // patch_size
        rows = source_height // patch_size
    logger.debug("grid %dx%d px, patch %d -> %d rows x %d cols",
                 source_width, source_height, patch_size, rows, cols)
    return PatchGrid(int(source_width), int(source_height), int(patch_size),
                     int(rows), int(cols), bool(include_partial))


def patch_bounds(grid: PatchGrid, row: int, col: int) -> PatchBounds:
    """Bounds of patch (row, col), clipped to the source extent."""
    if not (0 <= row < grid.rows and 0 <= col < grid.cols):
        raise PatchIndexError(f"patch ({row}, {col}) outside grid of {grid.rows} rows x {grid.cols} cols")
    x0 = col * grid.patch_size
    y0 = row * grid.patch_size
    width = min(grid.patch_size, grid.source_width - x0)
    height = min(grid.patch_size, grid.source_height - y0)
    return PatchBounds(x0=x0, y0=y0, width=width, height=height, row=row, col=col)


def iter_patches(grid: PatchGrid) -> Iterator[PatchBounds]:
    """Yield every patch in row-major order."""
    for row in range(grid.rows):
        for col in range(grid.cols):
            yield patch_bounds(grid, row, col)


def patch_id(block_id: str, row: int, col: int) -> str:
    return f"{block_id}_r{row}_c{col}"


def extract_patch(raster: Raster, bounds: PatchBounds) -> Raster:
    """Copy the pixels (and valid mask) under ``bounds`` into a new raster."""
    if (bounds.x0 < 0 or bounds.y0 < 0 or bounds.width < 1 or bounds.height < 1
            or bounds.x1 > raster.width or bounds.y1 > raster.height):
        raise ValidationError(
            f"bounds x={bounds.x0}..{bounds.x1} y={bounds.y0}..{bounds.y1} "
            f"exceed raster {raster.width}x{raster.height}")
    window = (slice(bounds.y0, bounds.y1), slice(bounds.x0, bounds.x1))
    mask = None if raster.valid_mask is None else raster.valid_mask[window]
    return Raster(raster.pixels[window], mask)


def reassemble(grid: PatchGrid, patches: List[Raster]) -> Raster:
    """Stitch row-major patches back into one raster covering the grid."""
    if len(patches) != len(grid):
        raise ValidationError(f"expected {len(grid)} patches, got {len(patches)}")
    if not patches:
        raise ValidationError("cannot reassemble an empty grid")
    last = patch_bounds(grid, grid.rows - 1, grid.cols - 1)
    channels = patches[0].channels
    pixels = np.zeros((last.y1, last.x1, channels), dtype=np.uint8)
    has_mask = patches[0].valid_mask is not None
    mask = np.zeros((last.y1, last.x1), dtype=bool) if has_mask else None
    for bounds, patch in zip(iter_patches(grid), patches):
        if (patch.width, patch.height) != (bounds.width, bounds.height):
            raise ValidationError(
                f"patch ({bounds.row}, {bounds.col}) is {patch.width}x{patch.height}, "
                f"expected {bounds.width}x{bounds.height}")
        pixels[bounds.y0:bounds.y1, bounds.x0:bounds.x1] = patch.pixels
        if has_mask:
            mask[bounds.y0:bounds.y1, bounds.x0:bounds.x1] = patch.valid_mask
    return Raster(pixels, mask)


def read_raster(path) -> Raster:
    """
    Load an 8-bit PNG or TIFF.

    An alpha channel becomes the valid mask (alpha 0 = nodata); georeferencing
    tags are ignored.
    """
    try:
        with Image.open(path) as image:
            image.load()
            mode = image.mode
            if mode in ("RGBA", "LA"):
                alpha = np.asarray(image.getchannel("A"))
                base = image.convert("RGB" if mode == "RGBA" else "L")
                return Raster(np.asarray(base), alpha > 0)
            if mode not in ("RGB", "L"):
                logger.info("converting %s raster %s to RGB", mode, path)
                image = image.convert("RGB")
            return Raster(np.asarray(image))
    except FileNotFoundError as e:
        raise ValidationError(f"raster not found: {path}") from e
    except OSError as e:
        raise ParseError(f"cannot read raster: {e}", source=str(path)) from e


def write_raster(raster: Raster, path):
    """Write a raster as PNG (or TIFF by extension); the valid mask becomes alpha."""
    pixels = raster.pixels
    if raster.channels == 1:
        pixels = pixels[:, :, 0]
    if raster.valid_mask is not None:
        alpha = np.where(raster.valid_mask, 255, 0).astype(np.uint8)
        # (h, w, 2) is read back as LA, (h, w, 4) as RGBA
        image = Image.fromarray(np.ascontiguousarray(np.dstack([pixels, alpha])))
    else:
        image = Image.fromarray(np.ascontiguousarray(pixels))
    image.save(path)


def write_grid_manifest(grid: PatchGrid, block_id: str, path, files: dict = None):
    """Write the grid and its patch list as JSON; ``files`` maps patch id to file name."""
    patches = []
    for bounds in iter_patches(grid):
        entry = {'id': patch_id(block_id, bounds.row, bounds.col)}
        entry.update(bounds.to_dict())
        if files and entry['id'] in files:
            entry['file'] = files[entry['id']]
        patches.append(entry)
    data = {'format_version': MANIFEST_VERSION, 'block_id': block_id}
    data.update(grid.to_dict())
    data['patches'] = patches
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2)


def read_grid_manifest(path) -> tuple:
    """Read a grid manifest; returns (block_id, PatchGrid)."""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ValidationError(f"grid manifest not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, source=str(path), line=e.lineno) from e
    except UnicodeDecodeError as e:
        raise ParseError(f"not UTF-8 text: {e.reason}", source=str(path)) from e
    version = str(data.get('format_version', ''))
    if version != MANIFEST_VERSION:
        raise UnsupportedVersionError(f"grid manifest {path} has unsupported format_version {version!r}")
    try:
        grid = build_grid(data['source_width'], data['source_height'],
                          data['patch_size'], data['include_partial'])
        block_id = str(data['block_id'])
    except KeyError as e:
        raise ParseError("missing key", source=str(path), field=e.args[0]) from e
    if (grid.rows, grid.cols) != (data.get('rows'), data.get('cols')):
        raise ParseError(f"rows/cols {data.get('rows')}x{data.get('cols')} disagree with the grid extent",
                         source=str(path))
    return block_id, grid
