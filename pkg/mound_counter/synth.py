"""
Synthetic planting blocks with known statistics.

A block is a raster of bright mounds on dark soil, partly covered by tree,
water and debris regions, together with its ground-truth annotations and a
detection set. In the default ``degrade`` mode detections are the ground
truth with mounds removed by the miss model of each patch; the ``blob``
mode runs the threshold detector on the rendered raster instead.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field, fields, replace
from typing import List, Tuple

import numpy as np

from .annotations import AnnotatedObject, AnnotationSet, ObjectClass, clip_to_patch, save_via
from .config import derive_seed
from .detect import BlobParams, MissModel, degrade_detections, detect_blobs, patch_seed
from .errors import GenerationError, ParseError, ValidationError
from .features import compute_features
from .geometry import clip_polygon, polygon_area, rasterize_into
from .raster import DEFAULT_PATCH_SIZE, Raster, build_grid, patch_bounds, write_raster

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 10_000
COVERAGE_TOLERANCE = 0.05
MAX_TOTAL_COVERAGE = 0.9
MOUND_VERTICES = 16
DETECTION_MODES = ("degrade", "blob")
PERTURBATION = 0.3
# mound_density is expressed per 608 x 608 px, whatever the patch size
DENSITY_AREA = DEFAULT_PATCH_SIZE ** 2

SOIL = (90, 70, 50)
REGION_COLORS = {
    ObjectClass.TREE: (40, 90, 40),
    ObjectClass.WATER: (30, 50, 90),
    ObjectClass.DEBRIS: (110, 100, 80),
}
MOUND_INTENSITY = (180, 240)


def _default_miss_model() -> MissModel:
    return MissModel(b0=0.05, b2=0.5, b3=0.8, b4=0.4)


@dataclass(frozen=True)
class SynthParams:
    block_width: int = 4 * DEFAULT_PATCH_SIZE
    block_height: int = 4 * DEFAULT_PATCH_SIZE
    mound_density: float = 20.0
    mound_radius_min: float = 4.0
    mound_radius_max: float = 8.0
    tree_coverage: float = 0.10
    water_coverage: float = 0.05
    debris_coverage: float = 0.05
    miss_model: MissModel = field(default_factory=_default_miss_model)
    rng_seed: int = 0
    patch_size: int = DEFAULT_PATCH_SIZE
    detection_mode: str = "degrade"

    def __post_init__(self):
        if self.block_width < 1 or self.block_height < 1:
            raise ValidationError(f"block size must be positive, got {self.block_width}x{self.block_height}")
        if self.patch_size < 1:
            raise ValidationError(f"patch_size must be positive, got {self.patch_size}")
        if not self.mound_density >= 0:
            raise ValidationError(f"mound_density must be >= 0, got {self.mound_density}")
        if not 0 < self.mound_radius_min <= self.mound_radius_max:
            raise ValidationError(
                f"need 0 < mound_radius_min <= mound_radius_max, got {self.mound_radius_min}, {self.mound_radius_max}")
        if self.mound_density > 0 and 2 * self.mound_radius_max >= min(self.block_width, self.block_height):
            raise ValidationError("mounds do not fit in the block")
        for name, value in self.coverages():
            if not 0 <= value < 1:
                raise ValidationError(f"{name} must be in [0, 1), got {value}")
        total = sum(v for _, v in self.coverages())
        if total > MAX_TOTAL_COVERAGE:
            raise ValidationError(f"coverage fractions sum to {total:.3f}, above {MAX_TOTAL_COVERAGE}")
        if self.detection_mode not in DETECTION_MODES:
            raise ValidationError(f"detection_mode must be one of {', '.join(DETECTION_MODES)}")

    def coverages(self) -> Tuple[Tuple[str, float], ...]:
        return (("tree_coverage", self.tree_coverage), ("water_coverage", self.water_coverage),
                ("debris_coverage", self.debris_coverage))

    @property
    def expected_mounds(self) -> float:
        return self.mound_density * self.block_width * self.block_height / float(DENSITY_AREA)

    def to_dict(self) -> dict:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data['miss_model'] = self.miss_model.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SynthParams":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown synth parameters: {', '.join(unknown)}")
        data = dict(data)
        if 'miss_model' in data and not isinstance(data['miss_model'], MissModel):
            if not isinstance(data['miss_model'], dict):
                raise ValidationError("miss_model must be an object of coefficients")
            data['miss_model'] = MissModel.from_dict(data['miss_model'])
        try:
            return cls(**data)
        except TypeError as e:
            raise ValidationError(f"invalid synth parameters: {e}") from e


@dataclass(frozen=True, eq=False)
class SynthBlock:
    block_id: str
    params: SynthParams
    raster: Raster
    truth: AnnotationSet
    detections: AnnotationSet
    gt_count: int
    mound_centers: Tuple[Tuple[float, float], ...] = ()

    def __eq__(self, other):
        if not isinstance(other, SynthBlock):
            return NotImplemented
        return (self.block_id, self.params, self.truth, self.detections, self.gt_count, self.mound_centers) == \
            (other.block_id, other.params, other.truth, other.detections, other.gt_count, other.mound_centers) \
            and self.raster == other.raster


def _round_polygon(points) -> Tuple[Tuple[float, float], ...]:
    return tuple((round(float(x), 2), round(float(y), 2)) for x, y in points)


def place_mounds(params: SynthParams, rng: np.random.Generator) -> List[Tuple[float, float, float]]:
    """
    Poisson-distributed number of mounds placed by dart throwing with a
    minimum center spacing of twice the maximum radius. Returns (x, y, r).
    """
    n = int(rng.poisson(params.expected_mounds)) if params.expected_mounds > 0 else 0
    spacing = 2.0 * params.mound_radius_max
    r_max = params.mound_radius_max
    centers = np.empty((0, 2))
    mounds = []
    for k in range(n):
        for _ in range(MAX_ATTEMPTS):
            x = rng.uniform(r_max, params.block_width - r_max)
            y = rng.uniform(r_max, params.block_height - r_max)
            if len(centers) == 0 or np.min(np.hypot(centers[:, 0] - x, centers[:, 1] - y)) >= spacing:
                break
        else:
            raise GenerationError(f"could not place mound {k + 1} of {n} after {MAX_ATTEMPTS} attempts")
        radius = rng.uniform(params.mound_radius_min, params.mound_radius_max)
        centers = np.vstack([centers, (x, y)])
        mounds.append((float(x), float(y), float(radius)))
    logger.debug("placed %d mounds (expected %.1f)", n, params.expected_mounds)
    return mounds


def mound_polygon(x: float, y: float, radius: float):
    angles = np.arange(MOUND_VERTICES) * (2.0 * math.pi / MOUND_VERTICES)
    return _round_polygon(zip(x + radius * np.cos(angles), y + radius * np.sin(angles)))


def _star_polygon(rng: np.random.Generator, cx: float, cy: float, radius: float):
    k = int(rng.integers(8, 13))
    angles = (np.arange(k) + rng.uniform(-0.3, 0.3, size=k)) * (2.0 * math.pi / k)
    radii = radius * rng.uniform(0.6, 1.0, size=k)
    return _round_polygon(zip(cx + radii * np.cos(angles), cy + radii * np.sin(angles)))


def place_regions(params: SynthParams, object_class: ObjectClass, target: float,
                  rng: np.random.Generator) -> Tuple[List[AnnotatedObject], np.ndarray]:
    """
    Add star-shaped polygons of one class until its union covers at least
    ``target`` of the block without exceeding it by more than 0.05.
    """
    width, height = params.block_width, params.block_height
    union = np.zeros((height, width), dtype=bool)
    regions = []
    if target <= 0:
        return regions, union
    total = float(width * height)
    base_radius = 0.15 * min(width, height)
    covered = 0.0
    attempts = 0
    while covered < target:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise GenerationError(
                f"{object_class.value} coverage stuck at {covered:.3f} of {target:.3f} after {MAX_ATTEMPTS} attempts")
        remaining = (target + COVERAGE_TOLERANCE / 2 - covered) * total
        radius = max(2.0, min(base_radius, math.sqrt(remaining / math.pi)))
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        polygon = clip_polygon(_star_polygon(rng, cx, cy, radius), 0, 0, width, height)
        if len(polygon) < 3 or polygon_area(polygon) < 1.0:
            continue
        trial = rasterize_into(union.copy(), polygon)
        trial_covered = np.count_nonzero(trial) / total
        if trial_covered > target + COVERAGE_TOLERANCE or trial_covered == covered:
            continue
        union, covered = trial, trial_covered
        regions.append(AnnotatedObject(object_class, polygon))
    logger.debug("%s: %d regions, coverage %.3f (target %.3f)", object_class.value, len(regions), covered, target)
    return regions, union


def render_block(params: SynthParams, mounds, unions, rng: np.random.Generator) -> Raster:
    """Soil with per-pixel noise, region colors, then mounds as bright disks on top."""
    height, width = params.block_height, params.block_width
    noise = rng.integers(-10, 11, size=(height, width, 1))
    pixels = np.clip(np.asarray(SOIL)[None, None, :] + noise, 0, 255)
    for object_class, union in unions:
        pixels[union] = np.clip(np.asarray(REGION_COLORS[object_class]) + noise[union], 0, 255)
    for x, y, radius in mounds:
        c_lo, c_hi = max(0, int(x - radius) - 1), min(width, int(x + radius) + 2)
        r_lo, r_hi = max(0, int(y - radius) - 1), min(height, int(y + radius) + 2)
        cols = np.arange(c_lo, c_hi) + 0.5
        rows = np.arange(r_lo, r_hi) + 0.5
        disk = (cols[None, :] - x) ** 2 + (rows[:, None] - y) ** 2 <= radius ** 2
        intensity = int(rng.integers(MOUND_INTENSITY[0], MOUND_INTENSITY[1] + 1))
        window = pixels[r_lo:r_hi, c_lo:c_hi]
        window[disk] = (intensity, int(intensity * 0.85), int(intensity * 0.7))
    return Raster(pixels.astype(np.uint8))


def degrade_by_patch(truth: AnnotationSet, params: SynthParams, seed: int) -> AnnotationSet:
    """
    Apply the miss model patch by patch. Each mound belongs to the patch
    holding its anchor point; the patch's true coverage ratios set its miss
    probability and the patch index its sub-seed.
    """
    if params.miss_model.is_identity:
        return truth
    grid = build_grid(truth.image_width, truth.image_height, params.patch_size, include_partial=True)
    by_patch = {}
    for obj in truth.mounds():
        by_patch.setdefault(grid.locate(*obj.anchor()), []).append(obj)

    kept = set()
    for (row, col), mounds in sorted(by_patch.items()):
        bounds = patch_bounds(grid, row, col)
        context = compute_features(clip_to_patch(truth, bounds), bounds)
        patch_set = truth.with_objects(mounds)
        survivors = degrade_detections(patch_set, context, params.miss_model,
                                       patch_seed(seed, grid.patch_index(row, col)))
        kept.update(id(o) for o in survivors.objects)
    return truth.with_objects([o for o in truth.objects if not o.is_mound or id(o) in kept])


def generate_block(params: SynthParams, block_id: str = "block", blob_params: BlobParams = None) -> SynthBlock:
    """Generate one synthetic block; identical params give an identical block."""
    seed = params.rng_seed
    mounds = place_mounds(params, np.random.default_rng(derive_seed(seed, "mounds")))

    region_rng = np.random.default_rng(derive_seed(seed, "regions"))
    regions, unions = [], []
    for object_class, (_, target) in zip((ObjectClass.TREE, ObjectClass.WATER, ObjectClass.DEBRIS),
                                         params.coverages()):
        placed, union = place_regions(params, object_class, target, region_rng)
        regions.extend(placed)
        unions.append((object_class, union))

    raster = render_block(params, mounds, unions, np.random.default_rng(derive_seed(seed, "render")))
    mound_objects = [AnnotatedObject(ObjectClass.MOUND, mound_polygon(x, y, r)) for x, y, r in mounds]
    truth = AnnotationSet(block_id, params.block_width, params.block_height, tuple(mound_objects + regions))

    if params.detection_mode == "blob":
        found = detect_blobs(raster, blob_params or BlobParams(), image_id=block_id)
        detections = found.with_objects(found.objects + tuple(regions))
    else:
        detections = degrade_by_patch(truth, params, derive_seed(seed, "degrade"))

    gt_count = len(mound_objects)
    logger.info("%s: %d mounds, %d detected, %d regions", block_id, gt_count,
                len(detections.mounds()), len(regions))
    return SynthBlock(block_id, params, raster, truth, detections, gt_count,
                      tuple((x, y) for x, y, _ in mounds))


def _stratified_factors(n: int, rng: np.random.Generator) -> np.ndarray:
    """One factor from each of n equal slices of [0.7, 1.3], shuffled."""
    lo = 1.0 - PERTURBATION
    factors = lo + 2.0 * PERTURBATION * (np.arange(n) + rng.uniform(size=n)) / n
    rng.shuffle(factors)
    return factors


def suite_params(n_blocks: int, template: SynthParams, base_seed: int) -> List[SynthParams]:
    """
    Per-block parameters: density and coverages scaled by seeded factors,
    each block with its own derived seed. A single block keeps the template
    values.
    """
    if n_blocks < 1:
        raise ValidationError(f"a suite needs at least one block, got {n_blocks}")
    names = ("mound_density", "tree_coverage", "water_coverage", "debris_coverage")
    if n_blocks == 1:
        factors = {name: np.ones(1) for name in names}
    else:
        factors = {name: _stratified_factors(n_blocks, np.random.default_rng(derive_seed(base_seed, f"perturb:{name}")))
                   for name in names}
    result = []
    for i in range(n_blocks):
        values = {name: getattr(template, name) * float(factors[name][i]) for name in names}
        total = values['tree_coverage'] + values['water_coverage'] + values['debris_coverage']
        if total > MAX_TOTAL_COVERAGE:
            scale = MAX_TOTAL_COVERAGE / total
            for name in names[1:]:
                values[name] *= scale
        result.append(replace(template, rng_seed=derive_seed(base_seed, f"block:{i}"), **values))
    return result


def block_name(index: int) -> str:
    return f"block{index + 1:02d}"


def generate_suite(n_blocks: int, template: SynthParams = None, base_seed: int = 0,
                   mapper=None, blob_params: BlobParams = None) -> List[SynthBlock]:
    """
    Blocks with varied densities and coverages, deterministic in (template,
    base_seed). ``mapper(func, items)`` may generate blocks in parallel and
    must keep input order.
    """
    template = template or SynthParams()
    all_params = suite_params(n_blocks, template, base_seed)

    def make(item):
        index, params = item
        try:
            return generate_block(params, block_name(index), blob_params)
        except GenerationError as e:
            raise GenerationError(str(e), block_index=index) from e

    items = list(enumerate(all_params))
    blocks = mapper(make, items) if mapper else [make(item) for item in items]
    logger.info("generated %d blocks (base seed %d)", len(blocks), base_seed)
    return blocks


def block_files(block_id: str) -> dict:
    return {
        'raster': f"{block_id}.png",
        'ground_truth': f"{block_id}_gt.json",
        'detections': f"{block_id}_det.json",
        'manifest': f"{block_id}_manifest.json",
    }


def write_block(block: SynthBlock, out_dir) -> dict:
    """Write raster, both annotation files and the block manifest; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    names = block_files(block.block_id)
    paths = {key: os.path.join(out_dir, name) for key, name in names.items()}
    write_raster(block.raster, paths['raster'])
    save_via(block.truth, paths['ground_truth'])
    save_via(block.detections, paths['detections'])
    manifest = {
        'block_id': block.block_id,
        'seed': block.params.rng_seed,
        'params': block.params.to_dict(),
        'gt_count': block.gt_count,
        'files': {key: name for key, name in names.items() if key != 'manifest'},
    }
    with open(paths['manifest'], 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return paths


def load_params(path) -> SynthParams:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ValidationError(f"synth parameter file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    except UnicodeDecodeError as e:
        raise ParseError(f"not UTF-8 text: {e.reason}", source=str(path)) from e
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: synth parameters must be a JSON object")
    return SynthParams.from_dict(data)
