"""
Desk-scale stand-ins for the instance-segmentation stage.

``detect_blobs`` thresholds one raster channel and emits each connected
component as a mound polygon. ``degrade_detections`` removes ground-truth
mounds at random with a probability driven by the patch's coverage ratios,
reproducing the feature-correlated undercount that the regression stage
corrects.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from .annotations import AnnotatedObject, AnnotationSet, ObjectClass
from .errors import ValidationError
from .features import FeatureVector
from .raster import Raster

logger = logging.getLogger(__name__)

MAX_MISS_PROBABILITY = 0.95

EAST = (1, 0)


@dataclass(frozen=True)
class BlobParams:
    channel: int = 0
    threshold: int = 150
    min_area: int = 4
    max_area: int = 100000
    connectivity: int = 8

    def __post_init__(self):
        if not 0 <= self.threshold <= 255:
            raise ValidationError(f"threshold must be in [0, 255], got {self.threshold}")
        if not 0 < self.min_area <= self.max_area:
            raise ValidationError(f"need 0 < min_area <= max_area, got {self.min_area}, {self.max_area}")
        if self.connectivity not in (4, 8):
            raise ValidationError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.channel < 0:
            raise ValidationError(f"channel must be >= 0, got {self.channel}")


@dataclass(frozen=True)
class MissModel:
    """Per-mound miss probability p = clamp(b0 + b2*x2 + b3*x3 + b4*x4, 0, 0.95)."""
    b0: float = 0.0
    b2: float = 0.0
    b3: float = 0.0
    b4: float = 0.0

    def __post_init__(self):
        for name in ("b0", "b2", "b3", "b4"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"miss model coefficient {name} is not finite")

    @property
    def is_identity(self) -> bool:
        return self.b0 == self.b2 == self.b3 == self.b4 == 0.0

    def probability(self, features: FeatureVector) -> float:
        p = self.b0 + self.b2 * features.x2 + self.b3 * features.x3 + self.b4 * features.x4
        return min(max(p, 0.0), MAX_MISS_PROBABILITY)

    def to_dict(self) -> dict:
        return {'b0': self.b0, 'b2': self.b2, 'b3': self.b3, 'b4': self.b4}

    @classmethod
    def from_dict(cls, data: dict) -> "MissModel":
        unknown = set(data) - {'b0', 'b2', 'b3', 'b4'}
        if unknown:
            raise ValidationError(f"unknown miss model coefficients: {', '.join(sorted(unknown))}")
        return cls(**{k: float(v) for k, v in data.items()})


def label_components(mask: np.ndarray, connectivity: int = 8) -> Tuple[np.ndarray, int]:
    """Connected-component labels of a boolean mask (0 = background)."""
    structure = ndimage.generate_binary_structure(2, 2 if connectivity == 8 else 1)
    labels, count = ndimage.label(mask, structure=structure)
    return labels, int(count)


def _left(d):
    return (d[1], -d[0])


def _right(d):
    return (-d[1], d[0])


def trace_outer_boundary(labels: np.ndarray, label: int, start_row: int, start_col: int) -> List[Tuple[int, int]]:
    """
    Follow the outer boundary of one labeled component along pixel edges,
    keeping the component on the right-hand side, starting from the top-left
    corner of its top-most, left-most pixel. Vertices are pixel corners and
    only direction changes are emitted, so the polygon encloses exactly the
    component's pixels (holes filled).
    """
    height, width = labels.shape

    def inside(col, row):
        return 0 <= row < height and 0 <= col < width and labels[row, col] == label

    def cell(x, y, d, side):
        # doubled coordinates of the center of the cell beside edge (x, y) -> (x, y) + d
        cx = 2 * x + d[0] + side[0]
        cy = 2 * y + d[1] + side[1]
        return (cx - 1) // 2, (cy - 1) // 2

    def follows_boundary(x, y, d):
        return inside(*cell(x, y, d, _right(d))) and not inside(*cell(x, y, d, _left(d)))

    start = (start_col, start_row)
    vertices = [start]
    x, y = start_col + 1, start_row
    heading = EAST
    for _ in range(4 * (height + 2) * (width + 2)):
        for candidate in (_left(heading), heading, _right(heading), (-heading[0], -heading[1])):
            if follows_boundary(x, y, candidate):
                break
        else:
            raise RuntimeError(f"boundary trace of component {label} lost at ({x}, {y})")
        if (x, y) == start and candidate == EAST:
            return vertices
        if candidate != heading:
            vertices.append((x, y))
        x, y = x + candidate[0], y + candidate[1]
        heading = candidate
    raise RuntimeError(f"boundary trace of component {label} did not close")


def detect_blobs(raster: Raster, params: BlobParams = BlobParams(), image_id: str = "raster") -> AnnotationSet:
    """Emit every bright connected component within the area bounds as a mound."""
    if params.channel >= raster.channels:
        raise ValidationError(f"channel {params.channel} requested from a {raster.channels}-channel raster")
    mask = raster.pixels[:, :, params.channel] >= params.threshold
    if raster.valid_mask is not None:
        mask &= raster.valid_mask
    labels, count = label_components(mask, params.connectivity)
    areas = np.bincount(labels.ravel(), minlength=count + 1)

    objects = []
    for label, window in enumerate(ndimage.find_objects(labels), start=1):
        if window is None or not params.min_area <= areas[label] <= params.max_area:
            continue
        top = window[0].start
        row_cols = np.nonzero(labels[top, window[1]] == label)[0]
        left = window[1].start + int(row_cols[0])
        polygon = trace_outer_boundary(labels, label, top, left)
        objects.append(AnnotatedObject(ObjectClass.MOUND, tuple((float(px), float(py)) for px, py in polygon), 1.0))
    logger.debug("%s: %d components, %d kept as mounds", image_id, count, len(objects))
    return AnnotationSet(image_id, raster.width, raster.height, tuple(objects))


def degrade_detections(truth: AnnotationSet, features_context: FeatureVector,
                       miss_model: MissModel, rng_seed: int) -> AnnotationSet:
    """
    Drop each ground-truth mound independently with the miss model's
    probability for this patch; other classes pass through unchanged.
    """
    p = miss_model.probability(features_context)
    if p == 0.0:
        return truth
    rng = np.random.default_rng(rng_seed)
    kept = []
    for obj in truth.objects:
        if obj.is_mound:
            if rng.random() < p:
                continue
        kept.append(obj)
    logger.debug("%s: miss probability %.3f, kept %d of %d mounds", truth.image_id, p,
                  sum(1 for o in kept if o.is_mound), len(truth.mounds()))
    return truth.with_objects(kept)


def patch_seed(base_seed: int, patch_index: int) -> int:
    return int(base_seed) ^ int(patch_index)
