import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .annotations import load_via, split_by_grid
from .config import PipelineConfig
from .detect import BlobParams
from .errors import ValidationError
from .evaluate import BlockResult, Report, block_count, build_report, rcp, read_report_csv, write_report_csv
from .features import TrainingSet, build_dataset, read_features_csv, write_features_csv
from .raster import build_grid, extract_patch, iter_patches, patch_id, read_grid_manifest, read_raster, \
    write_grid_manifest, write_raster
from .regress import ModelBundle, load_bundle, predict_many, select_best, select_by_cross_validation, \
    train_bundle
from .storage import ArtifactStore
from .synth import SynthBlock, SynthParams, generate_suite, write_block

logger = logging.getLogger(__name__)


def map_patches(func: Callable, items: Sequence, jobs: Optional[int] = None) -> List:
    """
    Apply ``func`` to every item, on a thread pool when jobs != 1. Results
    come back in input order whatever the number of workers.
    """
    items = list(items)
    workers = jobs if jobs is not None else (os.cpu_count() or 1)
    if workers <= 1 or len(items) < 2:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(func, items))


def blob_params(config: PipelineConfig) -> BlobParams:
    """Threshold detector settings taken from the configuration."""
    return BlobParams(config.blob_channel, config.blob_threshold, config.blob_min_area,
                      config.blob_max_area, config.blob_connectivity)


@dataclass(frozen=True)
class CountResult:
    block_id: str
    model_kind: str
    local_count: int
    corrected_count: int
    patch_predictions: Tuple[float, ...] = ()
    ground_truth: Optional[int] = None

    @property
    def local_rcp(self) -> Optional[float]:
        return None if self.ground_truth is None else rcp(self.local_count, self.ground_truth)

    @property
    def corrected_rcp(self) -> Optional[float]:
        return None if self.ground_truth is None else rcp(self.corrected_count, self.ground_truth)

    def to_block_result(self) -> BlockResult:
        if self.ground_truth is None:
            raise ValidationError("a block result needs the ground-truth count")
        return BlockResult(self.block_id, self.ground_truth, self.local_count,
                           ((self.model_kind, self.corrected_count),))


@dataclass(frozen=True)
class ExperimentResult:
    report: Report
    selected: str
    validation_scores: Tuple[Tuple[str, float], ...]
    bundles: Tuple[ModelBundle, ...] = ()


def block_dataset(block: SynthBlock, config: PipelineConfig, mapper: Callable = None) -> TrainingSet:
    """Training samples of a synthetic block on the configured patch grid."""
    grid = build_grid(block.truth.image_width, block.truth.image_height,
                      config.patch_size, config.include_partial)
    return build_dataset(split_by_grid(block.truth, grid, block.block_id),
                         split_by_grid(block.detections, grid, block.block_id),
                         grid, block.block_id, mapper)


def run_transfer_experiment(blocks: Sequence[SynthBlock], train_index: int = 0,
                            models: Sequence[str] = None, config: PipelineConfig = None,
                            mapper: Callable = None) -> ExperimentResult:
    """
    Train every model kind on one block, select one kind by its RCP on
    held-out folds of that block, then count every other block with all of
    the fitted models.
    """
    config = config or PipelineConfig()
    models = tuple(models or config.models)
    if len(set(models)) != len(models):
        raise ValidationError(f"model kinds repeated in {models}")
    if len(blocks) < 2:
        raise ValidationError("an experiment needs a training block and at least one evaluation block")
    if not 0 <= train_index < len(blocks):
        raise ValidationError(f"train_index {train_index} outside a suite of {len(blocks)} blocks")

    datasets = [block_dataset(block, config, mapper) for block in blocks]
    train = datasets[train_index]
    train_id = blocks[train_index].block_id
    selected, scores = select_by_cross_validation(models, train, config)
    bundles = [train_bundle(kind, train, config, block_id=train_id) for kind in models]

    rows = []
    for index, (block, dataset) in enumerate(zip(blocks, datasets)):
        if index == train_index:
            continue
        X, y = dataset.to_arrays()
        corrected = tuple((b.kind, block_count(predict_many(b, X).tolist())) for b in bundles)
        rows.append(BlockResult(block.block_id, block_count(y.tolist()), int(X[:, 0].sum()), corrected))
        logger.debug("%s counted with %d models", block.block_id, len(bundles))
    report = build_report(rows)
    logger.info("trained on %s, selected %s, evaluated %d blocks", train_id, selected, len(rows))
    return ExperimentResult(report, selected, tuple(scores), tuple(bundles))


class CountingPipeline:
    """
    Orchestrates the file-level steps: tiling, feature extraction, model
    fitting and selection, counting new blocks and synthetic suites.
    """

    def __init__(self, config: PipelineConfig = None):
        self.config = config or PipelineConfig()

    def map(self, func: Callable, items: Sequence) -> List:
        return map_patches(func, items, self.config.jobs)

    def tile(self, image_path: str, out_dir: str, block_id: str = None) -> Tuple[str, int]:
        """Cut an image into patch PNGs plus a grid manifest; returns (manifest path, patch count)."""
        raster = read_raster(image_path)
        block_id = block_id or os.path.splitext(os.path.basename(image_path))[0]
        grid = build_grid(raster.width, raster.height, self.config.patch_size, self.config.include_partial)
        os.makedirs(out_dir, exist_ok=True)

        def write_patch(bounds):
            pid = patch_id(block_id, bounds.row, bounds.col)
            name = f"{pid}.png"
            write_raster(extract_patch(raster, bounds), os.path.join(out_dir, name))
            return pid, name

        files = dict(self.map(write_patch, list(iter_patches(grid))))
        manifest = os.path.join(out_dir, f"{block_id}_grid.json")
        write_grid_manifest(grid, block_id, manifest, files)
        logger.info("tiled %s into %d patches (%d x %d)", image_path, len(grid), grid.rows, grid.cols)
        return manifest, len(grid)

    def build_features(self, det_path: str, manifest_path: str, gt_path: str = None) -> TrainingSet:
        """Feature samples of one block; with ground truth they carry targets."""
        block_id, grid = read_grid_manifest(manifest_path)
        detections = load_via(det_path, grid.source_width, grid.source_height,
                              score_threshold=self.config.score_threshold)
        truth = None
        if gt_path is not None:
            truth = split_by_grid(load_via(gt_path, grid.source_width, grid.source_height, score_threshold=None),
                                  grid, block_id)
        return build_dataset(truth, split_by_grid(detections, grid, block_id), grid, block_id, self.map)

    def features(self, det_path: str, manifest_path: str, out_csv: str, gt_path: str = None) -> TrainingSet:
        training_set = self.build_features(det_path, manifest_path, gt_path)
        write_features_csv(training_set, out_csv)
        logger.info("wrote %d feature rows to %s", len(training_set), out_csv)
        return training_set

    def fit(self, features_csv: str, out_dir: str, models: Sequence[str] = None) -> Dict[str, str]:
        """Fit one bundle per model kind; returns kind -> bundle path."""
        training_set = read_features_csv(features_csv)
        store = ArtifactStore(out_dir)
        paths = {}
        for kind in models or self.config.models:
            bundle = train_bundle(kind, training_set, self.config)
            paths[kind] = store.save_bundle(bundle)
        return paths

    def select(self, bundle_paths: Sequence[str], validation_csv: str) -> Tuple[str, List[Tuple[str, float]]]:
        """Path of the bundle with the best validation RCP, plus (kind, RCP) per bundle."""
        if not bundle_paths:
            raise ValidationError("no bundles given")
        bundles = [load_bundle(path) for path in bundle_paths]
        best, scores = select_best(bundles, read_features_csv(validation_csv))
        return bundle_paths[bundles.index(best)], scores

    def count(self, det_path: str, manifest_path: str, bundle_path: str,
              ground_truth: int = None, report_path: str = None) -> CountResult:
        """Local and corrected count of a new block; the report CSV needs the ground truth."""
        bundle = load_bundle(bundle_path)
        samples = self.build_features(det_path, manifest_path)
        X = samples.feature_matrix()
        predictions = predict_many(bundle, X) if len(samples) else []
        block_id = samples.samples[0].block_id if len(samples) else read_grid_manifest(manifest_path)[0]
        result = CountResult(block_id, bundle.kind, int(X[:, 0].sum()), block_count(list(predictions)),
                             tuple(float(p) for p in predictions), ground_truth)
        if report_path is not None:
            write_report_csv(build_report([result.to_block_result()]), report_path)
        return result

    def synth(self, out_dir: str, params: SynthParams = None, n_blocks: int = 1,
              seed: int = None) -> List[Dict[str, str]]:
        """Generate and write a synthetic suite; returns the file paths of every block."""
        seed = self.config.seed if seed is None else seed
        blocks = generate_suite(n_blocks, params, seed, self.map, blob_params(self.config))
        return [write_block(block, out_dir) for block in blocks]

    def report(self, counts_csv: str, out_csv: str = None) -> Report:
        report = read_report_csv(counts_csv)
        if out_csv is not None:
            write_report_csv(report, out_csv)
        return report

    def experiment(self, n_blocks: int, params: SynthParams = None, train_index: int = 0,
                   seed: int = None, models: Sequence[str] = None) -> ExperimentResult:
        seed = self.config.seed if seed is None else seed
        blocks = generate_suite(n_blocks, params, seed, self.map, blob_params(self.config))
        return run_transfer_experiment(blocks, train_index, models, self.config, self.map)
