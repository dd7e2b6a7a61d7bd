import json
import os
import tempfile
from collections import Counter

import pytest

from mound_counter.annotations import load_via
from mound_counter.config import PipelineConfig
from mound_counter.detect import BlobParams, MissModel
from mound_counter.errors import ValidationError
from mound_counter.evaluate import read_report_csv
from mound_counter.features import read_features_csv
from mound_counter.pipeline import (
    CountingPipeline,
    CountResult,
    blob_params,
    block_dataset,
    map_patches,
    run_transfer_experiment,
)
from mound_counter.regress import load_bundle
from mound_counter.synth import SynthParams, generate_suite

BLOCK = SynthParams(block_width=608, block_height=608, mound_density=80.0, patch_size=152,
                    miss_model=MissModel(b0=0.1, b2=0.5, b3=0.8, b4=0.4))
FAST = PipelineConfig(patch_size=152, models=("linear", "lasso", "svr"), svr_tune=False, jobs=2)


def test_map_patches_keeps_order():
    """Results come back in input order for any number of workers."""
    items = list(range(50))

    def square(k):
        return k * k

    for jobs in (None, 1, 4):
        assert map_patches(square, items, jobs) == [k * k for k in items]
    assert map_patches(square, [], 4) == []
    assert map_patches(square, [3], 4) == [9]


def test_blob_params_from_config():
    config = PipelineConfig(blob_channel=1, blob_threshold=120, blob_min_area=9, blob_connectivity=4)
    assert blob_params(config) == BlobParams(1, 120, 9, 100000, 4)
    assert blob_params(PipelineConfig()) == BlobParams()


def test_count_result():
    """RCPs need a ground truth; so does the report row."""
    result = CountResult("b", "svr", 90, 98)
    assert result.local_rcp is None and result.corrected_rcp is None
    with pytest.raises(ValidationError):
        result.to_block_result()
    known = CountResult("b", "svr", 90, 98, ground_truth=100)
    assert known.local_rcp == pytest.approx(0.9)
    assert known.corrected_rcp == pytest.approx(0.98)
    assert known.to_block_result().corrected_counts == (("svr", 98),)


def test_file_workflow():
    """Tile, extract features, fit, select and count using files only."""
    print("Testing the file workflow...")
    pipeline = CountingPipeline(FAST)
    with tempfile.TemporaryDirectory() as temp_dir:
        written = pipeline.synth(os.path.join(temp_dir, "synth"), BLOCK, n_blocks=2, seed=3)
        assert len(written) == 2
        first, second = written
        with open(first['manifest']) as f:
            gt_first = json.load(f)['gt_count']
        with open(second['manifest']) as f:
            gt_second = json.load(f)['gt_count']

        # Tile both rasters into 4 x 4 grids
        grids = []
        for k, paths in enumerate(written):
            manifest, n_patches = pipeline.tile(paths['raster'], os.path.join(temp_dir, f"tiles{k}"))
            assert n_patches == 16
            assert os.path.exists(os.path.join(temp_dir, f"tiles{k}", f"block0{k + 1}_r3_c3.png"))
            grids.append(manifest)

        # Training and validation features
        train_csv = os.path.join(temp_dir, "train.csv")
        training = pipeline.features(first['detections'], grids[0], train_csv, first['ground_truth'])
        assert len(training) == 16
        assert sum(s.target for s in training.samples) == gt_first
        reread = read_features_csv(train_csv)
        assert [s.patch_id for s in reread.samples] == [s.patch_id for s in training.samples]
        assert reread.targets().tolist() == training.targets().tolist()
        val_csv = os.path.join(temp_dir, "val.csv")
        pipeline.features(second['detections'], grids[1], val_csv, second['ground_truth'])
        print("Features written")

        # One bundle per model kind, then selection on the validation block
        bundles = pipeline.fit(train_csv, os.path.join(temp_dir, "models"))
        assert list(bundles) == ["linear", "lasso", "svr"]
        assert all(load_bundle(path).kind == kind for kind, path in bundles.items())
        best, scores = pipeline.select(list(bundles.values()), val_csv)
        assert best in bundles.values()
        assert [kind for kind, _ in scores] == ["linear", "lasso", "svr"]
        assert dict(scores)[load_bundle(best).kind] == max(v for _, v in scores)
        print("Models fitted and selected")

        # Count the validation block with and without its ground truth
        report_csv = os.path.join(temp_dir, "report.csv")
        result = pipeline.count(second['detections'], grids[1], best, gt_second, report_csv)
        detected = len(load_via(second['detections'], score_threshold=None).mounds())
        assert result.block_id == "block02"
        assert result.local_count == detected
        assert len(result.patch_predictions) == 16
        assert result.ground_truth == gt_second
        report = read_report_csv(report_csv)
        assert report.rows[0].block_id == "block02"
        assert report.rows[0].count(result.model_kind) == result.corrected_count

        blind = pipeline.count(second['detections'], grids[1], best)
        assert blind.corrected_count == result.corrected_count
        assert blind.local_rcp is None

        # The report command reads the CSV back and can rewrite it
        copy_csv = os.path.join(temp_dir, "copy.csv")
        assert pipeline.report(report_csv, copy_csv) == report
        assert read_report_csv(copy_csv) == report
        print("Block counted")


def test_select_needs_bundles():
    with tempfile.TemporaryDirectory() as temp_dir:
        with pytest.raises(ValidationError):
            CountingPipeline(FAST).select([], os.path.join(temp_dir, "val.csv"))


def test_transfer_experiment_improves_on_local_count():
    """Corrected counts on unseen blocks beat the raw detector count."""
    template = SynthParams(block_width=1216, block_height=1216, mound_density=60.0, patch_size=304,
                           miss_model=MissModel(b0=0.15, b2=0.5, b3=0.8, b4=0.4))
    config = PipelineConfig(patch_size=304, models=("linear", "svr", "lasso"), svr_tune=False)
    blocks = generate_suite(4, template, base_seed=11)
    result = run_transfer_experiment(blocks, 0, config=config)

    report = result.report
    assert [row.block_id for row in report.rows] == ["block02", "block03", "block04"]
    assert report.models == ("linear", "svr", "lasso")
    assert result.selected in report.models
    assert [kind for kind, _ in result.validation_scores] == ["linear", "svr", "lasso"]
    assert all(score <= 1.0 for _, score in result.validation_scores)
    for row, block in zip(report.rows, blocks[1:]):
        assert row.ground_truth == block.gt_count
        assert row.local_count == len(block.detections.mounds())
    assert report.overall.local_rcp < 0.95
    assert report.overall.rcp("linear") > report.overall.local_rcp
    assert report.average_precision["linear"] > report.average_precision["local"]


def test_experiment_is_deterministic():
    template = SynthParams(block_width=304, block_height=304, mound_density=80.0, patch_size=76)
    config = PipelineConfig(patch_size=76, models=("linear", "lasso"))
    first = CountingPipeline(config).experiment(3, template, train_index=1, seed=5)
    second = CountingPipeline(config.replace(jobs=1)).experiment(3, template, train_index=1, seed=5)
    assert first.report == second.report
    assert first.selected == second.selected
    assert [row.block_id for row in first.report.rows] == ["block01", "block03"]


def test_experiment_errors():
    """Test suites too small, bad training indices and repeated models."""
    template = SynthParams(block_width=152, block_height=152, mound_density=40.0, patch_size=76)
    blocks = generate_suite(2, template, base_seed=1)
    config = PipelineConfig(patch_size=76)
    with pytest.raises(ValidationError):
        run_transfer_experiment(blocks[:1], 0, ("linear",), config)
    with pytest.raises(ValidationError):
        run_transfer_experiment(blocks, 2, ("linear",), config)
    with pytest.raises(ValidationError):
        run_transfer_experiment(blocks, 0, ("linear", "linear"), config)


def test_block_dataset_targets():
    block = generate_suite(1, BLOCK, base_seed=2)[0]
    dataset = block_dataset(block, PipelineConfig(patch_size=304))
    assert len(dataset) == 4
    assert sum(s.target for s in dataset.samples) == block.gt_count
    assert sum(s.features.x1 for s in dataset.samples) == len(block.detections.mounds())


@pytest.mark.slow
def test_default_suites_select_regularized_models():
    """
    Over five default 18-block suites trained on the first block, SVR or
    lasso is picked at least as often as any other kind, and the picked
    model beats the local count on the unseen blocks.
    """
    print("Testing selection over five default suites...")
    picks = Counter()
    for seed in range(5):
        blocks = generate_suite(18, SynthParams(), base_seed=seed)
        result = run_transfer_experiment(blocks, 0, config=PipelineConfig(seed=seed))
        picks[result.selected] += 1
        precision = result.report.average_precision
        assert precision[result.selected] > precision["local"], (seed, result.selected)
        print(f"seed {seed}: selected {result.selected}")

    regularized = picks["svr"] + picks["lasso"]
    assert regularized >= picks["linear"] and regularized >= picks["mlp"], picks
    print("Suite selection verified")
