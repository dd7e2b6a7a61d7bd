import argparse
import sys
from dataclasses import replace

from .config import MODEL_KINDS, Config, PipelineConfig
from .errors import MoundCounterError, ValidationError
from .evaluate import format_percent, render_table, write_report_csv
from .pipeline import CountingPipeline
from .synth import SynthParams, load_params

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def parse_models(text: str) -> tuple:
    models = tuple(m.strip().lower() for m in text.split(",") if m.strip())
    unknown = [m for m in models if m not in MODEL_KINDS]
    if not models or unknown:
        raise ValidationError(f"--models takes a comma-separated subset of {','.join(MODEL_KINDS)}, got {text!r}")
    return models


class MoundCounterCLI:
    """
    Command Line Interface for the mound counting pipeline.
    """

    def __init__(self, config_path: str = None):
        self.config_path = config_path
        self.config = None
        self.pipeline = None

    def build_parser(self, defaults: PipelineConfig) -> argparse.ArgumentParser:
        """Parser whose option defaults are the effective config (file over built-in)."""
        formatter = argparse.ArgumentDefaultsHelpFormatter
        parser = argparse.ArgumentParser(prog="mound-counter", formatter_class=formatter,
                                         description="Count planting mounds with patch-level correction")
        parser.add_argument('--config-file', help='JSON configuration file')
        subparsers = parser.add_subparsers(dest='command', help='Available commands')

        common = argparse.ArgumentParser(add_help=False)
        common.add_argument('--jobs', type=int, default=defaults.jobs,
                            help='worker threads for per-patch work (None: number of processors)')
        common.add_argument('--seed', type=int, default=defaults.seed, help='base random seed')

        grid_opts = argparse.ArgumentParser(add_help=False)
        grid_opts.add_argument('--patch-size', type=int, default=defaults.patch_size, help='patch side in pixels')
        grid_opts.add_argument('--partial', action=argparse.BooleanOptionalAction, default=defaults.include_partial,
                               help='keep clipped patches on the right and bottom edges')

        # Tile command
        tile_parser = subparsers.add_parser('tile', parents=[common, grid_opts], formatter_class=formatter,
                                            help='Cut an image into patches plus a grid manifest')
        tile_parser.add_argument('image', help='PNG or TIFF image of the block')
        tile_parser.add_argument('out_dir', help='directory for patch files and the manifest')
        tile_parser.add_argument('--block-id', help='block id (default: image file stem)')

        # Features command
        features_parser = subparsers.add_parser('features', parents=[common], formatter_class=formatter,
                                                help='Build the per-patch feature CSV of a block')
        features_parser.add_argument('det', help='detections VIA JSON')
        features_parser.add_argument('grid', help='grid manifest JSON')
        features_parser.add_argument('out', help='feature CSV to write')
        features_parser.add_argument('--gt', help='ground-truth VIA JSON (adds the y column)')
        features_parser.add_argument('--score-threshold', type=float, default=defaults.score_threshold,
                                     help='drop detections scoring below this')

        # Fit command
        fit_parser = subparsers.add_parser('fit', parents=[common], formatter_class=formatter,
                                           help='Fit one model bundle per model kind')
        fit_parser.add_argument('features', help='training feature CSV')
        fit_parser.add_argument('out_dir', help='directory for the bundle files')
        fit_parser.add_argument('--models', default=",".join(defaults.models), help='comma-separated model kinds')

        # Select command
        select_parser = subparsers.add_parser('select', parents=[common], formatter_class=formatter,
                                              help='Pick the bundle with the best validation RCP')
        select_parser.add_argument('bundles', nargs='+', help='bundle JSON files')
        select_parser.add_argument('--validation', required=True, help='validation feature CSV')

        # Count command
        count_parser = subparsers.add_parser('count', parents=[common], formatter_class=formatter,
                                             help='Count the mounds of a new block')
        count_parser.add_argument('det', help='detections VIA JSON')
        count_parser.add_argument('grid', help='grid manifest JSON')
        count_parser.add_argument('bundle', help='model bundle JSON')
        count_parser.add_argument('--gt', type=int, help='ground-truth count, to report RCP')
        count_parser.add_argument('--report', help='report CSV to write (needs --gt)')
        count_parser.add_argument('--score-threshold', type=float, default=defaults.score_threshold,
                                  help='drop detections scoring below this')

        # Synth command
        synth_parser = subparsers.add_parser('synth', parents=[common], formatter_class=formatter,
                                             help='Generate a synthetic suite of blocks')
        synth_parser.add_argument('params', help='synth parameter JSON ("default" for built-in values)')
        synth_parser.add_argument('out_dir', help='output directory')
        synth_parser.add_argument('--n', type=int, default=1, help='number of blocks')

        # Report command
        report_parser = subparsers.add_parser('report', formatter_class=formatter,
                                              help='Build the results table from a block counts CSV')
        report_parser.add_argument('counts', help='CSV with block_id, ground_truth, local_count, <model>_count...')
        report_parser.add_argument('--out', help='report CSV to write')

        # Experiment command
        experiment_parser = subparsers.add_parser('experiment', parents=[common, grid_opts], formatter_class=formatter,
                                                  help='Train on one synthetic block, evaluate on the rest')
        experiment_parser.add_argument('--params', help='synth parameter JSON (default: built-in values)')
        experiment_parser.add_argument('--n', type=int, default=18, help='number of blocks in the suite')
        experiment_parser.add_argument('--train-index', type=int, default=0, help='index of the training block')
        experiment_parser.add_argument('--models', default=",".join(defaults.models),
                                       help='comma-separated model kinds')
        experiment_parser.add_argument('--out', help='report CSV to write')
        return parser

    def run(self, argv=None) -> int:
        """Run the CLI application; returns the process exit code."""
        try:
            self.config = Config(config_path=self.config_path)
            parser = self.build_parser(self.config.resolve())
            args = parser.parse_args(argv)
            if not args.command:
                parser.print_help()
                return EXIT_OK
            self.pipeline = CountingPipeline(self.resolve_config(args))
            handler = getattr(self, 'handle_' + args.command.replace('-', '_'))
            handler(args)
            return EXIT_OK
        except MoundCounterError as e:
            print(f"error: {e}", file=sys.stderr)
            return e.exit_code
        except OSError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_RUNTIME

    def resolve_config(self, args) -> PipelineConfig:
        overrides = {
            'jobs': getattr(args, 'jobs', None),
            'seed': getattr(args, 'seed', None),
            'patch_size': getattr(args, 'patch_size', None),
            'include_partial': getattr(args, 'partial', None),
            'score_threshold': getattr(args, 'score_threshold', None),
        }
        if getattr(args, 'models', None):
            overrides['models'] = parse_models(args.models)
        return self.config.resolve(**overrides)

    def handle_tile(self, args):
        """Handle the tile command."""
        manifest, n_patches = self.pipeline.tile(args.image, args.out_dir, args.block_id)
        print(f"Wrote {n_patches} patches and manifest {manifest}")

    def handle_features(self, args):
        """Handle the features command."""
        samples = self.pipeline.features(args.det, args.grid, args.out, args.gt)
        print(f"Wrote {len(samples)} feature rows to {args.out}")

    def handle_fit(self, args):
        """Handle the fit command."""
        paths = self.pipeline.fit(args.features, args.out_dir)
        for kind, path in paths.items():
            print(f"{kind}: {path}")

    def handle_select(self, args):
        """Handle the select command."""
        best, scores = self.pipeline.select(args.bundles, args.validation)
        for path, (kind, value) in zip(args.bundles, scores):
            print(f"{kind:8s} RCP {format_percent(value):>8s}  {path}")
        print(f"Selected: {best}")

    def handle_count(self, args):
        """Handle the count command."""
        if args.report and args.gt is None:
            raise ValidationError("--report needs --gt")
        result = self.pipeline.count(args.det, args.grid, args.bundle, args.gt, args.report)
        print(f"Block: {result.block_id}")
        print(f"Local count: {result.local_count}")
        print(f"Corrected count ({result.model_kind}): {result.corrected_count}")
        if result.ground_truth is not None:
            print(f"Ground truth: {result.ground_truth}")
            print(f"Local RCP: {format_percent(result.local_rcp)}")
            print(f"Corrected RCP: {format_percent(result.corrected_rcp)}")

    def _synth_params(self, path) -> SynthParams:
        if path is None or path == "default":
            return SynthParams()
        return load_params(path)

    def handle_synth(self, args):
        """Handle the synth command."""
        params = self._synth_params(args.params)
        written = self.pipeline.synth(args.out_dir, params, args.n, args.seed)
        for paths in written:
            print(paths['manifest'])

    def handle_report(self, args):
        """Handle the report command."""
        report = self.pipeline.report(args.counts, args.out)
        sys.stdout.write(render_table(report))

    def handle_experiment(self, args):
        """Handle the experiment command."""
        params = replace(self._synth_params(args.params), patch_size=self.pipeline.config.patch_size)
        result = self.pipeline.experiment(args.n, params, args.train_index, args.seed)
        sys.stdout.write(render_table(result.report))
        print(f"Selected model: {result.selected}")
        if args.out:
            write_report_csv(result.report, args.out)
