"""
Mound counting for planting blocks.

Detections and annotations of a block are cut into a patch grid; per-patch
features (detected mound count, tree, water and debris area ratios) feed a
regressor that corrects each patch's count, and the corrected patch counts
are summed into the block total.
"""

from .config import Config, PipelineConfig
from .errors import MoundCounterError
from .pipeline import CountingPipeline
from .cli import MoundCounterCLI

__version__ = "0.1.0"


def main():
    """Main entry point for the application."""
    from .main import main as run_main
    run_main()


if __name__ == "__main__":
    main()
