import hashlib
import logging
import os
from typing import Dict, List

from .errors import ValidationError
from .regress import ModelBundle, load_bundle, save_bundle

logger = logging.getLogger(__name__)

BUNDLE_SUFFIX = ".json"


class ArtifactStore:
    """
    Manages a directory of model bundles, one JSON file per bundle name.
    """

    def __init__(self, storage_dir: str = "models"):
        self.storage_dir = os.path.abspath(storage_dir)
        self.ensure_storage_dir_exists()

    def ensure_storage_dir_exists(self):
        """Create the storage directory if it doesn't exist."""
        if not os.path.exists(self.storage_dir):
            os.makedirs(self.storage_dir)

    def bundle_path(self, name: str) -> str:
        return os.path.join(self.storage_dir, self.sanitize_filename(name) + BUNDLE_SUFFIX)

    def save_bundle(self, bundle: ModelBundle, name: str = None) -> str:
        """
        Save a bundle under ``name`` (default: its model kind).

        Args:
            bundle: The fitted ModelBundle
            name: File stem inside the storage directory

        Returns:
            The path written
        """
        path = self.bundle_path(name or bundle.kind)
        save_bundle(bundle, path)
        logger.info("saved %s bundle to %s", bundle.kind, path)
        return path

    def load_bundle(self, name: str) -> ModelBundle:
        path = self.bundle_path(name)
        if not os.path.exists(path):
            raise ValidationError(f"no bundle named {name!r} in {self.storage_dir}")
        return load_bundle(path)

    def list_bundles(self) -> List[str]:
        """Bundle names in the store, sorted."""
        return sorted(f[:-len(BUNDLE_SUFFIX)] for f in os.listdir(self.storage_dir)
                      if f.endswith(BUNDLE_SUFFIX))

    def load_all(self) -> Dict[str, ModelBundle]:
        return {name: self.load_bundle(name) for name in self.list_bundles()}

    def sanitize_filename(self, name: str) -> str:
        """
        Make a bundle name safe as a file stem, truncating long names.

        Args:
            name: The bundle name

        Returns:
            A sanitized version safe for filenames
        """
        invalid_chars = '<>:"/\\|?* '
        sanitized = name
        for char in invalid_chars:
            sanitized = sanitized.replace(char, '_')
        # long names keep a hash of the original so they stay unique
        if len(sanitized) > 200:
            name_hash = hashlib.md5(name.encode()).hexdigest()[:8]
            sanitized = sanitized[:190] + "_" + name_hash
        return sanitized
