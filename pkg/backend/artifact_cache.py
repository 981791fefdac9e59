"""
Artifact cache: content-addressed storage for pipeline stage outputs
"""

import os
import shutil
import logging
from typing import Any, Dict, Optional

from backend.utils import content_hash, ensure_directory_exists, load_json_file, save_json_file

MARKER = "complete.json"


class ArtifactCache:
    """
    Stores each stage's artifacts under <cache_dir>/<stage>/<key>

    The key hashes the stage's own config payload together with the upstream
    stage key, so changing anything upstream invalidates everything below it.
    A directory counts as a hit only once its completion marker exists.
    """

    def __init__(self, config: Dict[str, Any]):
        self.config = config
        self.logger = logging.getLogger(f"{__name__}.ArtifactCache")

        app = config.get("app", {})
        self.cache_dir = app.get("cache_dir", "data/cache")
        self.enabled = app.get("cache_enabled", True)

        ensure_directory_exists(self.cache_dir)

    def key(self, stage: str, payload: Any, upstream: Optional[str] = None) -> str:
        return content_hash({"stage": stage, "payload": payload, "upstream": upstream})

    def directory(self, stage: str, key: str) -> str:
        return os.path.join(self.cache_dir, stage, key)

    def lookup(self, stage: str, key: str) -> Optional[str]:
        """Directory of a completed artifact, or None"""
        if not self.enabled:
            return None
        path = self.directory(stage, key)
        if os.path.exists(os.path.join(path, MARKER)):
            self.logger.info(f"Cache hit for {stage} ({key[:12]})")
            return path
        return None

    def prepare(self, stage: str, key: str) -> str:
        """Fresh directory for writing an artifact"""
        path = self.directory(stage, key)
        if os.path.exists(path):
            shutil.rmtree(path)
        ensure_directory_exists(path)
        return path

    def commit(self, stage: str, key: str, metadata: Optional[Dict[str, Any]] = None) -> None:
        save_json_file({"stage": stage, "key": key, **(metadata or {})}, os.path.join(self.directory(stage, key), MARKER))

    def metadata(self, stage: str, key: str) -> Dict[str, Any]:
        return load_json_file(os.path.join(self.directory(stage, key), MARKER)) or {}
