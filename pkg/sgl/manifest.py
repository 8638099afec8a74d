"""manifest.py

Every run directory carries a ``manifest.json`` listing the configuration, the
files the run wrote, its seeds, the wall-clock time and the library versions.

"""


import json
import logging
import os
import time

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy

from sgl import __version__
from sgl.errors import ManifestError


logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    """The record of one run.

    Parameters
    ------------
    config: dict
        the resolved configuration.
    artifacts: list(str)
        the written files, relative to the run directory, each listed once.
    seeds: dict
        the seeds by run label.
    wall_clock: float
        the elapsed seconds.
    versions: dict
        library versions.
    """

    config: dict
    artifacts: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    versions: dict = field(
        default_factory=lambda: {"sgl": __version__, "numpy": np.__version__, "scipy": scipy.__version__}
    )
    started: float = field(default_factory=time.time)

    def add(self, out_dir: str, filepath: str):
        """Lists a written file; listing one twice is an error."""
        relative = os.path.relpath(filepath, out_dir)

        if relative in self.artifacts:
            raise ManifestError(f"Artifact listed twice: {relative}")

        self.artifacts.append(relative)

        return filepath

    def write(self, out_dir: str):
        self.wall_clock = time.time() - self.started
        filepath = os.path.join(out_dir, MANIFEST_NAME)

        with open(filepath, "w", encoding="utf-8") as file:
            json.dump(asdict(self), file, indent=2)

        logger.info("Successfully wrote manifest output: %s", filepath)

        return filepath

    @classmethod
    def load(cls, out_dir: str):
        filepath = os.path.join(out_dir, MANIFEST_NAME)

        if not os.path.isfile(filepath):
            raise ManifestError(f"No manifest in {out_dir}")

        with open(filepath, "r", encoding="utf-8") as file:
            data = json.load(file)

        manifest = cls(**data)

        missing = [path for path in manifest.artifacts if not os.path.isfile(os.path.join(out_dir, path))]

        if missing:
            raise ManifestError(f"Manifest in {out_dir} lists missing files: {missing}")

        return manifest
