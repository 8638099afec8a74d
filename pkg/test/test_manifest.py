import json
import os

import pytest

from sgl.errors import ManifestError
from sgl.manifest import MANIFEST_NAME, RunManifest


@pytest.fixture
def run_dir(tmp_path):
    os.makedirs(os.path.join(tmp_path, "run0"))

    for name in ("summary.csv", os.path.join("run0", "trajectory.csv")):
        with open(os.path.join(tmp_path, name), "w", encoding="utf-8") as file:
            file.write("a,b\n1,2\n")

    return str(tmp_path)


@pytest.fixture
def manifest(run_dir):
    manifest = RunManifest(config={"experiment": {"seed": 3}})
    manifest.add(run_dir, os.path.join(run_dir, "summary.csv"))
    manifest.add(run_dir, os.path.join(run_dir, "run0", "trajectory.csv"))
    manifest.seeds["run0"] = {"data_seed": 1}

    return manifest


class TestRunManifest:
    def test_write_and_load(self, run_dir, manifest):
        filepath = manifest.write(run_dir)
        loaded = RunManifest.load(run_dir)

        assert filepath == os.path.join(run_dir, MANIFEST_NAME)
        assert loaded.artifacts == ["summary.csv", os.path.join("run0", "trajectory.csv")]
        assert loaded.seeds == {"run0": {"data_seed": 1}}
        assert loaded.wall_clock >= 0
        assert set(loaded.versions) == {"sgl", "numpy", "scipy"}

    def test_duplicate_artifact(self, run_dir, manifest):
        with pytest.raises(ManifestError):
            manifest.add(run_dir, os.path.join(run_dir, "summary.csv"))

    def test_no_manifest(self, run_dir):
        with pytest.raises(ManifestError):
            RunManifest.load(run_dir)

    def test_missing_artifact(self, run_dir, manifest):
        manifest.write(run_dir)
        os.remove(os.path.join(run_dir, "summary.csv"))

        with pytest.raises(ManifestError):
            RunManifest.load(run_dir)

    def test_plain_json(self, run_dir, manifest):
        with open(manifest.write(run_dir), "r", encoding="utf-8") as file:
            data = json.load(file)

        assert data["config"] == {"experiment": {"seed": 3}}
