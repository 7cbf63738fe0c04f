from pathlib import Path

import numpy as np
import pytest
import yaml

from templar import synth
from templar.cli import main

SMALL_CONFIG = {
    "seed": 3,
    "policy": "setup1",
    "net": {"input_shape": [100, 100, 3], "layers": ["conv 4 5 5 0", "relu", "maxpool 4 4", "fc 16"]},
    "train": {"epochs": 3, "embed_dim": 8, "triplets_per_epoch": 400, "batch_size": 32, "learning_rate": 0.1},
    "landmarks": {"n_stages": 2, "patch_radius": 3},
}


def run_pipeline(data: Path, out: Path, config: Path, splits: int = 2, extra=()):
    """align -> init-weights -> extract -> train-embedding -> eval; returns the list of exit codes."""
    common = ["--config", str(config), *extra]
    codes = [
        main(["align", "--protocol", str(data / "protocol.csv"), "--images", str(data / "images"),
              "--out", str(out), *common]),
        main(["init-weights", "--out", str(out), *common]),
        main(["extract", "--store", str(out / "aligned.tmpl"), "--weights", str(out / "weights.tmpl"),
              "--out", str(out), *common]),
        main(["train-embedding", "--store", str(out / "descriptors.tmpl"),
              "--protocol", str(data / "split1" / "train.csv"), "--out", str(out), *common]),
        main(["eval", "--protocol", str(data), "--splits", str(splits), "--store", str(out / "descriptors.tmpl"),
              "--embedding", str(out / "embedding.tmpl"), "--out", str(out / "eval"), *common]),
    ]
    return codes


@pytest.fixture(scope="session")
def face_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("faces")
    synth.write_face_dataset(root, np.random.default_rng(0), n_subjects=6, media_per_subject=4, n_splits=2)
    return root


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(SMALL_CONFIG))
    return path


ACCEPTANCE: list = []


def record_criterion(number: int, name: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
