from __future__ import annotations

import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from mvseg.cli import main
from mvseg.meanshift import mean_shift
from mvseg.mtpnet import PredictionField
from mvseg.scene_io import PointCloud

ACCEPTANCE_LINES: list[str] = []

ROOT = Path(__file__).resolve().parents[1]
SYNTH_CONFIG = ROOT / "configs" / "synthetic.yaml"


def random_cloud(rng, n, spread=1.0, normals=True) -> PointCloud:
    nrm = rng.normal(size=(n, 3)) if normals else None
    return PointCloud(rng.uniform(0, spread, (n, 3)), rng.uniform(0, 1, (n, 3)), nrm)


def random_pred(rng, n, S, d) -> PredictionField:
    return PredictionField(rng.dirichlet(np.ones(S), n), rng.normal(size=(n, d)))


def four_point_fixture(seed):
    """4 points, 2 classes, embeddings in two well-separated groups of 2."""
    rng = np.random.default_rng(seed)
    loc = rng.uniform(0, 0.2, (4, 3))
    col = rng.uniform(0, 1, (4, 3))
    nrm = rng.normal(size=(4, 3))
    probs = rng.dirichlet([1, 1], 4)
    grp = np.array([0, 0, 1, 1])
    rng.shuffle(grp)
    emb = np.array([[0.0, 0.0], [3.0, 0.0]])[grp] + rng.normal(0, 0.3, (4, 2))
    return PointCloud(loc, col, nrm), PredictionField(probs, emb), mean_shift(emb, 1.5)


class SyntheticRun:
    """One synth + train on disk, with infer/eval per ablation cached."""

    def __init__(self, root: Path):
        self.root = root
        self.config = root / "synthetic.yaml"
        shutil.copy(SYNTH_CONFIG, self.config)
        self.data = root / "data"
        self.model = root / "model.bin"
        self._evals: dict[str, dict[str, float]] = {}

    def args(self, command, *extra):
        return [command, "--config", str(self.config), "--data-dir", str(self.data), "--model", str(self.model), *extra]

    def prepare(self):
        assert main(self.args("synth")) == 0
        start = time.perf_counter()
        assert main(self.args("train")) == 0
        self.train_seconds = time.perf_counter() - start

    def output(self, ablation: str) -> Path:
        return self.root / f"results_{ablation}"

    def evaluate(self, ablation: str) -> dict[str, float]:
        if ablation not in self._evals:
            out = self.output(ablation)
            assert main(self.args("infer", "--ablation", ablation, "--output-dir", str(out))) == 0
            assert main(self.args("eval", "--output-dir", str(out))) == 0
            lines = (out / "eval.txt").read_text().split()
            self._evals[ablation] = {k: float(v) for k, v in zip(lines[::2], lines[1::2])}
        return self._evals[ablation]


@pytest.fixture(scope="session")
def synthetic_run(tmp_path_factory) -> SyntheticRun:
    run = SyntheticRun(tmp_path_factory.mktemp("synthetic"))
    run.prepare()
    return run


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
