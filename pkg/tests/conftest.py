import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from dualdecode.cli import main  # noqa: E402

TINY_CONFIG = """\
# tiny end-to-end pipeline
synth.base_length = 96
synth.train_stimuli_per_subject = 20
synth.test_stimuli = 10
synth.repetitions = 2
stage1.dim = 16
stage1.layers = 1
stage1.heads = 2
stage1.decoder_dim = 16
stage1.decoder_layers = 1
stage1.decoder_heads = 2
stage1.epochs = 2
stage1.batch_size = 16
stage1.warmup_epochs = 1
stage2.epochs = 2
stage2.batch_size = 16
stage2.warmup_epochs = 1
stage2.heads = 2
baselines.kmeans_restarts = 2
baselines.linear_epochs = 20
"""

STAGES = ("synth", "pretrain", "train", "eval", "attribute", "baselines")


def only_run(out: Path) -> Path:
    runs = sorted(p for p in out.iterdir() if p.is_dir())
    assert len(runs) == 1, runs
    return runs[0]


def run_pipeline(base: Path, seed: int = 7) -> dict[str, Path]:
    """Run every CLI stage once; each stage gets its own ``--out`` so its run directory is unique."""
    base.mkdir(parents=True, exist_ok=True)
    cfg = base / "tiny.cfg"
    cfg.write_text(TINY_CONFIG)
    common = ["--config", str(cfg), "--seed", str(seed)]
    runs: dict[str, Path] = {}

    def stage(name, *extra):
        code = main([name, *common, "--out", str(base / name), *extra])
        assert code == 0, f"{name} exited with {code}"
        runs[name] = only_run(base / name)

    stage("synth")
    data = str(runs["synth"])
    stage("pretrain", "--dataset", data)
    stage("train", "--dataset", data, "--stage1", str(runs["pretrain"]))
    stage("eval", "--dataset", data, "--checkpoint", str(runs["train"]))
    stage("attribute", "--dataset", data, "--checkpoint", str(runs["train"]), "--class-id", "1")
    stage("baselines", "--dataset", data)
    return runs


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="session")
def cli_pipelines(tmp_path_factory):
    """Two independent runs of the full pipeline with the same config and seed."""
    base = tmp_path_factory.mktemp("cli")
    return run_pipeline(base / "a"), run_pipeline(base / "b")


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
