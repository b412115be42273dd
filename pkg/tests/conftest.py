import json
from pathlib import Path

import numpy as np
import pytest

from depois_attack import cli
from depois_attack.config import RunConfig
from depois_attack.data import SplitSpec, split_trusted, synth_digits
from depois_attack.defense import ClassifierConfig, DefenseBundle, WganConfig, train_classifier, train_wgan_critic

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
MNIST_DIR = ROOT / "data" / "mnist5k"

ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def record_criterion(name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[name] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[name]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    """Train / trusted / remainder / eval splits of a small synthetic corpus."""
    full = synth_digits(900, seed=3)
    train, evals = full.subset(range(600)), full.subset(range(600, 900))
    trusted, rest = split_trusted(train, SplitSpec(0.2, 0))
    return {"train": train, "trusted": trusted, "rest": rest, "eval": evals}


@pytest.fixture(scope="session")
def small_bundle(small_synth):
    clf, _ = train_classifier(small_synth["train"], ClassifierConfig(hidden=(32,), epochs=15), seed=0)
    cfg = WganConfig(epochs=40, batch=16, critic_hidden=(64, 32), generator_hidden=(32, 64))
    gen, critic, report = train_wgan_critic(small_synth["trusted"], clf, cfg, seed=0, holdout=small_synth["rest"])
    bundle = DefenseBundle.calibrate(clf, critic, small_synth["trusted"], 0.05, generator=gen)
    bundle.meta["critic_report"] = report
    return bundle


def run_pipeline(config_path: Path, out: Path, seed=None, commands=("train-defense", "distill", "attack-eval")):
    cfg = RunConfig.load(config_path).with_overrides(seed=seed, out=str(out))
    results = {}
    for name in commands:
        results[name] = cli.COMMANDS[name](cfg)
    return cfg, results


def load_json(path: Path):
    return json.loads(Path(path).read_text())


@pytest.fixture(scope="session")
def synth_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth_run")
    cfg, results = run_pipeline(CONFIGS / "synth.json", out)
    return {"cfg": cfg, "out": out, "results": results}


@pytest.fixture(scope="session")
def mnist_run(tmp_path_factory):
    if not (MNIST_DIR / "train-images-idx3-ubyte.gz").exists():
        pytest.fail(f"MNIST subset missing under {MNIST_DIR}; see scripts/make_mnist_subset.py")
    out = tmp_path_factory.mktemp("mnist_run")
    cfg, results = run_pipeline(CONFIGS / "mnist_subset.json", out)
    return {"cfg": cfg, "out": out, "results": results}
