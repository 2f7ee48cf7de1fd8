import numpy as np
import pytest

from cdprompt.synthetic import CLASSES, build_fixture
from cdprompt.toy_transformer import ModelConfig, ToyTransformer


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def fixture_suite():
    """The synthetic 2-class suite on the default backbone (read-only)."""
    return build_fixture()


@pytest.fixture(scope="session")
def suite_batches(fixture_suite):
    li = {c: i for i, c in enumerate(CLASSES)}
    m = fixture_suite.model
    return m.encode(fixture_suite.train, label_index=li), m.encode(fixture_suite.test, label_index=li)


@pytest.fixture
def small_model():
    return ToyTransformer(ModelConfig(d=16, heads=2, ffn_dim=24, vocab_size=97, n_classes=3, seed=3))


def cli_pipeline(root):
    """Copy the bundled fixture into ``root`` and run the full CLI pipeline."""
    from cdprompt.cli import main

    root.mkdir(parents=True, exist_ok=True)
    assert main(["fixture", "--out", str(root)]) == 0
    config = root / "config.json"
    code = main(["run", "--config", str(config)])
    return config, code


@pytest.fixture(scope="session")
def cli_run(tmp_path_factory):
    """One full pipeline run on the bundled fixture: (config path, exit code)."""
    return cli_pipeline(tmp_path_factory.mktemp("cli") / "a")
