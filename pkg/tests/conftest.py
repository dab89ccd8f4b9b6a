import numpy as np
import pytest

from fedarks import kernels
from fedarks.harness import ExperimentConfig, build_config
from fedarks.model import ModelConfig
from fedarks.synthdata import FederationConfig

ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request):
    return kernels.available_backends()[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def tiny_fed_cfg():
    return FederationConfig(num_domains=3, identities_per_domain=4, samples_per_identity=4,
                            image_height=6, image_width=4, seed=3, latent_dim=3)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(image_height=6, image_width=4, hidden_dim=5, feat_dim=4)


@pytest.fixture
def small_experiment():
    """A few-second experiment on a small federation."""
    def make(**overrides) -> ExperimentConfig:
        values = {"num_domains": 3, "identities_per_domain": 6, "samples_per_identity": 4,
                  "image_height": 12, "image_width": 6, "hidden_dim": 8, "feat_dim": 6,
                  "rounds": 6, "held_out": 2, "seed": 5, "eval_interval": 3}
        values.update(overrides)
        return build_config({k: str(v) for k, v in values.items()})
    return make


def record_acceptance(key: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[key] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")
