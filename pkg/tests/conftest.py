import pytest

from fewshot_adapt.pipeline import ExperimentConfig, build_source_model


@pytest.fixture(scope="session")
def default_cfg():
    return ExperimentConfig(seed=0).with_seed(0)


@pytest.fixture(scope="session")
def source_model(default_cfg):
    """Pretrained head, point cloud and vocabulary on the default scene (seed 0)."""
    return build_source_model(default_cfg)
