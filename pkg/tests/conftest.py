import pytest

from promptpatch.data import load_dataset, synthesize_dataset
from promptpatch.optimizer import build_pipeline

PROMPT = "a picture full of leaf-like green colors"


@pytest.fixture(scope="session")
def toy_dataset_path(tmp_path_factory):
    root = tmp_path_factory.mktemp("toydata")
    return synthesize_dataset(root, images=8, seed=7)


@pytest.fixture(scope="session")
def toy_dataset(toy_dataset_path):
    return load_dataset(toy_dataset_path)


@pytest.fixture(scope="session")
def pipeline():
    return build_pipeline(seed=0)
