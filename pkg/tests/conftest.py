import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(2)


def tiny_config(**overrides):
    """A config small enough for fast unit tests."""
    from trireid.core import RunConfig

    base = {
        "image_height": "32",
        "image_width": "16",
        "backbone_widths": "8,16,32",
        "embed_dim": "16",
        "attention_reduction": "4",
        "epochs": "1",
        "n_train_identities": "4",
        "n_test_identities": "2",
        "samples_per_identity": "4",
        "eval_max_rank": "5",
        "sweep_etas": "0,0.5",
    }
    base.update({k: str(v) for k, v in overrides.items()})
    return RunConfig.from_mapping(base)


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory):
    """One tiny rendered dataset shared by tests that only read it."""
    from trireid.data import SyntheticSpec, generate_synthetic

    cfg = tiny_config()
    root = tmp_path_factory.mktemp("micro_data")
    index = generate_synthetic(SyntheticSpec.from_config(cfg), root)
    return cfg, index
