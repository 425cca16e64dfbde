import pytest
import torch

from mindgen.encoders import BootstrapConfig, bootstrap_reference_encoders
from mindgen.synthworld import DatasetConfig, Vocabulary, build_dataset

torch.set_num_threads(2)

# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_vocab():
    return Vocabulary(num_classes=2, num_colors=2, num_backgrounds=2)


@pytest.fixture(scope="session")
def tiny_refs(tiny_vocab):
    cfg = BootstrapConfig(pairs=512, holdout=128, batch_size=64, max_epochs=40)
    refs, report = bootstrap_reference_encoders(tiny_vocab, cfg, seed=5)
    assert report["holdout_image_to_text_top1"] >= cfg.target_top1
    return refs


@pytest.fixture(scope="session")
def tiny_dataset_config():
    return DatasetConfig(num_classes=2, num_colors=2, num_backgrounds=2,
                         per_class=40, subjects=1, split_ratios=(0.8, 0.1, 0.1),
                         seed=3, channels=16, timesteps=128, snr_db=10.0)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_data")
    return build_dataset(tiny_dataset_config, out)
