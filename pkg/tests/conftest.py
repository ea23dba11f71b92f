import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture
def tiny_config():
    from spexpp.network import ModelConfig

    return ModelConfig(filter_lengths=(4, 8, 16), encoder_channels=3, tcn_blocks_per_stack=2,
                       tcn_stacks=2, tcn_channels=4, bottleneck_channels=3,
                       resnet_blocks=(4, 4), embed_dim=3, num_speakers=3, num_stages=2)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, (passed, detail) in sorted(acceptance.RESULTS.items()):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
