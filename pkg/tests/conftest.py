import numpy as np
import pytest

from mmnet.config import ModelConfig, TrainConfig

# One line per acceptance criterion, filled in by tests/test_acceptance.py
# and echoed after the run (output capture would otherwise swallow them).
acceptance_lines = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)


def tiny_model_config(**over):
    base = dict(
        image_size=32,
        backbone_channels=(4, 8, 8, 8),
        visual_channels=(8, 8, 8),
        text_global_dim=8,
        embed_dim=16,
        max_len=8,
        text_layers=1,
        text_heads=2,
        text_ffn=32,
        attnpool_heads=2,
        num_queries=2,
        decoder_layers=1,
        decoder_heads=2,
        decoder_ffn=32,
        dtype="float64",
    )
    base.update(over)
    return ModelConfig(**base)


def tiny_train_config(**over):
    base = dict(
        epochs=1,
        batch_size=2,
        lr=1e-3,
        seed=0,
        train_size=4,
        val_size=2,
        model=tiny_model_config(),
    )
    base.update(over)
    return TrainConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
