import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_clip():
    """60-frame synthetic speaker, converted to a training clip."""
    from talkface.data import SpeakerClip
    from talkface.synthetic import SyntheticSpeakerSpec, make_clip

    return SpeakerClip.from_synthetic(make_clip(SyntheticSpeakerSpec(seed=3, duration_frames=60)))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
