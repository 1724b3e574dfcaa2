import numpy as np
import pytest

from selva_lab.text import Vocabulary
from selva_lab.video import EncoderConfig, StudentEncoder
from selva_lab.world import WorldConfig, build_world, generate_scenes

TINY_WORLD = WorldConfig(frames=8, patch=2, d_patch=2, audio_len=8, d_audio=4)
TINY_ENC = EncoderConfig(frames=8, patch=2, width=2, d_patch=2, window=4, hop=2, t_per_segment=2, dim=8, heads=2,
                         d_text=8, n_sup=2, n_classes=4, teacher_class_dim=4, n_spatial=1, n_temporal=1)


@pytest.fixture(scope="session")
def tiny_world():
    return build_world(4, 2, 3, TINY_WORLD)


@pytest.fixture(scope="session")
def tiny_scenes(tiny_world):
    return generate_scenes(tiny_world, 16, "tiny")


def perturbed_student(seed: int = 0, config: EncoderConfig = TINY_ENC, scale: float = 0.3) -> StudentEncoder:
    """Student with its zero-initialized branches filled so every gradient path is active."""
    student = StudentEncoder(config, Vocabulary.for_classes(config.n_classes), seed)
    gen = np.random.default_rng(seed + 100)
    for name, t in student.store.items():
        if not np.any(t.data):
            t.data = gen.normal(0.0, scale, size=t.shape)
    return student


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
