import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

from fdsos.geometry import BoxXYXY

settings.register_profile("default", deadline=None, max_examples=200)
settings.load_profile("default")


@st.composite
def boxes_xyxy(draw, min_side=1e-3):
    x1 = draw(st.floats(0.0, 1.0 - min_side))
    y1 = draw(st.floats(0.0, 1.0 - min_side))
    x2 = draw(st.floats(x1 + min_side, 1.0))
    y2 = draw(st.floats(y1 + min_side, 1.0))
    return BoxXYXY(x1, y1, x2, y2)


def random_xyxy(rng, n, min_side=0.02):
    """``n`` valid xyxy boxes as an (n, 4) array."""
    w = rng.uniform(min_side, 0.5, n)
    h = rng.uniform(min_side, 0.5, n)
    x1 = rng.uniform(0, 1 - w)
    y1 = rng.uniform(0, 1 - h)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
