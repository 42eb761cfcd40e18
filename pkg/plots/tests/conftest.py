import sys
from pathlib import Path

import pytest

SRC = Path(__file__).resolve().parents[1] / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

GOLDEN = Path(__file__).resolve().parent / "golden"


@pytest.fixture
def golden_dir():
    return GOLDEN
