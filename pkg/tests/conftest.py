from pathlib import Path

import numpy as np
import pytest

UCI_DIR = Path(__file__).resolve().parents[1] / "data" / "uci"


@pytest.fixture(scope="session")
def uci_dir():
    if not (UCI_DIR / "mfeat-fou").exists():
        pytest.skip("UCI data missing; run scripts/fetch_uci.py")
    return UCI_DIR


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
