from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from fluforecast.core import Epiweek, SignalKind, load_registry
from fluforecast.ingest import Dataset


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture(scope="session")
def registry():
    return load_registry()


@pytest.fixture(scope="session")
def mini_dir() -> Path:
    return Path(str(resources.files("fluforecast.data").joinpath("mini")))


def make_dataset(source: SignalKind, location: str, start: int, values, initial=None) -> Dataset:
    """Contiguous weekly series starting at epiweek ``start``."""
    first = Epiweek.from_int(start)
    weeks = [(first + i).to_int() for i in range(len(values))]
    frame = pd.DataFrame({"source": source.label, "location": location, "epiweek": weeks,
                          "value": np.asarray(values, dtype=float)})
    if initial is not None:
        frame["initial_value"] = np.asarray(initial, dtype=float)
    return Dataset(frame)
