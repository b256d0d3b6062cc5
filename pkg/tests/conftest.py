import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from mfgride.model import NetworkModel, RegionParams  # noqa: E402

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"


@pytest.fixture
def table2_region():
    return RegionParams(area=100.0, demand_rate=2.0, abandonment_rate=1.0, speed=0.5)


@pytest.fixture
def three_region():
    return NetworkModel.load(SCENARIOS / "three_region.json")
