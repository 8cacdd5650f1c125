import json
from pathlib import Path

import numpy as np
import pytest

from boxfield.layout import SceneLayout, parse_layout

DATA_DIR = Path(__file__).parent / "data"


def load_fixture(name: str) -> SceneLayout:
    return parse_layout((DATA_DIR / name).read_text(encoding="utf-8"))


def fixture_text(name: str) -> str:
    return (DATA_DIR / name).read_text(encoding="utf-8")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def chicken_desk() -> SceneLayout:
    return load_fixture("layout_chicken_desk.json")


@pytest.fixture
def two_dogs() -> SceneLayout:
    return load_fixture("layout_two_dogs.json")


@pytest.fixture
def shoes_briefcase() -> SceneLayout:
    return load_fixture("layout_shoes_briefcase.json")


def single_box_layout(box6, description="an object", caption="one object") -> SceneLayout:
    doc = {"caption": caption, "objects": [{"description": description, "box": list(box6)}]}
    return parse_layout(json.dumps(doc))
