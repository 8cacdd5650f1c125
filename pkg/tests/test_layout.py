import json

import pytest
import requests

from boxfield.geometry import WORLD_BOX
from boxfield.layout import (
    LayoutError,
    LlmConfig,
    LlmError,
    SceneLayout,
    SceneObject,
    caption_key,
    load_layout,
    parse_layout,
    parse_layout_lenient,
    request_layout,
    save_layout,
    serialize_layout,
    validate_layout,
    write_mock_fixture,
)
from conftest import fixture_text


CHICKEN_OBJECTS = (
    ("a desk", (156, 106, 200, 200, 300, 150)),
    ("a chicken", (156, 436, 200, 150, 76, 112)),
)
DOGS_OBJECTS = (
    ("a large sitting dog", (156, 106, 0, 200, 150, 300)),
    ("a small sitting dog", (156, 256, 0, 150, 100, 200)),
    ("a plate of dog food", (356, 206, 0, 100, 100, 50)),
)
SHOES_OBJECTS = (
    ("a pair of brown shoes", (0, 0, 0, 256, 256, 200)),
    ("a black briefcase with a blue tie draped over it", (256, 0, 0, 256, 256, 300)),
)


# --- parsing the canonical document -------------------------------------


@pytest.mark.parametrize(
    "fixture_name, caption, expected",
    [
        ("layout_chicken_desk.json", "a chicken near a desk.", CHICKEN_OBJECTS),
        (
            "layout_two_dogs.json",
            "Two dogs sitting side by side, one larger than the other, "
            "with a plate of dog food in front.",
            DOGS_OBJECTS,
        ),
        (
            "layout_shoes_briefcase.json",
            "A pair of brown shoes placed neatly next to a black briefcase "
            "with a blue tie draped over it.",
            SHOES_OBJECTS,
        ),
    ],
)
def test_reference_layouts_parse_exactly(fixture_name, caption, expected):
    layout = parse_layout(fixture_text(fixture_name))
    assert layout.caption == caption
    assert tuple((o.description, o.box6) for o in layout.objects) == expected
    assert validate_layout(layout) == []
    for box in layout.world_boxes():
        assert WORLD_BOX.contains_box(box)


def test_serialize_parse_round_trip(chicken_desk):
    again = parse_layout(serialize_layout(chicken_desk))
    assert again == chicken_desk
    # canonical form: 2-space indent, trailing newline, stable under re-dump
    text = serialize_layout(chicken_desk)
    assert text.endswith("\n")
    assert serialize_layout(again) == text


def test_save_load_round_trip(tmp_path, two_dogs):
    path = tmp_path / "layout.json"
    save_layout(two_dogs, path)
    assert load_layout(path) == two_dogs


def test_parse_rejects_non_json():
    with pytest.raises(LayoutError):
        parse_layout("not json at all")


def test_parse_rejects_unknown_fields():
    doc = {"caption": "x.", "objects": [], "style": "photoreal"}
    with pytest.raises(LayoutError, match="style"):
        parse_layout(json.dumps(doc))


def test_parse_rejects_empty_objects():
    with pytest.raises(LayoutError):
        parse_layout(json.dumps({"caption": "x.", "objects": []}))


def test_parse_names_the_failing_object():
    doc = {
        "caption": "x.",
        "objects": [
            {"description": "fine", "box": [0, 0, 0, 10, 10, 10]},
            {"description": "broken", "box": [0, 0, 0, 10, 10]},
        ],
    }
    with pytest.raises(LayoutError, match=r"objects\[1\]"):
        parse_layout(json.dumps(doc))


def test_object_validation_messages():
    with pytest.raises(LayoutError, match="description"):
        SceneObject(description="", box6=(0, 0, 0, 1, 1, 1))
    with pytest.raises(LayoutError, match="height"):
        SceneObject(description="a box", box6=(0, 0, 0, 10, 10, 0))
    with pytest.raises(LayoutError, match="depth"):
        SceneObject(description="a box", box6=(500, 0, 0, 100, 10, 10))
    with pytest.raises(LayoutError, match="integer"):
        SceneObject(description="a box", box6=(0, 0, 0, 10.5, 10, 10))
    with pytest.raises(LayoutError, match="y"):
        SceneObject(description="a box", box6=(0, -5, 0, 10, 10, 10))


def test_layout_requires_caption():
    with pytest.raises(LayoutError):
        SceneLayout(caption="", objects=(SceneObject("a", (0, 0, 0, 1, 1, 1)),))


# --- lenient parsing of generator output --------------------------------


def test_lenient_accepts_tuple_listing_with_backquotes():
    text = (
        "Caption: a chicken near a desk.\n"
        "Objects: [(`a desk', [156, 106, 200, 200, 300, 150]),\n"
        " (`a chicken', [156, 436, 200, 150, 76, 112])]\n"
    )
    layout = parse_layout_lenient(text)
    assert layout.caption == "a chicken near a desk."
    assert tuple((o.description, o.box6) for o in layout.objects) == CHICKEN_OBJECTS


def test_lenient_accepts_canonical_json(chicken_desk):
    assert parse_layout_lenient(serialize_layout(chicken_desk)) == chicken_desk


def test_lenient_uses_caption_argument_as_fallback():
    text = "Objects: [('a desk', [156, 106, 200, 200, 300, 150])]"
    layout = parse_layout_lenient(text, caption="a desk.")
    assert layout.caption == "a desk."
    with pytest.raises(LayoutError):
        parse_layout_lenient(text)


def test_lenient_rejects_free_text():
    with pytest.raises(LayoutError):
        parse_layout_lenient("I would put the desk on the left side.", caption="x.")


# --- validation warnings -------------------------------------------------


def _layout(*objects, caption="a scene."):
    return SceneLayout(
        caption=caption,
        objects=tuple(SceneObject(description=d, box6=b) for d, b in objects),
    )


def test_identical_boxes_warn():
    lay = _layout(("a cat", (0, 0, 0, 50, 50, 50)), ("a copy", (0, 0, 0, 50, 50, 50)))
    warnings = validate_layout(lay)
    assert any("identical" in w for w in warnings)


def test_containment_warns_in_either_direction():
    small = ("a mouse", (10, 10, 10, 20, 20, 20))
    big = ("a room", (0, 0, 0, 100, 100, 100))
    for order in [(small, big), (big, small)]:
        warnings = validate_layout(_layout(*order))
        assert any("contains" in w for w in warnings), order


def test_majority_overlap_warns():
    lay = _layout(("a sofa", (0, 0, 0, 100, 100, 100)), ("a rug", (10, 10, 10, 100, 100, 100)))
    warnings = validate_layout(lay)
    assert any("overlap" in w for w in warnings)


def test_light_overlap_passes():
    lay = _layout(("a sofa", (0, 0, 0, 100, 100, 100)), ("a rug", (90, 90, 90, 100, 100, 100)))
    assert validate_layout(lay) == []


def test_warnings_are_permutation_invariant():
    objs = [
        ("a mouse", (10, 10, 10, 20, 20, 20)),
        ("a room", (0, 0, 0, 100, 100, 100)),
        ("a chair", (200, 200, 200, 50, 50, 50)),
    ]
    a = set(validate_layout(_layout(*objs)))
    b = set(validate_layout(_layout(*reversed(objs))))
    assert a == b and a


# --- caption keys --------------------------------------------------------


def test_caption_key_is_stable_16_hex():
    key = caption_key("a chicken near a desk.")
    assert key == caption_key("a chicken near a desk.")
    assert len(key) == 16
    int(key, 16)  # hex or raise
    assert key != caption_key("a chicken near a desk")


# --- mock-mode requests --------------------------------------------------


def test_mock_mode_round_trips_fixture(tmp_path, chicken_desk, monkeypatch):
    def explode(*args, **kwargs):
        raise AssertionError("mock mode must not touch the network")

    monkeypatch.setattr(requests, "post", explode)
    write_mock_fixture(tmp_path, chicken_desk)
    cfg = LlmConfig(mode="mock", mock_dir=str(tmp_path))
    assert request_layout(cfg, chicken_desk.caption) == chicken_desk


def test_mock_mode_fails_closed_on_missing_fixture(tmp_path):
    cfg = LlmConfig(mode="mock", mock_dir=str(tmp_path))
    with pytest.raises(LlmError, match="no mock fixture"):
        request_layout(cfg, "a caption nobody prepared.")


def test_mock_mode_requires_directory():
    with pytest.raises(LlmError):
        request_layout(LlmConfig(mode="mock", mock_dir=""), "anything.")


def test_config_rejects_unknown_mode():
    with pytest.raises(ValueError):
        LlmConfig(mode="dryrun")


def test_live_mode_requires_endpoint():
    with pytest.raises(ValueError):
        LlmConfig(mode="live", endpoint="")


# --- live-mode requests (network faked) ----------------------------------


class _FakeResponse:
    def __init__(self, content):
        self._content = content

    def raise_for_status(self):
        pass

    def json(self):
        return {"choices": [{"message": {"content": self._content}}]}


def _live_cfg():
    return LlmConfig(mode="live", endpoint="https://example.invalid/v1/chat/completions")


def test_live_mode_checks_key_before_any_request(monkeypatch):
    calls = []
    monkeypatch.setattr(requests, "post", lambda *a, **k: calls.append(1))
    monkeypatch.delenv("BOXFIELD_API_KEY", raising=False)
    with pytest.raises(LlmError, match="BOXFIELD_API_KEY"):
        request_layout(_live_cfg(), "a chicken near a desk.")
    assert calls == []


def test_live_mode_round_trip_and_wire_format(monkeypatch, chicken_desk):
    seen = {}

    def fake_post(url, json=None, headers=None, timeout=None):
        seen["url"] = url
        seen["body"] = json
        seen["headers"] = headers
        return _FakeResponse(serialize_layout(chicken_desk))

    monkeypatch.setattr(requests, "post", fake_post)
    monkeypatch.setenv("BOXFIELD_API_KEY", "sk-test-123")
    cfg = _live_cfg()
    layout = request_layout(cfg, chicken_desk.caption)
    assert layout == chicken_desk
    assert seen["url"] == cfg.endpoint
    assert seen["headers"]["Authorization"] == "Bearer sk-test-123"
    assert seen["body"]["model"] == "gpt-4"
    assert seen["body"]["temperature"] == 0.5
    roles = [m["role"] for m in seen["body"]["messages"]]
    assert roles == ["system", "user"]
    assert seen["body"]["messages"][1]["content"] == chicken_desk.caption
    assert "[512, 512, 512]" in seen["body"]["messages"][0]["content"]


def test_live_mode_retries_parse_failures_once(monkeypatch, chicken_desk):
    answers = ["sorry, I cannot place boxes here", serialize_layout(chicken_desk)]
    calls = []

    def fake_post(url, json=None, headers=None, timeout=None):
        calls.append(1)
        return _FakeResponse(answers[len(calls) - 1])

    monkeypatch.setattr(requests, "post", fake_post)
    monkeypatch.setenv("BOXFIELD_API_KEY", "sk-test-123")
    assert request_layout(_live_cfg(), chicken_desk.caption) == chicken_desk
    assert len(calls) == 2


def test_live_mode_preserves_raw_text_after_double_failure(monkeypatch):
    def fake_post(url, json=None, headers=None, timeout=None):
        return _FakeResponse("still prose, not a layout")

    monkeypatch.setattr(requests, "post", fake_post)
    monkeypatch.setenv("BOXFIELD_API_KEY", "sk-test-123")
    with pytest.raises(LlmError) as err:
        request_layout(_live_cfg(), "a chicken near a desk.")
    assert err.value.raw_response == "still prose, not a layout"


def test_live_mode_accepts_tuple_style_answers(monkeypatch):
    text = (
        "Caption: a chicken near a desk.\n"
        "Objects: [(`a desk', [156, 106, 200, 200, 300, 150]),\n"
        " (`a chicken', [156, 436, 200, 150, 76, 112])]"
    )
    monkeypatch.setattr(requests, "post", lambda *a, **k: _FakeResponse(text))
    monkeypatch.setenv("BOXFIELD_API_KEY", "sk-test-123")
    layout = request_layout(_live_cfg(), "a chicken near a desk.")
    assert tuple((o.description, o.box6) for o in layout.objects) == CHICKEN_OBJECTS
