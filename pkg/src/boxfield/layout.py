"""Scene layouts: a caption plus per-object boxes in the integer [0, 512]^3
layout space, JSON (de)serialization, validation warnings, and the layout
LLM client with an offline mock mode.
"""
from __future__ import annotations

import ast
import hashlib
import json
import os
import re
from dataclasses import dataclass, field as dc_field
from pathlib import Path

from .geometry import LAYOUT_EXTENT, Aabb, aabb_from_layout

BOX_FIELD_NAMES = ("x", "y", "z", "depth", "width", "height")


class LayoutError(ValueError):
    """Malformed layout document or invariant violation."""


class LlmError(RuntimeError):
    """Layout-generation service failure (configuration, network, or response)."""

    def __init__(self, message: str, raw_response: str | None = None):
        super().__init__(message)
        self.raw_response = raw_response


@dataclass(frozen=True)
class SceneObject:
    description: str
    box6: tuple  # (x, y, z, depth, width, height) ints in layout space

    def __post_init__(self):
        if not isinstance(self.description, str) or not self.description.strip():
            raise LayoutError("object description must be a non-empty string")
        box = tuple(self.box6)
        if len(box) != 6:
            raise LayoutError(f"box must have 6 entries, got {len(box)}")
        for name, v in zip(BOX_FIELD_NAMES, box):
            if not isinstance(v, int) or isinstance(v, bool):
                raise LayoutError(f"box field {name} must be an integer, got {v!r}")
        x, y, z, d, w, h = box
        for name, v in zip(("depth", "width", "height"), (d, w, h)):
            if v <= 0:
                raise LayoutError(f"box field {name} must be positive, got {v}")
        for name, lo, ext in (("x", x, d), ("y", y, w), ("z", z, h)):
            if lo < 0:
                raise LayoutError(f"box field {name} must be >= 0, got {lo}")
            if lo + ext > LAYOUT_EXTENT:
                axis_ext = {"x": "depth", "y": "width", "z": "height"}[name]
                raise LayoutError(
                    f"box exceeds layout space on {name}: {name} + {axis_ext} = "
                    f"{lo + ext} > {LAYOUT_EXTENT}"
                )
        object.__setattr__(self, "box6", box)

    def world_box(self) -> Aabb:
        return aabb_from_layout(self.box6)


@dataclass(frozen=True)
class SceneLayout:
    caption: str
    objects: tuple  # of SceneObject

    def __post_init__(self):
        if not isinstance(self.caption, str) or not self.caption.strip():
            raise LayoutError("caption must be a non-empty string")
        objects = tuple(self.objects)
        if not objects:
            raise LayoutError("layout must contain at least one object")
        object.__setattr__(self, "objects", objects)

    def world_boxes(self):
        return [obj.world_box() for obj in self.objects]


def _object_from_json(idx: int, entry) -> SceneObject:
    if not isinstance(entry, dict):
        raise LayoutError(f"objects[{idx}] must be an object, got {type(entry).__name__}")
    unknown = set(entry) - {"description", "box"}
    if unknown:
        raise LayoutError(f"objects[{idx}] has unknown fields {sorted(unknown)}")
    if "description" not in entry or "box" not in entry:
        raise LayoutError(f"objects[{idx}] needs 'description' and 'box'")
    box = entry["box"]
    if not isinstance(box, list):
        raise LayoutError(f"objects[{idx}].box must be a list")
    try:
        return SceneObject(description=entry["description"], box6=tuple(box))
    except LayoutError as exc:
        raise LayoutError(f"objects[{idx}]: {exc}") from exc


def parse_layout(text: str) -> SceneLayout:
    """Strict parse of the canonical JSON layout document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LayoutError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise LayoutError("layout document must be a JSON object")
    unknown = set(doc) - {"caption", "objects"}
    if unknown:
        raise LayoutError(f"unknown top-level fields {sorted(unknown)}")
    if "caption" not in doc or "objects" not in doc:
        raise LayoutError("layout needs 'caption' and 'objects'")
    if not isinstance(doc["objects"], list):
        raise LayoutError("'objects' must be a list")
    objects = [_object_from_json(i, e) for i, e in enumerate(doc["objects"])]
    return SceneLayout(caption=doc["caption"], objects=tuple(objects))


_TUPLE_LIST_RE = re.compile(r"\[\s*\(.*\)\s*,?\s*\]", re.DOTALL)


def parse_layout_lenient(text: str, caption: str | None = None) -> SceneLayout:
    """Accept the canonical JSON or a tuple-style listing.

    The tuple style is a line like
        Objects: [('a pair of brown shoes', [0, 0, 0, 256, 256, 200]), ...]
    optionally preceded by a "Caption: ..." line; backquote-style quoting
    (`...') is normalized before evaluation.
    """
    try:
        return parse_layout(text)
    except LayoutError:
        pass
    cap = caption
    m = re.search(r"Caption\s*:\s*(.+)", text)
    if m:
        cap = m.group(1).strip()
    m = _TUPLE_LIST_RE.search(text.replace("`", "'"))
    if not m:
        raise LayoutError("no recognizable layout found (neither JSON nor tuple listing)")
    try:
        listing = ast.literal_eval(m.group(0))
    except (ValueError, SyntaxError) as exc:
        raise LayoutError(f"cannot evaluate tuple listing: {exc}") from exc
    objects = []
    for i, item in enumerate(listing):
        if not (isinstance(item, tuple) and len(item) == 2):
            raise LayoutError(f"objects[{i}] must be a (description, box) pair")
        desc, box = item
        try:
            objects.append(SceneObject(description=desc, box6=tuple(box)))
        except LayoutError as exc:
            raise LayoutError(f"objects[{i}]: {exc}") from exc
    if cap is None:
        raise LayoutError("tuple listing carries no caption; pass one explicitly")
    return SceneLayout(caption=cap, objects=tuple(objects))


def serialize_layout(layout: SceneLayout) -> str:
    doc = {
        "caption": layout.caption,
        "objects": [
            {"description": o.description, "box": list(o.box6)} for o in layout.objects
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def load_layout(path) -> SceneLayout:
    return parse_layout(Path(path).read_text(encoding="utf-8"))


def save_layout(layout: SceneLayout, path):
    Path(path).write_text(serialize_layout(layout), encoding="utf-8")


def validate_layout(layout: SceneLayout):
    """Non-fatal diagnostics: residual containment and heavy pairwise overlap.

    Warnings name objects by description (not index) so the result is a
    permutation-invariant set.  Disconnected boxes are fine by design.
    """
    warnings = []
    objs = layout.objects
    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            a, b = objs[i], objs[j]
            box_a, box_b = a.world_box(), b.world_box()
            pair = sorted([a.description, b.description])
            if box_a.contains_box(box_b) and box_b.contains_box(box_a):
                warnings.append(
                    f"containment: boxes for '{pair[0]}' and '{pair[1]}' are identical"
                )
            elif box_a.contains_box(box_b):
                warnings.append(
                    f"containment: box for '{a.description}' fully contains '{b.description}'"
                )
            elif box_b.contains_box(box_a):
                warnings.append(
                    f"containment: box for '{b.description}' fully contains '{a.description}'"
                )
            overlap = box_a.overlap_volume(box_b)
            smaller = min(box_a.volume(), box_b.volume())
            if smaller > 0 and overlap / smaller > 0.5:
                warnings.append(
                    f"overlap: boxes for '{pair[0]}' and '{pair[1]}' share "
                    f"{overlap / smaller:.0%} of the smaller volume"
                )
    return warnings


# --- layout generation client -------------------------------------------

LAYOUT_SYSTEM_PROMPT = """\
You are a 3D layout generator. Decompose the user's scene caption into \
bounding boxes in a [512, 512, 512] space. Each box is written as \
[x, y, z, depth, width, height] with non-negative integers; x+depth, \
y+width, and z+height must each stay within 512. Give every distinct \
object its own box sized plausibly relative to the others. If one object \
would be contained in another (for example a tie draped over a briefcase), \
merge them into a single box whose description mentions both. Respond with \
JSON only, in the form \
{"caption": ..., "objects": [{"description": ..., "box": [x, y, z, depth, width, height]}, ...]}.

Example request: A pair of brown shoes placed neatly next to a black \
briefcase with a blue tie draped over it.
Example response: {"caption": "A pair of brown shoes placed neatly next to \
a black briefcase with a blue tie draped over it.", "objects": [{"description": \
"a pair of brown shoes", "box": [0, 0, 0, 256, 256, 200]}, {"description": \
"a black briefcase with a blue tie draped over it", "box": [256, 0, 0, 256, 256, 300]}]}
"""


@dataclass(frozen=True)
class LlmConfig:
    """Where and how to ask for layouts.

    mode 'mock' reads canned responses from mock_dir, keyed by caption hash;
    mode 'live' posts one chat-completion request to endpoint, with the API
    key taken from the environment variable named by api_key_env.
    """

    mode: str = "mock"
    endpoint: str = ""
    model: str = "gpt-4"
    api_key_env: str = "BOXFIELD_API_KEY"
    temperature: float = 0.5
    mock_dir: str = ""
    system_prompt: str = LAYOUT_SYSTEM_PROMPT

    def __post_init__(self):
        if self.mode not in ("live", "mock"):
            raise ValueError(f"mode must be 'live' or 'mock', got {self.mode!r}")
        if self.mode == "live" and (not self.endpoint or not self.api_key_env):
            raise ValueError("live mode requires endpoint and api_key_env")


def caption_key(caption: str) -> str:
    return hashlib.sha256(caption.encode("utf-8")).hexdigest()[:16]


def _request_once(cfg: LlmConfig, caption: str, api_key: str) -> str:
    import requests

    body = {
        "model": cfg.model,
        "temperature": cfg.temperature,
        "messages": [
            {"role": "system", "content": cfg.system_prompt},
            {"role": "user", "content": caption},
        ],
    }
    try:
        resp = requests.post(
            cfg.endpoint,
            json=body,
            headers={"Authorization": f"Bearer {api_key}"},
            timeout=60,
        )
        resp.raise_for_status()
        payload = resp.json()
    except Exception as exc:  # requests exposes many failure types
        raise LlmError(f"layout request failed: {exc}") from exc
    try:
        return payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise LlmError(
            "response missing choices[0].message.content", raw_response=json.dumps(payload)
        ) from exc


def request_layout(cfg: LlmConfig, caption: str) -> SceneLayout:
    """Fetch a layout for the caption.

    Mock mode is offline and fail-closed: a missing fixture is an error,
    never an invented layout.  Live mode retries exactly once on a response
    that fails to parse; the raw text is preserved in the final error.
    """
    if cfg.mode == "mock":
        if not cfg.mock_dir:
            raise LlmError("mock mode needs a mock_dir")
        path = Path(cfg.mock_dir) / f"{caption_key(caption)}.json"
        if not path.exists():
            raise LlmError(f"no mock fixture for caption {caption!r} (expected {path})")
        return parse_layout(path.read_text(encoding="utf-8"))

    api_key = os.environ.get(cfg.api_key_env, "")
    if not api_key:
        raise LlmError(f"environment variable {cfg.api_key_env} is not set")
    last_raw = None
    for _ in range(2):  # one retry on parse failure
        text = _request_once(cfg, caption, api_key)
        last_raw = text
        try:
            return parse_layout_lenient(text, caption=caption)
        except LayoutError:
            continue
    raise LlmError("response did not parse as a layout after retry", raw_response=last_raw)


def write_mock_fixture(mock_dir, layout: SceneLayout):
    """Drop a fixture where mock-mode request_layout will find it."""
    path = Path(mock_dir) / f"{caption_key(layout.caption)}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_layout(layout), encoding="utf-8")
    return path
