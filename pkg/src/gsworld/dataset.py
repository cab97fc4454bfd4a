"""QA and trajectory dataset tooling: bit-exact record serialization, ego-frame
trajectory normalization, the prefix-LM scoring function, and PSNR-based scene
filtering.

The serialization formats reproduce their reference listings byte for byte,
including the pose-text number style (2 decimals, half-away-from-zero,
trailing zeros trimmed down to "0.0"/"1.0").
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError
from .geometry import Pose
from .render import psnr

GAUSS_MARKER = "<gauss>"
POSE_TEXT_PREFIX = "[PT, "
CLIP_FRAMES = 10
PROMPT_FRAMES = 4
EGO_ANCHOR_INDEX = 4  # 5th frame, 0-based

TRAJECTORY_PROMPT_TEMPLATE = (
    "There is last 4 frames trajectory, {poses}. "
    "Summarize the motion of the ego vehicle in this 6-frame clip"
)


# ---------------------------------------------------------------------------
# pose text grammar
# ---------------------------------------------------------------------------

def round_half_away(value: float, decimals: int = 2) -> float:
    scale = 10.0**decimals
    return math.copysign(math.floor(abs(value) * scale + 0.5), value) / scale


def format_number(value: float) -> str:
    """Render one pose number: 2 decimals, half-away rounding, trailing zeros
    trimmed but always keeping one decimal digit; negative zero collapses."""
    r = round_half_away(float(value))
    text = f"{r:.2f}"
    if text.endswith("0"):
        text = text[:-1]
        if text.endswith(".0"):
            pass
        elif text.endswith("0"):
            text = text[:-1]
    if text in ("-0.0", "-0.00"):
        text = "0.0"
    return text


def format_pose_text(poses) -> str:
    """Serialize poses as "[PT, [x, y, z, qx, qy, qz, qw], ...]"."""
    poses = list(poses)
    if not poses:
        raise ValidationError("need at least one pose")
    rendered = []
    for p in poses:
        values = p.as_7tuple() if isinstance(p, Pose) else list(p)
        if len(values) != 7:
            raise ValidationError("each pose must have 7 numbers")
        rendered.append("[" + ", ".join(format_number(v) for v in values) + "]")
    return POSE_TEXT_PREFIX + ", ".join(rendered) + "]"


def parse_pose_text(text: str) -> list:
    """Inverse of format_pose_text; accepts its own output."""
    stripped = text.strip()
    if not stripped.startswith("[PT,") or not stripped.endswith("]"):
        raise FormatError("pose text must look like '[PT, [...], ...]'")
    body = stripped[len("[PT,"):-1].strip()
    try:
        rows = json.loads("[" + body + "]")
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed pose list: {exc}") from exc
    poses = []
    for row in rows:
        if not isinstance(row, list) or len(row) != 7 or not all(isinstance(v, (int, float)) for v in row):
            raise FormatError(f"each pose must be a list of 7 numbers, got {row!r}")
        poses.append(Pose.from_7tuple(row))
    if not poses:
        raise FormatError("pose text contains no poses")
    return poses


def extract_pose_text(text: str) -> str:
    """Pull the "[PT, ...]" substring out of surrounding prose."""
    start = text.find("[PT,")
    if start < 0:
        raise FormatError("no pose text found")
    depth = 0
    for i in range(start, len(text)):
        if text[i] == "[":
            depth += 1
        elif text[i] == "]":
            depth -= 1
            if depth == 0:
                return text[start : i + 1]
    raise FormatError("unbalanced brackets in pose text")


# ---------------------------------------------------------------------------
# QA records
# ---------------------------------------------------------------------------

@dataclass
class QaRecord:
    token: str
    scene_token: str
    scene_idx: int
    frame_idx: int
    category: str
    task: str
    conversations: list = field(default_factory=list)
    image: list = field(default_factory=list)
    views: list = field(default_factory=list)
    gauss: list = field(default_factory=list)

    def validate(self) -> None:
        for name in ("token", "scene_token", "category", "task"):
            if not isinstance(getattr(self, name), str):
                raise ValidationError(f"{name} must be a string")
        for name in ("scene_idx", "frame_idx"):
            if not isinstance(getattr(self, name), int) or isinstance(getattr(self, name), bool):
                raise ValidationError(f"{name} must be an integer")
        for name in ("image", "views", "gauss"):
            vals = getattr(self, name)
            if not isinstance(vals, list) or not all(isinstance(v, str) for v in vals):
                raise ValidationError(f"{name} must be a list of strings")
        if not self.conversations:
            raise ValidationError("conversations must not be empty")
        for i, turn in enumerate(self.conversations):
            if not isinstance(turn, dict) or set(turn) != {"from", "value"}:
                raise ValidationError(f"turn {i} must be a dict with keys 'from' and 'value'")
            expected = "human" if i % 2 == 0 else "gpt"
            if turn["from"] != expected:
                raise ValidationError(
                    f"turn {i} must come from {expected!r} (conversations alternate, human first)"
                )
            if not isinstance(turn["value"], str):
                raise ValidationError(f"turn {i} value must be a string")
        # the scene-token reference is placed ahead of the instruction text
        if GAUSS_MARKER not in self.conversations[0]["value"]:
            raise ValidationError(f"first human turn must reference {GAUSS_MARKER}")


_QA_FIELDS = ("token", "scene_token", "scene_idx", "frame_idx", "category", "task",
              "conversations", "image", "views", "gauss")


def _json_str(value: str) -> str:
    return json.dumps(value, ensure_ascii=False)


def _emit_string_array(values, indent: str, inline: bool) -> str:
    if inline or not values:
        return "[" + ", ".join(_json_str(v) for v in values) + "]"
    inner = ",\n".join(f"{indent}  {_json_str(v)}" for v in values)
    return "[\n" + inner + "\n" + indent + "]"


def emit_qa_record(record: QaRecord) -> str:
    """Deterministic serialization matching the reference layout: 2-space
    indent, fixed field order, `views` inline, `image`/`gauss` one item per
    line."""
    record.validate()
    lines = ["{"]
    for name in ("token", "scene_token"):
        lines.append(f'  "{name}": {_json_str(getattr(record, name))},')
    for name in ("scene_idx", "frame_idx"):
        lines.append(f'  "{name}": {getattr(record, name)},')
    for name in ("category", "task"):
        lines.append(f'  "{name}": {_json_str(getattr(record, name))},')
    conv_lines = ['  "conversations": [']
    for i, turn in enumerate(record.conversations):
        comma = "," if i + 1 < len(record.conversations) else ""
        conv_lines.append("    {")
        conv_lines.append(f'      "from": {_json_str(turn["from"])},')
        conv_lines.append(f'      "value": {_json_str(turn["value"])}')
        conv_lines.append("    }" + comma)
    conv_lines.append("  ],")
    lines.extend(conv_lines)
    lines.append(f'  "image": {_emit_string_array(record.image, "  ", inline=False)},')
    lines.append(f'  "views": {_emit_string_array(record.views, "  ", inline=True)},')
    lines.append(f'  "gauss": {_emit_string_array(record.gauss, "  ", inline=False)}')
    lines.append("}")
    return "\n".join(lines)


def parse_qa_record(text: str) -> QaRecord:
    """Inverse of emit_qa_record. Malformed JSON raises FormatError; schema
    violations raise ValidationError."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ValidationError("QA record must be a JSON object")
    missing = [f for f in _QA_FIELDS if f not in data]
    if missing:
        raise ValidationError(f"QA record missing fields: {missing}")
    extra = [f for f in data if f not in _QA_FIELDS]
    if extra:
        raise ValidationError(f"QA record has unknown fields: {extra}")
    record = QaRecord(**{f: data[f] for f in _QA_FIELDS})
    record.validate()
    return record


# ---------------------------------------------------------------------------
# trajectory clips
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryClip:
    """Exactly 10 ego poses in temporal order plus their timestamps."""

    poses: tuple
    times: tuple

    def __post_init__(self):
        poses = tuple(self.poses)
        times = tuple(float(t) for t in self.times)
        if len(poses) != CLIP_FRAMES or len(times) != CLIP_FRAMES:
            raise ValidationError(f"a clip holds exactly {CLIP_FRAMES} frames")
        if not all(isinstance(p, Pose) for p in poses):
            raise ValidationError("poses must be Pose instances")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValidationError("frame times must be strictly increasing")
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "times", times)


def normalize_clip_to_frame(clip: TrajectoryClip, anchor: int = EGO_ANCHOR_INDEX) -> TrajectoryClip:
    """Re-express every pose relative to the anchor frame (left-composition
    with its inverse); the anchor becomes the identity pose."""
    inv = clip.poses[anchor].inverse()
    return TrajectoryClip(poses=tuple(inv.compose(p) for p in clip.poses), times=clip.times)


def build_trajectory_qa(clip: TrajectoryClip) -> tuple:
    """(prompt, target) strings: first 4 frames in the prompt, remaining 6 as
    the target, all in the ego frame of the 5th."""
    rel = normalize_clip_to_frame(clip)
    prompt = TRAJECTORY_PROMPT_TEMPLATE.format(poses=format_pose_text(rel.poses[:PROMPT_FRAMES]))
    target = format_pose_text(rel.poses[PROMPT_FRAMES:])
    return prompt, target


# ---------------------------------------------------------------------------
# prefix-LM scoring
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PrefixSample:
    """Prefix/continuation ids plus the model's probability for each ground
    truth position."""

    prefix_ids: tuple
    gt_ids: tuple
    gt_probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "prefix_ids", tuple(int(i) for i in self.prefix_ids))
        object.__setattr__(self, "gt_ids", tuple(int(i) for i in self.gt_ids))
        probs = np.asarray(self.gt_probs, dtype=np.float64)
        if probs.shape != (len(self.gt_ids),):
            raise ValidationError("probability table length must equal |gt_ids|")
        if np.any(probs <= 0.0) or np.any(probs > 1.0):
            raise ValidationError("probabilities must lie in (0, 1]")
        object.__setattr__(self, "gt_probs", probs)


def prefix_lm_loss(batch) -> float:
    """Negative log-likelihood of the continuations: -sum_i sum_t log p."""
    samples = list(batch)
    if not samples:
        raise ValidationError("batch must contain at least one sample")
    total = 0.0
    for s in samples:
        total -= float(np.log(s.gt_probs).sum())
    return total


# ---------------------------------------------------------------------------
# PSNR scene filtering
# ---------------------------------------------------------------------------

def filter_scenes_by_psnr(scene_views: dict, threshold_db: float = 25.0) -> list:
    """Keep scene ids whose mean per-view PSNR meets the threshold.

    scene_views: {scene_id: [(rendered, ground_truth), ...]}.
    """
    kept = []
    for scene_id, pairs in scene_views.items():
        pairs = list(pairs)
        if not pairs:
            raise ValidationError(f"scene {scene_id!r} has no views")
        mean_db = float(np.mean([psnr(a, b) for a, b in pairs]))
        if mean_db >= threshold_db:
            kept.append(scene_id)
    return kept
