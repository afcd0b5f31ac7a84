"""Deterministic rendering of the scoring and region-labelling prompts.

Templates live under ``templates/<version>/`` as plain text with ``{name}``
placeholders. A prompt serializes to canonical JSON, so equal inputs give equal
bytes and the serialization can be hashed for caching and snapshot tests.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .dataset import ImageBuffer, ImageRecord

DEFAULT_RUBRIC = (
    (0, "very poor"),
    (1, "poor"),
    (2, "fair"),
    (3, "good"),
    (4, "excellent"),
)
DEFAULT_REGIONS = ("abdomen", "kidney", "liver", "pelvis", "chest", "unknown")


class PromptError(ValueError):
    pass


class NoExamples(PromptError):
    pass


class MissingMetadata(PromptError):
    pass


@dataclass(frozen=True)
class TextPart:
    text: str

    def to_json(self) -> dict:
        return {"type": "text", "text": self.text}


@dataclass(frozen=True)
class ImagePart:
    data: bytes = field(repr=False)
    media_type: str = "image/png"

    def to_json(self) -> dict:
        return {"type": "image", "media_type": self.media_type, "data": base64.b64encode(self.data).decode("ascii")}

    @property
    def data_uri(self) -> str:
        return f"data:{self.media_type};base64,{base64.b64encode(self.data).decode('ascii')}"


@dataclass(frozen=True)
class Turn:
    role: str
    parts: tuple

    def __post_init__(self):
        if self.role not in ("user", "assistant"):
            raise PromptError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class Prompt:
    system_text: str
    turns: tuple
    template_hash: str = ""
    kind: str = "score"

    def serialize(self) -> bytes:
        doc = {
            "system": self.system_text,
            "turns": [{"role": t.role, "parts": [p.to_json() for p in t.parts]} for t in self.turns],
        }
        return json.dumps(doc, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")

    def images(self) -> list[ImagePart]:
        return [p for t in self.turns for p in t.parts if isinstance(p, ImagePart)]

    def texts(self) -> list[str]:
        return [self.system_text] + [p.text for t in self.turns for p in t.parts if isinstance(p, TextPart)]

    @property
    def target_image(self) -> ImagePart | None:
        for turn in reversed(self.turns):
            if turn.role != "user":
                continue
            for part in reversed(turn.parts):
                if isinstance(part, ImagePart):
                    return part
        return None

    def to_messages(self) -> list[dict]:
        """Chat-completions ``messages`` with images as base64 data URIs."""
        messages = [{"role": "system", "content": self.system_text}]
        for turn in self.turns:
            content = []
            for part in turn.parts:
                if isinstance(part, TextPart):
                    content.append({"type": "text", "text": part.text})
                else:
                    content.append({"type": "image_url", "image_url": {"url": part.data_uri}})
            messages.append({"role": turn.role, "content": content})
        return messages


@dataclass(frozen=True)
class ShotExample:
    record: ImageRecord
    image: ImageBuffer

    def __post_init__(self):
        if self.record.score is None:
            raise PromptError(f"example {self.record.id!r} has no radiologist score")


@dataclass(frozen=True)
class PromptConfig:
    template_version: str = "v1"
    template_dir: Path | None = None
    rubric_labels: tuple = DEFAULT_RUBRIC
    region_vocabulary: tuple = DEFAULT_REGIONS
    score_places: int = 2
    noise_places: int = 6


@lru_cache(maxsize=None)
def _load_templates(version: str, directory: str | None) -> tuple[dict, str]:
    if directory is not None:
        files = {p.name: p.read_text(encoding="utf-8") for p in sorted(Path(directory).glob("*.txt"))}
    else:
        root = resources.files("lmmiqa").joinpath("templates", version)
        files = {p.name: p.read_text(encoding="utf-8") for p in sorted(root.iterdir(), key=lambda p: p.name) if p.name.endswith(".txt")}
    if not files:
        raise PromptError(f"no templates found for version {version!r}")
    digest = hashlib.sha256()
    for name in sorted(files):
        digest.update(name.encode("utf-8") + b"\0" + files[name].encode("utf-8") + b"\0")
    return {name[:-4]: text.rstrip("\n") for name, text in files.items()}, digest.hexdigest()


def templates(cfg: PromptConfig) -> dict:
    return _load_templates(cfg.template_version, str(cfg.template_dir) if cfg.template_dir else None)[0]


def template_hash(cfg: PromptConfig = PromptConfig()) -> str:
    return _load_templates(cfg.template_version, str(cfg.template_dir) if cfg.template_dir else None)[1]


def fmt_number(value: float, places: int) -> str:
    """Fixed-point with trailing zeros stripped, keeping one decimal: 0.5, 3.0, 0.003."""
    text = f"{float(value):.{places}f}".rstrip("0")
    if text.endswith("."):
        text += "0"
    if text == "-0.0":
        text = "0.0"
    return text


def render_rubric(labels) -> str:
    return "\n".join(f"{score}: {label}" for score, label in labels)


def _image(buffer: ImageBuffer) -> ImagePart:
    return ImagePart(buffer.png_bytes(), buffer.media_type)


def _system(cfg: PromptConfig) -> str:
    return templates(cfg)["system"].format(rubric=render_rubric(cfg.rubric_labels))


def _metadata(cfg: PromptConfig, region, noise) -> str:
    if region is None:
        return ""
    return templates(cfg)["metadata"].format(region=region, noise=fmt_number(noise, cfg.noise_places))


def _ordered(examples) -> list[ShotExample]:
    return sorted(examples, key=lambda ex: (ex.record.score, ex.record.id))


def _examples_turn(examples, cfg: PromptConfig, with_metadata: bool) -> Turn:
    t = templates(cfg)
    parts = [TextPart(t["examples"].format(count=len(examples)))]
    for i, ex in enumerate(_ordered(examples), start=1):
        meta = _metadata(cfg, ex.record.region, ex.record.noise) if with_metadata else ""
        text = t["example"].format(index=i, metadata=meta, score=fmt_number(ex.record.score, cfg.score_places))
        parts.append(TextPart(text))
        parts.append(_image(ex.image))
    return Turn("user", tuple(parts))


def _target_turn(target: ImageBuffer, cfg: PromptConfig, region=None, noise=None, feedback=()) -> Turn:
    t = templates(cfg)
    parts = []
    if feedback:
        lines = "\n".join(
            t["feedback_line"].format(
                id=entry.id,
                y_hat=fmt_number(entry.y_hat, cfg.score_places),
                y=fmt_number(entry.y, cfg.score_places),
                error=fmt_number(entry.e, cfg.score_places),
                noise=fmt_number(entry.n, cfg.noise_places),
            )
            for entry in feedback
        )
        parts.append(TextPart(t["feedback"].format(feedback=lines)))
    parts.append(TextPart(t["target"].format(metadata=_metadata(cfg, region, noise))))
    parts.append(_image(target))
    return Turn("user", tuple(parts))


def build_zero_shot(target: ImageBuffer, cfg: PromptConfig = PromptConfig()) -> Prompt:
    return Prompt(_system(cfg), (_target_turn(target, cfg),), template_hash(cfg))


def build_few_shot(examples, target: ImageBuffer, cfg: PromptConfig = PromptConfig()) -> Prompt:
    examples = list(examples)
    if not examples:
        raise NoExamples("few-shot prompt needs at least one example; use build_zero_shot")
    turns = (_examples_turn(examples, cfg, False), _target_turn(target, cfg))
    return Prompt(_system(cfg), turns, template_hash(cfg))


def _check_metadata(examples, target_region, target_noise):
    for ex in examples:
        if not ex.record.region:
            raise MissingMetadata(f"example {ex.record.id!r} has no region label")
        if ex.record.noise is None:
            raise MissingMetadata(f"example {ex.record.id!r} has no noise value")
    if not target_region:
        raise MissingMetadata("target has no region label")
    if target_noise is None:
        raise MissingMetadata("target has no noise value")


def build_with_metadata(
    examples, target: ImageBuffer, target_region: str, target_noise: float, cfg: PromptConfig = PromptConfig()
) -> Prompt:
    examples = list(examples)
    if not examples:
        raise NoExamples("metadata prompt needs at least one example")
    _check_metadata(examples, target_region, target_noise)
    turns = (_examples_turn(examples, cfg, True), _target_turn(target, cfg, target_region, target_noise))
    return Prompt(_system(cfg), turns, template_hash(cfg))


def build_with_feedback(
    examples,
    buffer,
    target: ImageBuffer,
    target_region: str,
    target_noise: float,
    cfg: PromptConfig = PromptConfig(),
) -> Prompt:
    """Metadata prompt plus one line per feedback entry; an empty buffer adds nothing."""
    examples = list(examples)
    if not examples:
        raise NoExamples("feedback prompt needs at least one example")
    _check_metadata(examples, target_region, target_noise)
    turns = (
        _examples_turn(examples, cfg, True),
        _target_turn(target, cfg, target_region, target_noise, tuple(buffer)),
    )
    return Prompt(_system(cfg), turns, template_hash(cfg))


def build_region_query(target: ImageBuffer, cfg: PromptConfig = PromptConfig()) -> Prompt:
    t = templates(cfg)
    system = t["region"].format(labels=", ".join(cfg.region_vocabulary))
    turn = Turn("user", (TextPart(t["region_target"]), _image(target)))
    return Prompt(system, (turn,), template_hash(cfg), kind="region")
