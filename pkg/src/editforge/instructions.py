"""JSON-only instruction-generation agent protocol.

Prompt assembly draws five in-context examples from a self-enhancing pool;
responses are parsed strictly (single-quoted JSON is normalized first,
surrounding prose is rejected) and validated against per-task verb and
consistency rules. The deterministic stub agent lives here too so the
whole protocol runs offline.
"""

from __future__ import annotations

import ast
import hashlib
import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tasks
from .errors import ContractError, ParseError, ProviderError

_DATA_DIR = Path(__file__).parent / "data"

SYSTEM_PROMPT = (
    "You are an assistant that only speaks JSON. Do not write normal text. "
    "The assistant answer is JSON with the following string fields: edit, "
    "edited object, output. Here is the latest conversation between the "
    "Assistant and the User."
)

INITIAL_MODEL_MESSAGE = (
    "Sure, I'd be happy to help! Just provide me with the input (the "
    "original caption), and I'll generate the instruction, edited object, "
    "and output caption for you. Let's get started!"
)

REQUIRED_RESPONSE_KEYS = ("edit", "edited object", "output")

RECORD_FIELD_ORDER = ("edit", "edited object", "input", "output",
                      "edit type", "visual input", "image file", "edited file")

DEFAULT_VERBS: dict[str, tuple[str, ...]] = {
    "add": ("place", "add", "include"),
    "remove": ("remove", "delete", "erase"),
    "replace": ("replace", "swap", "substitute"),
    "color alter": ("turn", "recolor", "repaint"),
    "appearance alter": ("decorate", "restyle", "embellish"),
    "material change": ("remake", "craft", "rebuild"),
    "action change": ("animate", "pose", "reenact"),
    "textual change": ("rewrite", "respell", "reletter"),
    "counting": ("duplicate", "multiply", "thin"),
    "background change": ("set", "situate"),
    "tone transfer": ("shift", "retone"),
    "style change": ("stylize", "illustrate"),
    "movement": ("move", "slide", "drag"),
    "outpaint": ("expand", "extend", "outpaint"),
    "rotation": ("rotate", "spin", "pivot"),
    "resize": ("enlarge", "shrink", "zoom"),
    "implicit change": ("transform", "evolve"),
    "relation change": ("rearrange", "reorder", "reposition"),
    "visual sketch": ("sketch",),
    "visual scribble": ("scribble",),
    "visual segmentation": ("segmentation", "segment"),
    "visual depth": ("depth",),
    "visual layout": ("layout", "bbox"),
    "material transfer": ("transfer",),
    "image reference": ("reference",),
}

_STOPWORDS = frozenset(
    "a an the of with in on and is are to at by for from under over its "
    "two against".split())

_OBJECT_BANK = ("hat", "ball", "lamp", "flag", "kite", "scarf", "drum", "vase")
_COLOR_BANK = ("red", "blue", "green", "yellow", "purple", "orange")
_MATERIAL_BANK = ("wood", "glass", "metal", "stone")

SEED_CAPTIONS = (
    "a red bicycle leaning against a brick wall",
    "two dogs playing with a ball in a park",
    "a wooden boat floating on a calm lake",
    "a woman reading a book under a tree",
    "a cat sleeping on a windowsill in the sun",
)


def _load_lexicon(name: str) -> frozenset[str]:
    words = (_DATA_DIR / name).read_text().split()
    return frozenset(w.strip().lower() for w in words if w.strip())


COLOR_LEXICON = _load_lexicon("colors.txt")
INANIMATE_LEXICON = _load_lexicon("inanimate.txt")


def tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z0-9']+", text.lower())


@dataclass
class EditRecord:
    """One edit triplet's metadata, serialized with the wire field names."""

    edit: str
    edited_object: str
    input: str
    output: str
    edit_type: str
    visual_input: str = "None"
    image_file: str = ""
    edited_file: str = ""

    def __post_init__(self):
        for name in ("edit", "input", "output"):
            if not getattr(self, name).strip():
                raise ContractError(f"EditRecord.{name} must be nonempty")
        tasks.validate_task(self.edit_type)

    def to_dict(self) -> dict[str, str]:
        return {
            "edit": self.edit,
            "edited object": self.edited_object,
            "input": self.input,
            "output": self.output,
            "edit type": self.edit_type,
            "visual input": self.visual_input,
            "image file": self.image_file,
            "edited file": self.edited_file,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "EditRecord":
        return cls(
            edit=d["edit"],
            edited_object=d.get("edited object", ""),
            input=d["input"],
            output=d["output"],
            edit_type=d["edit type"],
            visual_input=d.get("visual input", "None"),
            image_file=d.get("image file", ""),
            edited_file=d.get("edited file", ""),
        )

    def agent_response(self) -> str:
        """The three-field form the agent speaks."""
        return json.dumps({"edit": self.edit, "edited object": self.edited_object,
                           "output": self.output}, ensure_ascii=False)


@dataclass
class Rejection:
    caption: str
    edit_type: str
    reason: str
    attempts: int


@dataclass
class VerbConstraintSet:
    verbs: dict[str, tuple[str, ...]] = field(
        default_factory=lambda: dict(DEFAULT_VERBS))

    def __post_init__(self):
        for task, vs in self.verbs.items():
            if not vs:
                raise ContractError(f"task {task!r} has an empty verb set")

    def allowed(self, task: str) -> tuple[str, ...]:
        if task not in self.verbs:
            raise ContractError(f"no verb constraints for task {task!r}")
        return self.verbs[task]


@dataclass
class PromptTemplate:
    system_prompt: str
    task_description: str
    output_format: str
    initial_model_message: str

    @classmethod
    def for_task(cls, task: str,
                 constraints: VerbConstraintSet | None = None) -> "PromptTemplate":
        tasks.validate_task(task)
        verbs = (constraints or VerbConstraintSet()).allowed(task)
        description = (
            f"Hi, My job is to take a given caption (input) and to output the "
            f"following: an instruction for {task} editing (edit), the object "
            f"being edited (edited object), and the caption after the edit "
            f"(output). Please help me do it. I will give you the input, and "
            f"you will help."
        )
        fmt = (
            "When you reply, use the following format: {'edit': "
            "'<instruction>', 'edited object': '<object>', 'output': "
            "'<caption>'}. Construct the instruction with one of the "
            f"following instruction words: [{', '.join(verbs)}]."
        )
        return cls(SYSTEM_PROMPT, description, fmt, INITIAL_MODEL_MESSAGE)


@dataclass
class InContextPool:
    """Per-task (caption, serialized response) example pairs.

    Only grows: seeds persist and enhancement appends.
    """

    entries: dict[str, list[tuple[str, str]]] = field(default_factory=dict)

    @classmethod
    def seeded(cls, seed: int = 0) -> "InContextPool":
        pool = cls({})
        for task in tasks.ALL_TASKS:
            pool.entries[task] = [
                (caption, stub_response(task, caption, seed + i))
                for i, caption in enumerate(SEED_CAPTIONS)]
        return pool

    def size(self, task: str) -> int:
        return len(self.entries.get(task, []))

    def total(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def add(self, task: str, caption: str, serialized: str) -> None:
        self.entries.setdefault(task, []).append((caption, serialized))


def _stable_rng(*parts) -> np.random.Generator:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def _pick_object(task: str, caption: str, rng: np.random.Generator) -> str:
    candidates = [t for t in tokenize(caption)
                  if t not in _STOPWORDS and len(t) > 2]
    if task == "action change":
        animate = [t for t in candidates if t not in INANIMATE_LEXICON]
        candidates = animate or candidates
    if not candidates:
        return "object"
    return candidates[int(rng.integers(len(candidates)))]


def _swap_word(caption: str, old: str, new: str) -> str:
    out = re.sub(rf"\b{re.escape(old)}\b", new, caption, count=1)
    return out if out != caption else f"{caption} ({new})"


def stub_response(task: str, caption: str, seed: int = 0) -> str:
    """Deterministic stand-in for the remote agent: a three-field JSON
    response derived from the caption by per-task templates."""
    tasks.validate_task(task)
    rng = _stable_rng(task, caption, seed)
    obj = _pick_object(task, caption, rng)
    new = _OBJECT_BANK[int(rng.integers(len(_OBJECT_BANK)))]
    color = _COLOR_BANK[int(rng.integers(len(_COLOR_BANK)))]
    material = _MATERIAL_BANK[int(rng.integers(len(_MATERIAL_BANK)))]
    base = caption.rstrip(".")

    if task == "add":
        edit, target = f"add a {new} to the scene", new
        output = f"{base} with a {new}"
    elif task == "remove":
        edit, target = f"remove the {obj} from the scene", obj
        output = _swap_word(base, obj, "empty space")
    elif task == "replace":
        edit, target = f"swap the {obj} for a {new}", obj
        output = _swap_word(base, obj, new)
    elif task == "color alter":
        edit, target = f"turn the {obj} {color}", obj
        output = _swap_word(base, obj, f"{color} {obj}")
    elif task == "appearance alter":
        edit, target = f"decorate the {obj} with stripes", obj
        output = _swap_word(base, obj, f"striped {obj}")
    elif task == "material change":
        edit, target = f"remake the {obj} in {material}", obj
        output = _swap_word(base, obj, f"{material} {obj}")
    elif task == "action change":
        edit, target = f"animate the {obj} to be jumping", obj
        output = f"{base} while jumping"
    elif task == "textual change":
        edit, target = "rewrite the lettering to say OPEN", "lettering"
        output = f"{base} with lettering that says OPEN"
    elif task == "counting":
        edit, target = f"duplicate the {obj}", obj
        output = _swap_word(base, obj, f"two {obj}s")
    elif task == "background change":
        edit, target = "set the background to a beach", "background"
        output = f"{base} on a beach"
    elif task == "tone transfer":
        edit, target = "shift the scene to winter", "scene"
        output = f"{base} in winter"
    elif task == "style change":
        edit, target = "stylize the image as a watercolor", "image"
        output = f"{base} in watercolor style"
    elif task == "movement":
        edit, target = f"move the {obj} to the left", obj
        output = f"{base} with the {obj} on the left"
    elif task == "outpaint":
        edit, target = "expand the view beyond the frame", "view"
        output = f"{base} with expanded surroundings"
    elif task == "rotation":
        edit, target = "rotate the view clockwise", "view"
        output = f"{base} seen from a rotated viewpoint"
    elif task == "resize":
        edit, target = f"enlarge the {obj}", obj
        output = _swap_word(base, obj, f"large {obj}")
    elif task == "implicit change":
        edit, target = "transform the scene as if night had fallen", "scene"
        output = f"{base} at night"
    elif task == "relation change":
        edit, target = f"rearrange the {obj} to the other side", obj
        output = f"{base} with the {obj} on the other side"
    elif task == "material transfer":
        edit, target = f"transfer the material in the companion image onto the {obj}", obj
        output = _swap_word(base, obj, f"retextured {obj}")
    elif task == "image reference":
        edit, target = f"use the reference image for the {obj}", obj
        output = _swap_word(base, obj, "the referenced subject")
    else:  # the five visual-condition tasks
        kind = task.split(" ", 1)[1]
        edit, target = f"apply the {kind} condition to the {obj}", obj
        output = f"{base} matching the {kind} condition"

    return json.dumps({"edit": edit, "edited object": target, "output": output},
                      ensure_ascii=False)


def assemble_prompt(task: str, caption: str, pool: InContextPool,
                    rng: np.random.Generator,
                    constraints: VerbConstraintSet | None = None) -> str:
    """System prompt, task blocks, and exactly five pool examples chosen
    uniformly without replacement, then the user caption."""
    tasks.validate_task(task)
    examples = pool.entries.get(task, [])
    if len(examples) < 5:
        raise ContractError(
            f"in-context pool for task {task!r} has {len(examples)} entries, needs 5")
    idx = rng.choice(len(examples), size=5, replace=False)
    template = PromptTemplate.for_task(task, constraints)
    parts = [
        template.system_prompt,
        "",
        template.task_description,
        "",
        template.output_format,
        "",
        f"Assistant: {template.initial_model_message}",
        "",
    ]
    for i in idx:
        ex_caption, ex_response = examples[int(i)]
        parts.append(f"User input: {ex_caption}")
        parts.append(f"Assistant: {ex_response}")
        parts.append("")
    parts.append(f"User input: {caption}")
    parts.append("Assistant:")
    return "\n".join(parts)


def parse_response(text: str) -> dict[str, str]:
    """Strict parse of the agent reply.

    The whole string must be one JSON object; single-quoted JSON (the
    agent's habit) gets normalized before the strict pass. Missing keys
    and surrounding prose are structured errors.
    """
    s = text.strip()
    if not s:
        raise ParseError("empty", "blank response")
    if not (s.startswith("{") and s.endswith("}")):
        raise ParseError("extra-prose", s[:60])
    try:
        obj = json.loads(s)
    except json.JSONDecodeError:
        try:
            obj = ast.literal_eval(s)
        except (ValueError, SyntaxError):
            raise ParseError("not-json", s[:60])
    if not isinstance(obj, dict):
        raise ParseError("not-object", s[:60])
    missing = [k for k in REQUIRED_RESPONSE_KEYS if k not in obj]
    if missing:
        raise ParseError("missing-key", ",".join(missing))
    for k, v in obj.items():
        if not isinstance(v, str):
            raise ParseError("non-string-field", str(k))
    return obj


def validate_instruction(record: EditRecord,
                         constraints: VerbConstraintSet | None = None
                         ) -> list[str]:
    """Per-task heuristic checks. Violations are data, not errors."""
    constraints = constraints or VerbConstraintSet()
    task = record.edit_type
    violations: list[str] = []
    toks = set(tokenize(record.edit))

    if not any(v in toks for v in constraints.allowed(task)):
        violations.append("no-allowed-verb")

    obj = record.edited_object.strip().lower()
    if task in ("remove", "replace", "color alter", "appearance alter",
                "action change"):
        if obj and obj not in record.input.lower():
            violations.append("object-not-in-input")
    if task == "add" and obj and obj not in record.output.lower():
        violations.append("object-not-in-output")

    if task == "color alter" and not (toks & COLOR_LEXICON):
        violations.append("no-color-word")

    if task == "action change":
        if any(t in INANIMATE_LEXICON for t in tokenize(record.edited_object)):
            violations.append("inanimate-action-target")

    if record.output.strip() == record.input.strip():
        violations.append("output-equals-input")
    return violations


def self_enhance(pool: InContextPool, caption: str, record: EditRecord,
                 constraints: VerbConstraintSet | None = None) -> None:
    """Append a validated (caption, response) pair to the record's task pool."""
    violations = validate_instruction(record, constraints)
    if violations:
        raise ContractError(
            f"cannot enhance pool with invalid record: {violations}")
    pool.add(record.edit_type, caption, record.agent_response())


def compose_counterfactual_caption(concepts: list[str], context: str,
                                   client=None) -> str:
    """Blend rare concepts and a context word into one scene caption.

    With a generation client the caption comes from it (and must mention
    every concept); otherwise, or on failure, a deterministic template is
    used.
    """
    if len(concepts) < 2:
        raise ContractError(f"need at least 2 concepts, got {len(concepts)}")

    def template() -> str:
        listed = " and a ".join(concepts)
        return f"A {context} of a {listed}."

    if client is None:
        return template()
    prompt = (
        "Write one short scene description that mentions every one of these "
        f"concepts: {', '.join(concepts)}. The description is a {context}. "
        "Reply with the description only."
    )
    try:
        caption = client.generate(prompt, max_tokens=64, temperature=0.0,
                                  seed=0).strip()
    except ProviderError as exc:
        warnings.warn(f"caption client failed ({exc}); using template")
        return template()
    lowered = caption.lower()
    if all(c.lower() in lowered for c in concepts):
        return caption
    warnings.warn("caption client dropped a concept; using template")
    return template()


def generate(caption: str, task: str, pool: InContextPool,
             constraints: VerbConstraintSet | None, client,
             rng: np.random.Generator, max_attempts: int = 3
             ) -> EditRecord | Rejection:
    """Full protocol: assemble, call the agent, parse, validate, enhance.

    Parse or validation failures retry with fresh in-context draws; after
    ``max_attempts`` the caption is permanently rejected with the last
    failure reason.
    """
    tasks.validate_task(task)
    if not caption.strip():
        raise ContractError("caption must be nonempty")
    reason = "unknown"
    for _ in range(max_attempts):
        prompt = assemble_prompt(task, caption, pool, rng, constraints)
        seed = int(rng.integers(2 ** 31))
        try:
            raw = client.generate(prompt, max_tokens=256, temperature=0.0,
                                  seed=seed)
        except ProviderError as exc:
            reason = f"provider:{exc}"
            continue
        try:
            parsed = parse_response(raw)
        except ParseError as exc:
            reason = f"parse:{exc.reason}"
            continue
        try:
            record = EditRecord(
                edit=parsed["edit"],
                edited_object=parsed["edited object"],
                input=caption,
                output=parsed["output"],
                edit_type=task,
            )
        except ContractError as exc:
            reason = f"record:{exc}"
            continue
        violations = validate_instruction(record, constraints)
        if violations:
            reason = "validation:" + ";".join(violations)
            continue
        self_enhance(pool, caption, record, constraints)
        return record
    return Rejection(caption, task, reason, max_attempts)
