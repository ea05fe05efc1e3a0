"""Edit-task taxonomy: 25 task identifiers in 5 categories.

Each task maps to exactly one category and one canonical expert slot
(1-based, 11 experts). The per-task instruction counts of the full-scale
reference dataset are carried as documentation constants for the stats
command; they are never recomputed here.
"""

from __future__ import annotations

from .errors import ContractError

CATEGORIES: dict[str, tuple[str, ...]] = {
    "local": (
        "add", "remove", "replace", "color alter", "appearance alter",
        "material change", "action change", "textual change", "counting",
    ),
    "global": ("background change", "tone transfer", "style change"),
    "camera": ("movement", "outpaint", "rotation", "resize"),
    "implicit": ("implicit change", "relation change"),
    "visual": (
        "visual sketch", "visual scribble", "visual segmentation",
        "visual depth", "visual layout", "material transfer",
        "image reference",
    ),
}

ALL_TASKS: tuple[str, ...] = tuple(
    t for tasks in CATEGORIES.values() for t in tasks)

TASK_CATEGORY: dict[str, str] = {
    t: cat for cat, tasks in CATEGORIES.items() for t in tasks}

EXPERT_COUNT = 11

# Canonical expert slot per task (1-based). One expert serves all local
# tasks, one each for the global / implicit / camera families, and one
# per visual modality.
CANONICAL_EXPERT: dict[str, int] = {
    "tone transfer": 1,
    "background change": 1,
    "style change": 1,
    "implicit change": 2,
    "relation change": 2,
    "add": 3,
    "remove": 3,
    "replace": 3,
    "color alter": 3,
    "appearance alter": 3,
    "material change": 3,
    "action change": 3,
    "textual change": 3,
    "counting": 3,
    "movement": 4,
    "outpaint": 4,
    "resize": 4,
    "rotation": 4,
    "visual layout": 5,
    "visual depth": 6,
    "material transfer": 7,
    "image reference": 8,
    "visual scribble": 9,
    "visual segmentation": 10,
    "visual sketch": 11,
}

# Full-scale reference dataset: instructions per task. Display-only.
REFERENCE_INSTRUCTION_COUNTS: dict[str, int] = {
    "remove": 109505,
    "replace": 98109,
    "add": 395667,
    "color alter": 337078,
    "appearance alter": 79720,
    "material change": 21646,
    "action change": 47210,
    "textual change": 2500,
    "counting": 698,
    "background change": 413570,
    "tone transfer": 553919,
    "style change": 27488,
    "movement": 7724,
    "outpaint": 57462,
    "rotation": 17022,
    "resize": 10219,
    "implicit change": 9917,
    "relation change": 410,
    "visual sketch": 55385,
    "visual scribble": 55385,
    "visual segmentation": 55385,
    "visual depth": 55385,
    "visual layout": 55385,
    "material transfer": 21646,
    "image reference": 17885,
}

REFERENCE_TOTAL_INSTRUCTIONS = 2506320


def validate_task(task: str) -> str:
    """Return the task identifier or raise for anything off the closed set."""
    if task not in TASK_CATEGORY:
        raise ContractError(f"unknown edit task: {task!r}")
    return task
