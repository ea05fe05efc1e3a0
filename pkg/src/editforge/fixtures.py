"""Deterministic toy fixtures: training sets, eval pairs, and the record
manifest used by the filter and stats commands.

Everything is seeded, so fixture bytes are reproducible across runs and
machines; tests freeze expectations against them.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import diffusion as df
from . import images as im
from . import tasks
from .instructions import (EditRecord, InContextPool, generate)
from .model import ModelConfig, ToyDenoiser, TrainConfig
from .tensor import from_array

RECOLOR_INSTRUCTION = "make the square red"
RECOLOR_TASK = "appearance alter"   # what the type predictor returns for it
PRESET_INSTRUCTION = "apply the preset"
RED = np.array([0.9, 0.1, 0.1])
BLUE = np.array([0.15, 0.25, 0.9])

FIXTURE_MODEL_SEED = 7

# Frozen training recipes for the bundled fixtures. The overfit and
# ablation recipes opt into the adaptive optimizer where plain descent
# cannot traverse enough parameter space in the allotted steps; plain
# descent stays the package-wide default.
RECOLOR_STAGE1 = TrainConfig(steps=2000, learning_rate=1e-4, batch_size=16,
                             optimizer="adam", seed=11)
EDIT_STAGE1 = TrainConfig(steps=4000, learning_rate=1e-4, batch_size=8,
                          optimizer="adam", seed=11)
TWO_TASK_STAGE1 = TrainConfig(steps=1600, learning_rate=1e-4, batch_size=4,
                              optimizer="sgd", seed=21)
TWO_TASK_STAGE2 = TrainConfig(steps=500, learning_rate=1e-3, batch_size=4,
                              optimizer="adam", seed=22)
EDIT_SAMPLE_STEPS = 20
EDIT_SAMPLE_SEED = 5


def fixture_model_config(**overrides) -> ModelConfig:
    return ModelConfig(seed=FIXTURE_MODEL_SEED, **overrides)


def _square_scene(rng: np.random.Generator, size: int
                  ) -> tuple[np.ndarray, tuple[int, int, int], np.ndarray]:
    """A light background with one colored square; returns (image,
    (y, x, side), square color)."""
    background = np.full((size, size, 3), 0.75)
    background += rng.uniform(-0.05, 0.05, size=(1, 1, 3))
    side = int(rng.integers(4, 7))
    y = int(rng.integers(1, size - side - 1))
    x = int(rng.integers(1, size - side - 1))
    palette = np.array([
        [0.2, 0.5, 0.8], [0.2, 0.7, 0.3], [0.6, 0.4, 0.1],
        [0.5, 0.2, 0.6], [0.1, 0.6, 0.6],
    ])
    color = palette[int(rng.integers(len(palette)))]
    img = background.copy()
    img[y:y + side, x:x + side] = color
    return np.clip(img, 0, 1), (y, x, side), color


def recolor_pair(rng: np.random.Generator, size: int
                 ) -> tuple[np.ndarray, np.ndarray]:
    """(original, target) where the square turns red."""
    original, (y, x, side), _ = _square_scene(rng, size)
    target = original.copy()
    target[y:y + side, x:x + side] = RED
    return original, target


def background_pair(rng: np.random.Generator, size: int
                    ) -> tuple[np.ndarray, np.ndarray]:
    """(original, target) where the background turns blue, square kept."""
    original, (y, x, side), color = _square_scene(rng, size)
    target = np.full((size, size, 3), BLUE)
    target[y:y + side, x:x + side] = color
    return original, np.clip(target, 0, 1)


def recolor_dataset(model: ToyDenoiser, count: int = 32, seed: int = 100
                    ) -> list[df.TrainingExample]:
    """The bundled recolor overfit set: same instruction, varied squares."""
    rng = np.random.default_rng(seed)
    size = model.config.image_size
    token_ids = model.encode_text(RECOLOR_INSTRUCTION)
    examples = []
    for _ in range(count):
        original, target = recolor_pair(rng, size)
        conditions = df.ConditionSet(c_i=original, c_t=token_ids, c_v=None)
        examples.append(df.TrainingExample(from_array(target), conditions,
                                           RECOLOR_TASK))
    return examples


def two_task_dataset(model: ToyDenoiser, per_task: int = 16, seed: int = 200
                     ) -> list[df.TrainingExample]:
    """Recolor vs background-fill under one shared instruction.

    The text and image conditions carry no task signal, so the target is
    recoverable only through the task identity (task token and routing).
    A fixed nonzero reference embedding keeps the projector in play.
    """
    rng = np.random.default_rng(seed)
    size = model.config.image_size
    token_ids = model.encode_text(PRESET_INSTRUCTION)
    z_v = np.ones(model.config.z_v_width) / np.sqrt(model.config.z_v_width)
    examples = []
    for task, maker in (("color alter", recolor_pair),
                        ("background change", background_pair)):
        for _ in range(per_task):
            original, target = maker(rng, size)
            conditions = df.ConditionSet(c_i=original, c_t=token_ids, c_v=z_v)
            examples.append(df.TrainingExample(from_array(target), conditions,
                                               task))
    return examples


def edit_eval_pair(model: ToyDenoiser, seed: int = 100
                   ) -> tuple[np.ndarray, np.ndarray]:
    """The first recolor training scene, as (original, ground truth)."""
    rng = np.random.default_rng(seed)
    return recolor_pair(rng, model.config.image_size)


_MANIFEST_NOUNS = ("dog", "car", "boat", "tree", "lamp", "bird", "house",
                   "horse", "chair", "kettle")
_MANIFEST_PLACES = ("park", "street", "harbor", "meadow", "kitchen",
                    "garden", "plaza", "attic", "bridge", "court")


def manifest_caption(i: int) -> str:
    noun = _MANIFEST_NOUNS[i % len(_MANIFEST_NOUNS)]
    place = _MANIFEST_PLACES[(i * 3 + 1) % len(_MANIFEST_PLACES)]
    return f"a {noun} resting near the {place} fence"


def manifest_tasks(count: int = 50) -> list[str]:
    """A deterministic spread over all five categories."""
    cycle = ("add", "remove", "color alter", "appearance alter",
             "background change", "tone transfer", "movement", "outpaint",
             "implicit change", "relation change", "visual sketch",
             "visual depth", "material transfer", "counting", "replace")
    return [cycle[i % len(cycle)] for i in range(count)]


def build_record_manifest(count: int = 50, seed: int = 300
                          ) -> list[EditRecord]:
    """Generate ``count`` records through the full agent protocol
    (stub client), one per caption/task pair."""
    from .clients import StubTextGen

    pool = InContextPool.seeded(seed)
    rng = np.random.default_rng(seed)
    client = StubTextGen()
    records = []
    for i, task in enumerate(manifest_tasks(count)):
        out = generate(manifest_caption(i), task, pool, None, client, rng)
        if not isinstance(out, EditRecord):
            raise RuntimeError(
                f"manifest fixture produced a rejection at {i}: {out.reason}")
        out.image_file = f"img_{i:03d}_original.png"
        out.edited_file = f"img_{i:03d}_edited.png"
        records.append(out)
    return records


def _record_images(record: EditRecord, index: int, rng: np.random.Generator,
                   size: int = 24) -> tuple[bytes, bytes]:
    """Deterministic (original, edited) PNG pair for one record.

    Three failure modes are planted by index so the filter summary has a
    meaningful split: a no-op edit (degenerate directional), an absent
    edited object (detector gate), and an oversized edit (distance gate).
    """
    base = rng.uniform(0.25, 0.75, size=(size, size, 3))
    y, x = int(rng.integers(0, size - 8)), int(rng.integers(0, size - 8))
    edited = base.copy()
    edited[y:y + 8, x:x + 8] = rng.uniform(size=3)

    meta_o = {"stub-caption": record.input,
              "stub-objects": record.edited_object,
              "stub-aesthetic": "6.0"}
    meta_e = {"stub-caption": record.output,
              "stub-objects": record.edited_object,
              "stub-aesthetic": "6.0"}

    if index % 10 == 7:      # no-op edit: identical pixels and captions
        edited = base.copy()
        meta_e = dict(meta_o)
    elif index % 10 == 8:    # edited object missing from the edited image
        meta_e.pop("stub-objects")
        meta_e["stub-caption"] = "an unrelated empty scene"
    elif index % 10 == 9:    # edit rewrites most of the image
        edited = 1.0 - base

    return (im.encode_png(base, meta_o), im.encode_png(edited, meta_e))


def write_filter_fixture(out_dir, count: int = 50, seed: int = 300) -> Path:
    """Records JSONL plus original/edited PNGs under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = build_record_manifest(count, seed)
    rng = np.random.default_rng(seed + 1)
    lines = []
    for i, record in enumerate(records):
        png_o, png_e = _record_images(record, i, rng)
        (out_dir / "images" / record.image_file).write_bytes(png_o)
        (out_dir / "images" / record.edited_file).write_bytes(png_e)
        lines.append(json.dumps(record.to_dict(), ensure_ascii=False))
    (out_dir / "records.jsonl").write_text("\n".join(lines) + "\n")
    return out_dir / "records.jsonl"


def write_caption_fixture(out_dir, count: int = 12, seed: int = 400,
                          size: int = 16) -> Path:
    """Caption/task JSONL plus the original images they describe.

    Rows carry an ``image file`` reference so generated records inherit
    their source image, mirroring how captions arrive from image-caption
    pairs upstream.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(count):
        caption = manifest_caption(i)
        name = f"cap_{i:03d}.png"
        scene, _, _ = _square_scene(rng, size)
        (out_dir / "images" / name).write_bytes(im.encode_png(scene, {
            "stub-caption": caption, "stub-aesthetic": "6.0"}))
        lines.append(json.dumps({
            "caption": caption,
            "edit type": manifest_tasks(count)[i],
            "image file": name,
        }, ensure_ascii=False))
    path = out_dir / "captions.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def materialize_edits(records_path, images_dir, seed: int = 500) -> int:
    """Write a deterministic edited image for every record in place.

    Stands in for the generative pipeline backends: a seeded color fill
    over one block of the original, with the record's output caption and
    edited object attached as metadata for the stub providers.
    """
    from .masks import RasterMask, merge

    records_path = Path(records_path)
    images_dir = Path(images_dir)
    rows = [json.loads(l) for l in records_path.read_text().splitlines() if l]
    count = 0
    for i, row in enumerate(rows):
        record = EditRecord.from_dict(row)
        original = im.load_image(images_dir / record.image_file)
        rng = np.random.default_rng([seed, i])
        h, w = original.shape[:2]
        side = max(2, h // 3)
        y = int(rng.integers(0, h - side))
        x = int(rng.integers(0, w - side))
        mask = np.zeros((h, w))
        mask[y:y + side, x:x + side] = 1.0
        fill = np.tile(rng.uniform(0, 1, size=3), (h, w, 1))
        edited = merge(original, fill, RasterMask(mask))
        meta = {"stub-caption": record.output,
                "stub-objects": record.edited_object,
                "stub-aesthetic": "6.0"}
        (images_dir / record.edited_file).write_bytes(
            im.encode_png(edited, meta))
        count += 1
    return count
