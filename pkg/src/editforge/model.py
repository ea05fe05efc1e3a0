"""The assembled toy editing-diffusion model.

A token denoiser replaces the convolutional backbone: the noisy image and
the original-image condition are channel-concatenated, patchified into
tokens, mixed, and run through blocks of self-mixing plus decoupled
text/visual cross-attention. Visual-prompt tokens are the task embedding
followed by the projected reference embedding (zeros when absent).

Training happens in two stages with disjoint trainable sets: stage 1
fits the backbone with visual conditioning off; stage 2 freezes the
backbone and fits the experts, router, projector, and task embeddings.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import attention as att
from . import diffusion as df
from . import tasks
from .errors import ConfigError, ContractError, ProviderError, ShapeError
from .instructions import VerbConstraintSet, tokenize
from .tensor import (AdamOptimizer, Parameter, Tensor, add, add_row, backward,
                     concat, from_array, gelu, load_tensor, matmul, mean, mul,
                     optimizer_step, reshape, save_tensor, scale, sub,
                     take_flat, zeros)

VOCAB: tuple[str, ...] = (
    "<unk>", "a", "an", "the", "make", "turn", "set", "fill", "paint",
    "square", "circle", "border", "background", "red", "green", "blue",
    "yellow", "purple", "orange", "white", "black", "gray", "color",
    "change", "add", "remove", "replace", "move", "left", "right", "up",
    "down", "to", "of", "with", "in", "on", "and", "image", "scene",
    "object", "small", "large", "bright", "dark", "style", "tone", "shift",
    "expand", "rotate", "enlarge", "shrink", "apply", "preset", "one",
    "two", "three", "top", "bottom", "center", "edge", "box", "dot", "line",
)

STAGE_BACKBONE = "backbone"
STAGE_ADAPTER = "adapter"


@dataclass
class ModelConfig:
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    d_model: int = 48
    n_blocks: int = 3
    n_embed: int = 32          # task-embedding width
    expert_count: int = 11
    visual_tokens: int = 2     # projected tokens per visual prompt
    z_v_width: int = 32        # reference-embedding width from the provider
    diffusion_steps: int = 20
    beta_start: float = 0.05
    beta_end: float = 0.30
    router_temperature: float = 1.0
    router_top1: bool = False
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"patch size {self.patch_size} does not divide image size "
                f"{self.image_size}")
        if min(self.image_size, self.channels, self.patch_size, self.d_model,
               self.n_blocks, self.n_embed, self.expert_count,
               self.visual_tokens, self.z_v_width, self.diffusion_steps) < 1:
            raise ConfigError("all model extents must be >= 1")
        if self.expert_count == tasks.EXPERT_COUNT and \
                self.n_embed < len(tasks.ALL_TASKS):
            raise ConfigError(
                f"n_embed {self.n_embed} too narrow for the canonical "
                f"{len(tasks.ALL_TASKS)} orthonormal task embeddings")
        return self

    def digest(self) -> str:
        canon = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @property
    def tokens_per_image(self) -> int:
        return (self.image_size // self.patch_size) ** 2


class AutoencoderStub:
    """Identity latent codec: at this scale, pixel space is the latent
    space, so encode and decode are exact inverses by construction."""

    def encode(self, x):
        return x

    def decode(self, z):
        return z


@dataclass
class VisualPromptProjector:
    """Bias-free linear map from a reference embedding to prompt tokens;
    zero input yields exactly zero tokens."""

    w: Tensor
    token_count: int
    token_width: int

    def project(self, z_v: Tensor) -> Tensor:
        flat = matmul(reshape(z_v, [1, z_v.size]), self.w)
        return reshape(flat, [self.token_count, self.token_width])


class PredictedType(NamedTuple):
    task: str
    low_confidence: bool
    via_fallback: bool


def _patch_permutation(size: int, patch: int, channels: int) -> np.ndarray:
    """Row-major flat indices turning (h, w, c) into (tokens, patch*patch*c)."""
    per_side = size // patch
    idx = np.arange(size * size * channels).reshape(size, size, channels)
    out = []
    for py in range(per_side):
        for px in range(per_side):
            block = idx[py * patch:(py + 1) * patch,
                        px * patch:(px + 1) * patch, :]
            out.append(block.reshape(-1))
    return np.concatenate(out)


class ToyDenoiser:
    """Token denoiser with per-block expert banks and shared routing."""

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        self.params: dict[str, Parameter] = {}
        self.stages_completed: set[str] = set()
        self.autoencoder = AutoencoderStub()
        c = self.config
        rng = np.random.default_rng(c.seed)

        patch_in = c.patch_size ** 2 * 2 * c.channels
        patch_out = c.patch_size ** 2 * c.channels
        n_tok = c.tokens_per_image

        def par(name: str, shape, stage: str, scale_: float) -> Tensor:
            t = from_array(rng.normal(size=shape) * scale_)
            self.params[name] = Parameter(t, name, stage=stage)
            return t

        par("embed.patch", (patch_in, c.d_model), STAGE_BACKBONE,
            patch_in ** -0.5)
        par("embed.time", (c.diffusion_steps, c.d_model), STAGE_BACKBONE, 0.1)
        par("embed.text", (len(VOCAB), c.d_model), STAGE_BACKBONE,
            c.d_model ** -0.5)
        par("head.out", (c.d_model, patch_out), STAGE_BACKBONE,
            0.1 * c.d_model ** -0.5)
        par("head.bias", (patch_out,), STAGE_BACKBONE, 0.0)

        # schedule-derived preconditioning, pure architecture: an identity
        # skip carries the noise-linear part of the prediction at gain
        # 1/sqrt(1-ab_t), and the head output is scaled to the magnitude
        # of the conditional term, sqrt(ab_t)/sqrt(1-ab_t), so the network
        # regresses an O(1) target at every step
        alpha_bars = df.make_schedule(
            c.diffusion_steps, c.beta_start, c.beta_end).alpha_bars
        self._skip_scale = 1.0 / np.sqrt(1.0 - alpha_bars)
        self._head_scale = np.sqrt(alpha_bars) / np.sqrt(1.0 - alpha_bars)

        self.blocks: list[dict] = []
        for b in range(c.n_blocks):
            attn = att.AttentionParams(
                par(f"block{b}.attn.w_q", (c.d_model, c.d_model),
                    STAGE_BACKBONE, c.d_model ** -0.5),
                par(f"block{b}.attn.w_k", (c.d_model, c.d_model),
                    STAGE_BACKBONE, c.d_model ** -0.5),
                par(f"block{b}.attn.w_v", (c.d_model, c.d_model),
                    STAGE_BACKBONE, 0.1 * c.d_model ** -0.5),
            )
            mix = par(f"block{b}.mix", (n_tok, n_tok), STAGE_BACKBONE,
                      0.1 * n_tok ** -0.5)
            bank = att.ExpertBank([
                att.ExpertWeights(
                    par(f"block{b}.expert{e}.w_k", (c.n_embed, c.d_model),
                        STAGE_ADAPTER, 1.0),
                    par(f"block{b}.expert{e}.w_v", (c.n_embed, c.d_model),
                        STAGE_ADAPTER, 1.0))
                for e in range(c.expert_count)])
            bank = att.init_experts_from_text(bank, attn)
            # re-register the deep-copied expert tensors
            for e, expert in enumerate(bank.experts):
                self.params[f"block{b}.expert{e}.w_k"] = Parameter(
                    expert.w_k, f"block{b}.expert{e}.w_k", stage=STAGE_ADAPTER)
                self.params[f"block{b}.expert{e}.w_v"] = Parameter(
                    expert.w_v, f"block{b}.expert{e}.w_v", stage=STAGE_ADAPTER)
            self.blocks.append({"attn": attn, "mix": mix, "bank": bank})

        if c.expert_count == tasks.EXPERT_COUNT:
            table, router = att.canonical_routing(
                c.n_embed, temperature=c.router_temperature, seed=c.seed)
        else:
            rng_r = np.random.default_rng(c.seed + 1)
            q, _ = np.linalg.qr(rng_r.normal(
                size=(max(c.n_embed, len(tasks.ALL_TASKS)),) * 2))
            emb = q[:c.n_embed, :len(tasks.ALL_TASKS)].T.copy()
            table = att.TaskEmbeddingTable(from_array(emb), tasks.ALL_TASKS)
            router = att.Router(zeros([c.n_embed, c.expert_count]),
                                temperature=c.router_temperature)
        router.top1 = c.router_top1
        self.task_table = table
        self.router = router
        self.params["task.table"] = Parameter(
            table.table, "task.table", stage=STAGE_ADAPTER)
        self.params["router.projection"] = Parameter(
            router.projection, "router.projection", stage=STAGE_ADAPTER)

        self.projector = VisualPromptProjector(
            par("projector.w", (c.z_v_width, c.visual_tokens * c.n_embed),
                STAGE_ADAPTER, c.z_v_width ** -0.5),
            c.visual_tokens, c.n_embed)

        self._patch_idx = _patch_permutation(c.image_size, c.patch_size,
                                             2 * c.channels)
        out_idx = _patch_permutation(c.image_size, c.patch_size, c.channels)
        self._unpatch_idx = np.argsort(out_idx)
        self._vocab_index = {w: i for i, w in enumerate(VOCAB)}

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def stage_parameters(self, stage: str) -> list[Parameter]:
        return [p for p in self.params.values() if p.stage == stage]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.tensor.values.copy() for n, p in self.params.items()}

    def encode_text(self, text: str) -> np.ndarray:
        """Deterministic toy tokenizer: lowercase, whitespace split,
        unknown words to the reserved token."""
        ids = [self._vocab_index.get(tok, 0) for tok in tokenize(text)]
        return np.asarray(ids if ids else [0], dtype=np.intp)

    def _text_tokens(self, c_t) -> Tensor:
        if c_t is None:
            # the null conditioning: one all-zero token, which zeroes the
            # text attention branch
            return zeros([1, self.config.d_model])
        ids = np.asarray(c_t, dtype=np.intp)
        d = self.config.d_model
        flat = (ids[:, None] * d + np.arange(d)[None, :]).reshape(-1)
        return take_flat(self.params["embed.text"].tensor, flat,
                         [ids.size, d])

    def make_visual_prompt(self, z_v, task_id: str) -> Tensor:
        """Task-embedding token followed by the projected reference tokens.

        A null reference embeds as a zero vector, so its projected block
        is exactly zero.
        """
        tasks.validate_task(task_id)
        v = self.task_table.embedding(task_id)
        if z_v is None:
            z = zeros([self.config.z_v_width])
        elif isinstance(z_v, Tensor):
            z = z_v
        else:
            z = from_array(np.asarray(z_v, dtype=np.float64))
        if z.size != self.config.z_v_width:
            raise ShapeError(
                f"reference embedding width {z.size}, expected "
                f"{self.config.z_v_width}")
        projected = self.projector.project(z)
        return concat(0, reshape(v, [1, self.config.n_embed]), projected)

    def _visual_tokens(self, c_v, task_id: str) -> Tensor | None:
        if c_v is None:
            return None
        if isinstance(c_v, Tensor) and c_v.values.ndim == 2:
            return c_v
        return self.make_visual_prompt(c_v, task_id)

    def forward(self, z_t: Tensor, t: int, conditions: df.ConditionSet,
                task_id: str) -> Tensor:
        """Predict the noise in ``z_t`` under the given conditioning."""
        tasks.validate_task(task_id)
        c = self.config
        if not 1 <= t <= c.diffusion_steps:
            raise ContractError(f"step {t} outside 1..{c.diffusion_steps}")
        img_shape = (c.image_size, c.image_size, c.channels)
        if z_t.shape != img_shape:
            raise ShapeError(f"z_t shape {z_t.shape}, expected {img_shape}")

        if conditions.c_i is None:
            c_img = zeros(list(img_shape))
        elif isinstance(conditions.c_i, Tensor):
            c_img = self.autoencoder.encode(conditions.c_i)
        else:
            c_img = self.autoencoder.encode(
                from_array(np.asarray(conditions.c_i, dtype=np.float64)))
        if c_img.shape != img_shape:
            raise ShapeError(f"c_i shape {c_img.shape}, expected {img_shape}")

        stacked = concat(2, z_t, c_img)
        tokens = take_flat(stacked, self._patch_idx,
                           [c.tokens_per_image,
                            c.patch_size ** 2 * 2 * c.channels])
        x = matmul(tokens, self.params["embed.patch"].tensor)
        d = c.d_model
        time_row = take_flat(self.params["embed.time"].tensor,
                             np.arange((t - 1) * d, t * d), [d])
        x = add_row(x, time_row)

        text_tokens = self._text_tokens(conditions.c_t)
        visual = self._visual_tokens(conditions.c_v, task_id)
        weights = None
        if visual is not None:
            weights = att.route(self.task_table.embedding(task_id),
                                self.router)

        for block in self.blocks:
            x = add(x, gelu(matmul(block["mix"], x)))
            attended = att.decoupled_attention(
                x, text_tokens, visual, block["attn"], block["bank"], weights)
            x = add(x, attended)

        out = matmul(x, self.params["head.out"].tensor)
        out = add_row(out, self.params["head.bias"].tensor)
        flat = reshape(out, [out.size])
        net = take_flat(flat, self._unpatch_idx, list(img_shape))

        skip = scale(z_t, float(self._skip_scale[t - 1]))
        return add(skip, scale(net, float(self._head_scale[t - 1])))

    def schedule(self) -> df.NoiseSchedule:
        c = self.config
        return df.make_schedule(c.diffusion_steps, c.beta_start, c.beta_end)


def build(config: ModelConfig) -> ToyDenoiser:
    """Deterministic model assembly; same seed, same parameters."""
    return ToyDenoiser(config)


@dataclass
class TrainConfig:
    steps: int = 2000
    learning_rate: float = 1e-4
    batch_size: int = 4
    optimizer: str = "sgd"     # adaptive variant: "adam", off by default
    p_drop_image: float = 0.05
    p_drop_text: float = 0.05
    p_drop_visual: float = 0.05
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        return self


def _run_training(model: ToyDenoiser, dataset: list[df.TrainingExample],
                  tcfg: TrainConfig, trainable_stage: str,
                  force_null_visual: bool, use_dropout: bool) -> list[float]:
    if not dataset:
        raise ConfigError("training dataset is empty")
    tcfg.validate()
    for p in model.parameters():
        p.trainable = p.stage == trainable_stage
        p.tensor.zero_grad()
    schedule = model.schedule()
    rng = np.random.default_rng(tcfg.seed)
    trainable = [p for p in model.parameters() if p.trainable]
    adam = (AdamOptimizer(trainable, tcfg.learning_rate)
            if tcfg.optimizer == "adam" else None)

    # timesteps are drawn from a reshuffled cycle over 1..T: marginally
    # uniform (the same objective), but batch losses stop being dominated
    # by lucky low-t draws, so the loss history is readable
    t_cycle: list[int] = []

    def next_t() -> int:
        if not t_cycle:
            t_cycle.extend(int(v) for v in
                           rng.permutation(np.arange(1, schedule.T + 1)))
        return t_cycle.pop()

    history: list[float] = []
    for _ in range(tcfg.steps):
        batch_losses: list[float] = []
        for _ in range(tcfg.batch_size):
            example = dataset[int(rng.integers(len(dataset)))]
            conditions = example.conditions
            if use_dropout:
                conditions = df.condition_dropout(
                    conditions, tcfg.p_drop_image, tcfg.p_drop_text,
                    tcfg.p_drop_visual, rng)
            if force_null_visual:
                conditions = replace(conditions, c_v=None)
            t = next_t()
            eps = from_array(rng.normal(size=example.x.shape))
            z_t = df.forward_noise(example.x, t, eps, schedule)
            pred = model.forward(z_t, t, conditions, example.task_id)
            diff = sub(eps, pred)
            loss = mean(mul(diff, diff))
            batch_losses.append(loss.item())
            backward(scale(loss, 1.0 / tcfg.batch_size))
        for p in trainable:
            # a dropped condition can disconnect a parameter for one step;
            # that is a zero-gradient step, not a caller error
            if p.tensor.grad is None:
                p.tensor.grad = np.zeros(p.tensor.shape)
        if adam is not None:
            adam.step()
        else:
            optimizer_step(trainable, tcfg.learning_rate)
        for p in model.parameters():
            p.tensor.zero_grad()
        history.append(float(np.mean(batch_losses)))
    return history


def train_stage1(model: ToyDenoiser, dataset: list[df.TrainingExample],
                 tcfg: TrainConfig) -> list[float]:
    """Backbone pre-training: adapters frozen, visual conditioning off,
    image/text conditions randomly omitted for guidance at inference."""
    history = _run_training(model, dataset, tcfg, STAGE_BACKBONE,
                            force_null_visual=True, use_dropout=True)
    model.stages_completed.add("stage1")
    return history


def train_stage2(model: ToyDenoiser, dataset: list[df.TrainingExample],
                 tcfg: TrainConfig) -> list[float]:
    """Task tuning: backbone frozen; experts, router, projector, and task
    embeddings learn with visual conditions active."""
    if "stage1" not in model.stages_completed:
        raise ContractError("stage 2 requires a completed stage-1 model")
    history = _run_training(model, dataset, tcfg, STAGE_ADAPTER,
                            force_null_visual=False, use_dropout=False)
    model.stages_completed.add("stage2")
    return history


def predict_edit_type(instruction: str, client=None,
                      constraints: VerbConstraintSet | None = None
                      ) -> PredictedType:
    """Map an instruction to one of the 25 task identifiers.

    With a text-generation client, the client classifies; otherwise (or on
    transport failure) the per-task verb lexicon decides: a unique match
    wins, anything else falls back to "appearance alter" flagged
    low-confidence.
    """
    if not instruction.strip():
        raise ContractError("instruction must be nonempty")
    if client is not None:
        prompt = (
            "Classify this image-editing instruction into exactly one of "
            "the following types and reply with the type name only: "
            + ", ".join(tasks.ALL_TASKS)
            + f".\nInstruction: {instruction}\nType:")
        try:
            answer = client.generate(prompt, max_tokens=8, temperature=0.0,
                                     seed=0).strip().lower()
            if answer in tasks.TASK_CATEGORY:
                return PredictedType(answer, False, False)
            warnings.warn(f"type client answered {answer!r}; using rules")
        except ProviderError as exc:
            warnings.warn(f"type client failed ({exc}); using rules")

    constraints = constraints or VerbConstraintSet()
    toks = set(tokenize(instruction))
    matches = [task for task in tasks.ALL_TASKS
               if any(v in toks for v in constraints.allowed(task))]
    if len(matches) == 1:
        return PredictedType(matches[0], False, True)
    return PredictedType("appearance alter", True, True)


def edit_image(original: np.ndarray, instruction: str,
               visual_ref_png: bytes | None, model: ToyDenoiser,
               embed_client, scales: df.GuidanceScales, steps: int,
               rng: np.random.Generator, predict_client=None
               ) -> tuple[np.ndarray, PredictedType]:
    """End-to-end edit: predict the task, build the visual prompt, sample.

    Deterministic under the passed generator. A visual reference on a
    non-visual task is honored with a warning; embedder failures surface
    with the instruction context attached.
    """
    if "stage1" not in model.stages_completed:
        raise ContractError("edit_image requires a trained model")
    predicted = predict_edit_type(instruction, predict_client)
    task = predicted.task

    z_v = None
    if visual_ref_png is not None:
        if tasks.TASK_CATEGORY[task] != "visual":
            warnings.warn(
                f"visual reference supplied for non-visual task {task!r}; "
                "the visual prompt is still honored")
        try:
            z_v = embed_client.embed_image(visual_ref_png).values
        except ProviderError as exc:
            raise ProviderError(
                f"reference embedding failed for instruction "
                f"{instruction!r}: {exc}")

    conditions = df.ConditionSet(
        c_i=np.asarray(original, dtype=np.float64),
        c_t=model.encode_text(instruction),
        c_v=model.make_visual_prompt(z_v, task),
    )
    out = df.sample(
        lambda z, t, cond: model.forward(z, t, cond, task),
        conditions, scales, model.schedule(), steps, rng,
        shape=(model.config.image_size, model.config.image_size,
               model.config.channels))
    return np.clip(out.values, 0.0, 1.0), predicted


def save_checkpoint(model: ToyDenoiser, path) -> None:
    """Directory of tensor dumps plus a manifest; bitwise round trip."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in sorted(model.params.items()):
        fname = f"{name}.eftn"
        save_tensor(path / fname, p.tensor)
        entries.append({
            "name": name,
            "shape": list(p.tensor.shape),
            "stage": p.stage,
            "trainable": p.trainable,
            "file": fname,
        })
    manifest = {
        "config": asdict(model.config),
        "config_digest": model.config.digest(),
        "stages_completed": sorted(model.stages_completed),
        "parameters": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(path, expect_config: ModelConfig | None = None
                    ) -> ToyDenoiser:
    """Rebuild a model from a checkpoint directory.

    When ``expect_config`` is given its digest must match the manifest's,
    otherwise the load is refused.
    """
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    config = ModelConfig(**manifest["config"])
    if expect_config is not None and \
            expect_config.digest() != manifest["config_digest"]:
        raise ContractError(
            f"checkpoint digest {manifest['config_digest']} does not match "
            f"the requested configuration {expect_config.digest()}")
    model = build(config)
    for entry in manifest["parameters"]:
        name = entry["name"]
        if name not in model.params:
            raise ContractError(f"unknown parameter {name!r} in checkpoint")
        loaded = load_tensor(path / entry["file"])
        if list(loaded.shape) != entry["shape"]:
            raise ContractError(f"checkpoint shape mismatch for {name!r}")
        model.params[name].tensor.values = loaded.values
        model.params[name].trainable = entry["trainable"]
        model.params[name].stage = entry["stage"]
    model.stages_completed = set(manifest["stages_completed"])
    return model
