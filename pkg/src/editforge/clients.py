"""Pluggable provider clients and their deterministic local stubs.

Remote providers are plain JSON-over-POST endpoints configured through
environment variables; whenever a URL is unset the deterministic stub is
used instead, so every pipeline runs offline and reproducibly.

Stub embedding property (documented contract): identical inputs map to
identical vectors. Text embeddings are hash-seeded bag-of-token
projections; image embeddings are seeded projections of downsampled
pixels, blended with the text features of the image's ``stub-caption``
PNG metadata when present, which is how fixture triplets get CLIP-like
cross-modal alignment without a real encoder.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import images as im
from .errors import ContractError, ProviderError
from .filters import EmbeddingVector
from .instructions import stub_response, tokenize

ENV_TEXTGEN = "EF_TEXTGEN_URL"
ENV_EMBED = "EF_EMBED_URL"
ENV_EMBED2 = "EF_EMBED2_URL"
ENV_DETECT = "EF_DETECT_URL"
ENV_VLM = "EF_VLM_URL"
ENV_IMAGEOP = "EF_IMAGEOP_URL"


def _post_json(url: str, payload: dict, timeout: float = 30.0) -> dict:
    data = json.dumps(payload).encode()
    req = urllib.request.Request(
        url, data=data, headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return json.loads(resp.read().decode())
    except (urllib.error.URLError, OSError, TimeoutError,
            json.JSONDecodeError) as exc:
        raise ProviderError(f"POST {url} failed: {exc}")


def _b64(blob: bytes) -> str:
    return base64.b64encode(blob).decode()


class RemoteTextGen:
    def __init__(self, base_url: str):
        self.base_url = base_url.rstrip("/")

    def generate(self, prompt: str, max_tokens: int = 256,
                 temperature: float = 0.0, seed: int = 0) -> str:
        out = _post_json(f"{self.base_url}/generate", {
            "prompt": prompt, "max_tokens": max_tokens,
            "temperature": temperature, "seed": seed})
        return out["text"]


class StubTextGen:
    """Prompt-format-aware offline agent.

    Reads the task from the task-description block and the caption from
    the trailing user turn, then answers with the deterministic template
    response.
    """

    def generate(self, prompt: str, max_tokens: int = 256,
                 temperature: float = 0.0, seed: int = 0) -> str:
        task_match = re.search(r"an instruction for (.+?) editing", prompt)
        caption_matches = re.findall(r"User input: (.*)", prompt)
        if not task_match or not caption_matches:
            raise ProviderError("stub agent cannot read the prompt")
        return stub_response(task_match.group(1), caption_matches[-1], seed)


class RemoteEmbedder:
    def __init__(self, base_url: str):
        self.base_url = base_url.rstrip("/")

    def embed_text(self, text: str) -> EmbeddingVector:
        out = _post_json(f"{self.base_url}/embed/text", {"text": text})
        return EmbeddingVector(np.asarray(out["vector"]), out["provider_tag"])

    def embed_image(self, png: bytes) -> EmbeddingVector:
        out = _post_json(f"{self.base_url}/embed/image", {"image": _b64(png)})
        return EmbeddingVector(np.asarray(out["vector"]), out["provider_tag"])


class StubEmbedder:
    def __init__(self, tag: str = "stub-joint", width: int = 32):
        self.tag = tag
        self.width = width
        rng = self._rng("pixel-projection")
        self._pixel_proj = rng.normal(size=(width, 8 * 8 * 3))

    def _rng(self, *parts) -> np.random.Generator:
        digest = hashlib.sha256(
            "|".join([self.tag, *parts]).encode()).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "big"))

    def _token_vector(self, token: str) -> np.ndarray:
        v = self._rng("token", token).normal(size=self.width)
        return v / np.linalg.norm(v)

    def _text_features(self, text: str) -> np.ndarray:
        toks = tokenize(text)
        if not toks:
            return np.zeros(self.width)
        total = np.zeros(self.width)
        for t in toks:
            total += self._token_vector(t)
        norm = np.linalg.norm(total)
        return total / norm if norm > 0 else total

    def _pixel_features(self, arr: np.ndarray) -> np.ndarray:
        u8 = (np.clip(arr, 0, 1) * 255).round().astype(np.uint8)
        small = np.asarray(
            Image.fromarray(u8, "RGB").resize((8, 8), Image.BILINEAR),
            dtype=np.float64) / 255.0
        # centering removes the shared brightness component so that
        # structurally unrelated images score near zero
        flat = small.reshape(-1)
        v = self._pixel_proj @ (flat - flat.mean())
        norm = np.linalg.norm(v)
        return v / norm if norm > 0 else v

    def embed_text(self, text: str) -> EmbeddingVector:
        return EmbeddingVector(self._text_features(text), self.tag)

    def embed_image(self, png: bytes) -> EmbeddingVector:
        meta = im.png_meta(png)
        caption = meta.get("stub-caption")
        if caption and meta.get("stub-pure") == "1":
            # an image this stub rendered from a caption embeds exactly
            # as that caption does
            return self.embed_text(caption)
        arr = im.decode_png(png)
        feats = self._pixel_features(arr)
        if caption:
            feats = 0.7 * self._text_features(caption) + 0.3 * feats
            norm = np.linalg.norm(feats)
            if norm > 0:
                feats = feats / norm
        return EmbeddingVector(feats, self.tag)

    def render_caption(self, caption: str) -> bytes:
        """A deterministic image standing in for a rendering of the caption."""
        rng = self._rng("render", caption)
        arr = rng.uniform(size=(16, 16, 3))
        return im.encode_png(arr, {"stub-caption": caption, "stub-pure": "1"})


class RemoteDetector:
    def __init__(self, base_url: str):
        self.base_url = base_url.rstrip("/")

    def detect(self, obj: str, png: bytes) -> bool:
        out = _post_json(f"{self.base_url}/detect",
                         {"object": obj, "image": _b64(png)})
        return bool(out["present"])


class StubDetector:
    """Presence from PNG metadata: the object must appear in the
    ``stub-objects`` list or the ``stub-caption`` text."""

    def detect(self, obj: str, png: bytes) -> bool:
        meta = im.png_meta(png)
        objects = {o.strip().lower()
                   for o in meta.get("stub-objects", "").split(",") if o.strip()}
        if obj.strip().lower() in objects:
            return True
        return obj.strip().lower() in meta.get("stub-caption", "").lower()


class RemoteVlm:
    def __init__(self, base_url: str):
        self.base_url = base_url.rstrip("/")

    def confirm_change(self, instruction: str, original_png: bytes,
                       edited_png: bytes) -> bool:
        out = _post_json(f"{self.base_url}/vlm", {
            "instruction": instruction,
            "original": _b64(original_png),
            "edited": _b64(edited_png)})
        return bool(out["changed"])


class StubVlm:
    def confirm_change(self, instruction: str, original_png: bytes,
                       edited_png: bytes) -> bool:
        a, b = im.decode_png(original_png), im.decode_png(edited_png)
        if a.shape != b.shape or not np.array_equal(a, b):
            return True
        meta_a, meta_b = im.png_meta(original_png), im.png_meta(edited_png)
        return meta_a.get("stub-caption") != meta_b.get("stub-caption")


class RemoteImageOp:
    def __init__(self, base_url: str):
        self.base_url = base_url.rstrip("/")

    def apply(self, op: str, pngs: list[bytes], params: dict) -> bytes:
        out = _post_json(f"{self.base_url}/imageop", {
            "op": op, "images": [_b64(p) for p in pngs], "params": params})
        return base64.b64decode(out["image"])


class StubImageOp:
    """Deterministic color-fill edits standing in for generative backends."""

    def apply(self, op: str, pngs: list[bytes], params: dict) -> bytes:
        meta = params.get("meta")
        if op == "color_fill":
            image = im.decode_png(pngs[0])
            mask = self._mask(pngs[1], image.shape[:2])
            color = np.asarray(params["color"], dtype=np.float64)
            out = np.where(mask[..., None] >= 0.5, color, image)
        elif op == "inpaint_mean":
            image = im.decode_png(pngs[0])
            mask = self._mask(pngs[1], image.shape[:2])
            keep = mask < 0.5
            fill = (image[keep].reshape(-1, 3).mean(axis=0)
                    if keep.any() else np.full(3, 0.5))
            out = np.where(mask[..., None] >= 0.5, fill, image)
        elif op == "tone_scale":
            image = im.decode_png(pngs[0])
            out = np.clip(image * np.asarray(params["gains"]), 0.0, 1.0)
        else:
            raise ContractError(f"unknown image operation {op!r}")
        return im.encode_png(out, meta)

    @staticmethod
    def _mask(png: bytes, shape: tuple[int, int]) -> np.ndarray:
        import io

        with Image.open(io.BytesIO(png)) as m:
            arr = np.asarray(m.convert("L"), dtype=np.float64) / 255.0
        if arr.shape != shape:
            raise ContractError(f"mask {arr.shape} does not fit image {shape}")
        return arr


@dataclass
class ProviderSet:
    textgen: object
    embed: object
    embed2: object
    detect: object
    vlm: object
    imageop: object


def providers_from_env(stub_only: bool = False) -> ProviderSet:
    """Build the provider set, falling back to stubs for unset URLs."""

    def pick(env: str, remote_cls, stub):
        url = os.environ.get(env, "")
        if stub_only or not url:
            return stub
        return remote_cls(url)

    return ProviderSet(
        textgen=pick(ENV_TEXTGEN, RemoteTextGen, StubTextGen()),
        embed=pick(ENV_EMBED, RemoteEmbedder, StubEmbedder("stub-joint")),
        embed2=pick(ENV_EMBED2, RemoteEmbedder, StubEmbedder("stub-visual")),
        detect=pick(ENV_DETECT, RemoteDetector, StubDetector()),
        vlm=pick(ENV_VLM, RemoteVlm, StubVlm()),
        imageop=pick(ENV_IMAGEOP, RemoteImageOp, StubImageOp()),
    )
