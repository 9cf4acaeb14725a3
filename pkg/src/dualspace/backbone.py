"""Vision-transformer backbone adapter.

One forward implementation serves two roles: a deterministic, seeded mock
backbone for CPU tests, and a host for externally converted pretrained
weights (see README for the npz layout). The adapter exposes exactly what the
downstream pipeline needs: the penultimate class-token embedding and the
per-block intermediate activations.

Tap point: by default a block's output is the residual stream after both of
its residual additions, before the next block (``tap_mode="resid"``). The
alternative ``"resid_ln"`` standardizes that stream over the channel axis
(parameter-free layer norm) at the tap; teacher and student always share the
tap definition, which is what the discrepancy features care about.

Extraction is a pure function of (weights, batch): no stochastic layer runs
at extraction time, so repeated calls are bitwise identical and concurrent
batches are safe as long as the weight arrays are not mutated.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
import json
from pathlib import Path

import numpy as np

from . import nn
from .density import FeatureMatrix, SPACE_PRETRAINED

_WEIGHTS_VERSION = 1


# ---------------------------------------------------------------------------
# domain types

@dataclass(frozen=True)
class BackboneSpec:
    """Identity and geometry of a transformer backbone.

    pixel_mean/pixel_std are the per-channel normalization stats of the
    pretraining phase; preprocess() applies them after resizing.
    """

    identifier: str
    num_blocks: int
    embed_dim: int
    patch_size: int
    input_resolution: int
    pixel_mean: tuple[float, float, float]
    pixel_std: tuple[float, float, float]
    num_heads: int = 2
    mlp_ratio: float = 4.0
    tap_mode: str = "resid"

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.input_resolution % self.patch_size != 0:
            raise ValueError(
                f"input_resolution {self.input_resolution} not divisible by "
                f"patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.tap_mode not in ("resid", "resid_ln"):
            raise ValueError(f"unknown tap_mode {self.tap_mode!r}")

    @property
    def grid_size(self) -> int:
        return self.input_resolution // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size ** 2 + 1  # patches + class token


@dataclass
class ImageBatch:
    """Raw or preprocessed images: pixels (n, H, W, C), optional labels, stable ids."""

    pixels: np.ndarray
    ids: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be (n, H, W, C), got shape {self.pixels.shape}")
        n = self.pixels.shape[0]
        if n < 1:
            raise ValueError("empty batch")
        if self.pixels.shape[3] not in (1, 3):
            raise ValueError(f"unsupported channel count {self.pixels.shape[3]}; "
                             "expected 1 or 3")
        self.ids = np.asarray(self.ids)
        if self.ids.shape != (n,):
            raise ValueError("ids must have one entry per sample")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ValueError("labels, when present, must have length n")

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def subset(self, index: np.ndarray, drop_labels: bool = False) -> "ImageBatch":
        labels = None if (drop_labels or self.labels is None) else self.labels[index]
        return ImageBatch(self.pixels[index], self.ids[index], labels)


@dataclass
class BlockOutput:
    block_index: int
    activations: np.ndarray  # (n, T, D)


# ---------------------------------------------------------------------------
# preprocessing

def _resize_bilinear(images: np.ndarray, out_size: int) -> np.ndarray:
    """Separable bilinear resize with half-pixel centers; border-replicating."""
    n, h, w, c = images.shape
    if h == out_size and w == out_size:
        return images

    def axis_params(size_in):
        src = (np.arange(out_size) + 0.5) * (size_in / out_size) - 0.5
        lo = np.floor(src)
        frac = src - lo
        i0 = np.clip(lo, 0, size_in - 1).astype(np.intp)
        i1 = np.clip(lo + 1, 0, size_in - 1).astype(np.intp)
        return i0, i1, frac

    y0, y1, fy = axis_params(h)
    x0, x1, fx = axis_params(w)
    tmp = images[:, y0] * (1.0 - fy)[None, :, None, None] + images[:, y1] * fy[None, :, None, None]
    return tmp[:, :, x0] * (1.0 - fx)[None, None, :, None] + tmp[:, :, x1] * fx[None, None, :, None]


def preprocess(batch: ImageBatch, spec: BackboneSpec) -> ImageBatch:
    """Resize to the backbone's input resolution, replicate grayscale to three
    channels, and normalize by the pretraining pixel stats.

    Always starts from raw pixels in [0, 1]; feeding an already-normalized
    batch back in is a contract violation, not an idempotent no-op.
    """
    px = batch.pixels
    n, h, w, c = px.shape
    if h == 0 or w == 0:
        raise ValueError("zero-area images")
    if c not in (1, 3):
        raise ValueError(f"unsupported channel count {c}; expected 1 or 3")
    if px.min() < -1e-9 or px.max() > 1.0 + 1e-9:
        raise ValueError("preprocess expects raw pixels in [0, 1]")

    if c == 1:
        px = np.repeat(px, 3, axis=3)
    px = _resize_bilinear(px, spec.input_resolution)
    mean = np.asarray(spec.pixel_mean, dtype=np.float64)
    std = np.asarray(spec.pixel_std, dtype=np.float64)
    px = (px - mean) / std
    return ImageBatch(px, batch.ids, batch.labels)


# ---------------------------------------------------------------------------
# the transformer

def _patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    n, r, _, c = pixels.shape
    g = r // patch
    x = pixels.reshape(n, g, patch, g, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(n, g * g, patch * patch * c)


class VitBackbone:
    """Pre-norm ViT over a spec and explicit weight arrays.

    embed_params keys: patch_w (P*P*3, D), patch_b (D,), cls (D,), pos (T, D),
    ln_f_g (D,), ln_f_b (D,). block_params: one `nn` block dict per block.
    """

    def __init__(self, spec: BackboneSpec, embed_params: dict, block_params: list):
        d = spec.embed_dim
        expected = {
            "patch_w": (spec.patch_size ** 2 * 3, d), "patch_b": (d,),
            "cls": (d,), "pos": (spec.num_tokens, d),
            "ln_f_g": (d,), "ln_f_b": (d,),
        }
        for name, shape in expected.items():
            if name not in embed_params or embed_params[name].shape != shape:
                raise ValueError(f"embed param {name!r} missing or not of shape {shape}")
        if len(block_params) != spec.num_blocks:
            raise ValueError(f"expected {spec.num_blocks} block param sets, got {len(block_params)}")
        for j, bp in enumerate(block_params):
            if bp["wq"].shape != (d, d):
                raise ValueError(f"block {j} dimension mismatch with spec embed_dim {d}")
        self.spec = spec
        self.embed_params = embed_params
        self.block_params = block_params

    # -- forward ------------------------------------------------------------

    def _check_preprocessed(self, batch: ImageBatch) -> None:
        n, h, w, c = batch.pixels.shape
        r = self.spec.input_resolution
        if (h, w, c) != (r, r, 3):
            raise ValueError(
                f"batch of shape {(h, w, c)} does not match backbone input "
                f"{(r, r, 3)}; run preprocess() first")

    def _embed(self, pixels: np.ndarray) -> np.ndarray:
        p = self.embed_params
        tokens = _patchify(pixels, self.spec.patch_size) @ p["patch_w"] + p["patch_b"]
        cls = np.broadcast_to(p["cls"], (tokens.shape[0], 1, self.spec.embed_dim))
        return np.concatenate([cls, tokens], axis=1) + p["pos"]

    def _tap(self, stream: np.ndarray) -> np.ndarray:
        if self.spec.tap_mode == "resid_ln":
            return nn.standardize_forward(stream)[0]
        return stream

    def forward_collect(self, pixels: np.ndarray, tap_indices=(), input_indices=(),
                        penultimate: bool = False) -> dict:
        """Single pass collecting, per request: tapped block outputs, raw
        streams entering given blocks, and the penultimate class-token
        embedding (final layer norm, token 0)."""
        taps_wanted = set(tap_indices)
        inputs_wanted = set(input_indices)
        for j in taps_wanted | inputs_wanted:
            if not 0 <= j < self.spec.num_blocks:
                raise IndexError(f"block index {j} out of range [0, {self.spec.num_blocks})")
        last_needed = self.spec.num_blocks - 1 if penultimate else max(
            taps_wanted | inputs_wanted, default=-1)

        out = {"taps": {}, "inputs": {}}
        x = self._embed(pixels)
        for j in range(last_needed + 1):
            if j in inputs_wanted:
                out["inputs"][j] = x
            x = nn.block_forward(x, self.block_params[j], self.spec.num_heads)[0]
            if j in taps_wanted:
                out["taps"][j] = self._tap(x)
        if penultimate:
            final, _ = nn.layer_norm_forward(x, self.embed_params["ln_f_g"],
                                             self.embed_params["ln_f_b"])
            out["penultimate"] = final[:, 0, :]
        return out

    # -- public extraction ops ------------------------------------------------

    def extract_pretrained(self, batch: ImageBatch, split_tag: str = "") -> FeatureMatrix:
        self._check_preprocessed(batch)
        pen = self.forward_collect(batch.pixels, penultimate=True)["penultimate"]
        meta = {"backbone": self.spec.identifier, "split_tag": split_tag}
        return FeatureMatrix(pen, SPACE_PRETRAINED, meta)

    def block_outputs(self, batch: ImageBatch, indices) -> list[BlockOutput]:
        self._check_preprocessed(batch)
        indices = list(indices)
        collected = self.forward_collect(batch.pixels, tap_indices=indices)["taps"]
        return [BlockOutput(j, collected[j]) for j in indices]


# module-level op aliases matching the pipeline vocabulary
def extract_pretrained(batch: ImageBatch, backbone: VitBackbone,
                       split_tag: str = "") -> FeatureMatrix:
    return backbone.extract_pretrained(batch, split_tag)


def block_outputs(batch: ImageBatch, backbone: VitBackbone, indices) -> list[BlockOutput]:
    return backbone.block_outputs(batch, indices)


# ---------------------------------------------------------------------------
# stock specs and factories

MOCK_SPEC = BackboneSpec(
    identifier="mock-vit-4x48",
    num_blocks=4, embed_dim=48, patch_size=8, input_resolution=32,
    pixel_mean=(0.5, 0.5, 0.5), pixel_std=(0.5, 0.5, 0.5),
    num_heads=4, mlp_ratio=4.0,
)

# 12-block geometry for externally converted ViT-B/16 weights (full-run profile)
VIT_B16_SPEC = BackboneSpec(
    identifier="vit-base-patch16-224",
    num_blocks=12, embed_dim=768, patch_size=16, input_resolution=224,
    pixel_mean=(0.5, 0.5, 0.5), pixel_std=(0.5, 0.5, 0.5),
    num_heads=12, mlp_ratio=4.0,
)


def make_mock_backbone(seed: int = 0, spec: BackboneSpec = MOCK_SPEC,
                       weight_std: float = 0.1) -> VitBackbone:
    """Tiny seeded ViT for deterministic CPU tests. weight_std trades token
    mixing against the heavy activation tails a wilder random net produces.

    The seed becomes part of the identifier: different draws are different
    backbones and must never alias each other's cache entries or ensembles.
    """
    spec = replace(spec, identifier=f"{spec.identifier}-s{seed}")
    rng = np.random.default_rng(seed)
    d = spec.embed_dim
    embed = {
        "patch_w": rng.normal(0.0, weight_std, (spec.patch_size ** 2 * 3, d)),
        "patch_b": np.zeros(d),
        "cls": rng.normal(0.0, weight_std, d),
        "pos": rng.normal(0.0, weight_std, (spec.num_tokens, d)),
        "ln_f_g": np.ones(d),
        "ln_f_b": np.zeros(d),
    }
    blocks = [nn.init_block_params(rng, d, spec.num_heads, spec.mlp_ratio, std=weight_std)
              for _ in range(spec.num_blocks)]
    return VitBackbone(spec, embed, blocks)


class IdentityBackbone:
    """Pretrained-features stand-in that flattens pixels (strided down to
    embed_dim entries). Used by tests and ablations that want the raw signal
    without a transformer; it exposes no blocks."""

    def __init__(self, image_size: int = 32, max_dim: int = 192):
        full = image_size * image_size * 3
        dim = min(max_dim, full)
        self.spec = BackboneSpec(
            identifier=f"identity-pixels-{image_size}x{dim}",
            num_blocks=1, embed_dim=dim, patch_size=image_size,
            input_resolution=image_size,
            pixel_mean=(0.5, 0.5, 0.5), pixel_std=(0.5, 0.5, 0.5),
            num_heads=1,
        )
        self._index = (np.arange(dim) * full) // dim

    def extract_pretrained(self, batch: ImageBatch, split_tag: str = "") -> FeatureMatrix:
        flat = batch.pixels.reshape(len(batch), -1)[:, self._index]
        meta = {"backbone": self.spec.identifier, "split_tag": split_tag}
        return FeatureMatrix(flat, SPACE_PRETRAINED, meta)

    def block_outputs(self, batch, indices):
        raise ValueError("identity backbone exposes no transformer blocks")

    def forward_collect(self, *a, **kw):
        raise ValueError("identity backbone exposes no transformer blocks")


# ---------------------------------------------------------------------------
# weights I/O (npz arrays + JSON spec)

def save_backbone(backbone: VitBackbone, prefix) -> None:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    arrays = dict(backbone.embed_params)
    for j, bp in enumerate(backbone.block_params):
        for name, arr in bp.items():
            arrays[f"blk{j:02d}_{name}"] = arr
    np.savez(prefix.with_suffix(".npz"), **arrays)
    spec_doc = {"version": _WEIGHTS_VERSION, "spec": backbone.spec.__dict__}
    prefix.with_suffix(".json").write_text(json.dumps(spec_doc, sort_keys=True, indent=2) + "\n")


def load_backbone(prefix) -> VitBackbone:
    prefix = Path(prefix)
    doc = json.loads(prefix.with_suffix(".json").read_text())
    if doc.get("version") != _WEIGHTS_VERSION:
        raise ValueError(f"unsupported backbone weights version {doc.get('version')}")
    raw = dict(doc["spec"])
    raw["pixel_mean"] = tuple(raw["pixel_mean"])
    raw["pixel_std"] = tuple(raw["pixel_std"])
    spec = BackboneSpec(**raw)
    arrays = np.load(prefix.with_suffix(".npz"))
    embed = {k: arrays[k] for k in ("patch_w", "patch_b", "cls", "pos", "ln_f_g", "ln_f_b")}
    blocks = []
    for j in range(spec.num_blocks):
        blocks.append({name: arrays[f"blk{j:02d}_{name}"] for name in nn.BLOCK_PARAM_NAMES})
    return VitBackbone(spec, embed, blocks)
