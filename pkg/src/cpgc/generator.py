"""Conditional perturbation generators and the universal-perturbation artifact.

Both branches turn a fixed noise seed into a perturbation through a small MLP
with one cross-attention block (queries from the first hidden layer, keys and
values from encoder embeddings of the other modality) wrapped in a residual
connection:

* image branch: z_v (3x3, flattened) -> 256 -> [cross-attn] -> 1024 -> 3072,
  reshaped to 32x32x3 and bounded by ``epsilon_v * tanh``;
* text branch: z_t (1x3) -> 64 -> [cross-attn] -> 64, an embedding in the
  victim's token-embedding space, later projected to a vocabulary word.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from cpgc import autodiff as ad
from cpgc.autodiff import Tensor
from cpgc.corpus import CHANNELS, IMAGE_SIZE, VOCAB_SIZE
from cpgc.errors import ContractError, DegenerateNormError, ShapeError
from cpgc.rng import stream

IMAGE_DIMS = (9, 256, 1024, IMAGE_SIZE * IMAGE_SIZE * CHANNELS)
TEXT_DIMS = (3, 64, 64)
D_ATTN = 16
EPSILON_V = 12 / 255


@dataclass
class NoiseSeed:
    z_v: np.ndarray
    z_t: np.ndarray
    seed: int

    @classmethod
    def draw(cls, seed: int) -> "NoiseSeed":
        rng = stream(seed, "noise-seed")
        return cls(rng.normal(size=(3, 3)), rng.normal(size=(1, 3)), seed)


def cross_attention(h, condition, w_q, w_k, w_v, w_o) -> Tensor:
    """Residual cross-attention: ``h + softmax(Q K^T / sqrt(d_attn)) V W_o``.

    ``h`` is (B, d_alpha) or (1, d_alpha); ``condition`` is (B, M, d) or (M, d)
    and supplies keys and values. Returns (B, d_alpha).
    """
    h = ad.as_tensor(h)
    condition = ad.as_tensor(condition)
    if condition.ndim == 2:
        condition = condition.reshape(1, *condition.shape)
    if h.ndim != 2 or condition.ndim != 3:
        raise ShapeError(f"cross_attention: h (B,d_alpha) and condition (B,M,d) expected, got {h.shape}, {condition.shape}")
    d_alpha, d_attn = w_q.shape
    d = w_k.shape[0]
    if h.shape[1] != d_alpha or condition.shape[2] != d or condition.shape[1] < 1:
        raise ShapeError(f"cross_attention: widths h={h.shape}, condition={condition.shape} "
                         f"do not match W_q {w_q.shape}, W_k {w_k.shape}")
    batch = max(h.shape[0], condition.shape[0])
    if h.shape[0] not in (1, batch) or condition.shape[0] not in (1, batch):
        raise ShapeError(f"cross_attention: batch sizes {h.shape[0]} and {condition.shape[0]} differ")
    q = (h @ w_q).reshape(h.shape[0], 1, d_attn)
    k = condition @ w_k
    v = condition @ w_v
    weights = ad.softmax((q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(d_attn)), axis=-1)
    attended = (weights @ v).reshape(batch, d_attn)
    return h + attended @ w_o


def _init(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)


@dataclass
class PerturbationGenerator:
    """One generator branch (``kind`` is ``"image"`` or ``"text"``)."""

    kind: str
    params: dict[str, Tensor]
    dims: tuple[int, ...]
    cond_dim: int
    use_attention: bool = True

    @classmethod
    def create(cls, kind: str, seed: int, cond_dim: int = 32, use_attention: bool = True,
               dims: tuple[int, ...] | None = None, d_attn: int = D_ATTN) -> "PerturbationGenerator":
        if kind not in ("image", "text"):
            raise ContractError(f"generator kind must be 'image' or 'text', got {kind!r}")
        dims = tuple(dims or (IMAGE_DIMS if kind == "image" else TEXT_DIMS))
        rng = stream(seed, "generator-init", 0 if kind == "image" else 1)
        params: dict[str, np.ndarray] = {}
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            params[f"l{i}.w"] = _init(rng, (a, b))
            params[f"l{i}.b"] = np.zeros(b)
        d_alpha = dims[1]
        attn = {"attn.w_q": _init(rng, (d_alpha, d_attn)), "attn.w_k": _init(rng, (cond_dim, d_attn)),
                "attn.w_v": _init(rng, (cond_dim, d_attn)), "attn.w_o": _init(rng, (d_attn, d_alpha))}
        if use_attention:
            params.update(attn)
        tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
        return cls(kind, tensors, dims, cond_dim, use_attention)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def digest(self) -> str:
        return ad.tensors_digest({k: v.data for k, v in self.params.items()})

    def zero_output_layer(self) -> None:
        last = len(self.dims) - 2
        self.params[f"l{last}.w"].data[...] = 0.0
        self.params[f"l{last}.b"].data[...] = 0.0

    def forward(self, z: np.ndarray, condition=None) -> Tensor:
        """Raw network output, (B, dims[-1]); B is the condition's batch size (1 without attention)."""
        p = self.params
        n_layers = len(self.dims) - 1
        h = Tensor(np.asarray(z, dtype=np.float64).reshape(1, -1))
        for i in range(n_layers):
            h = h @ p[f"l{i}.w"] + p[f"l{i}.b"]
            if i == n_layers - 1:
                break
            h = ad.tanh(h)
            if i == 0 and self.use_attention:
                if condition is None:
                    raise ContractError("attention generator needs a condition")
                h = cross_attention(h, condition, p["attn.w_q"], p["attn.w_k"], p["attn.w_v"], p["attn.w_o"])
        return h


def generate_image_uap(noise: NoiseSeed, condition, generator: PerturbationGenerator,
                       epsilon_v: float = EPSILON_V) -> Tensor:
    """delta_v = epsilon_v * tanh(G(z_v; condition)), shape (B,32,32,3); |delta_v| <= epsilon_v everywhere."""
    if epsilon_v <= 0:
        raise ContractError("epsilon_v must be positive")
    raw = generator.forward(noise.z_v, condition)
    return (ad.tanh(raw) * epsilon_v).reshape(raw.shape[0], IMAGE_SIZE, IMAGE_SIZE, CHANNELS)


def generate_text_uap(noise: NoiseSeed, condition, generator: PerturbationGenerator) -> Tensor:
    """Adversarial token embedding(s), shape (B, 64), conditioned on image embedding(s)."""
    cond = ad.as_tensor(condition)
    if cond.ndim == 1:
        cond = cond.reshape(1, 1, cond.shape[0])
    elif cond.ndim == 2:
        cond = cond.reshape(cond.shape[0], 1, cond.shape[1])
    return generator.forward(noise.z_t, cond)


def project_to_vocab(adv_embedding, table: np.ndarray) -> int:
    """Token id whose embedding row has the highest cosine with ``adv_embedding`` (lowest id on ties)."""
    e = np.asarray(adv_embedding.data if isinstance(adv_embedding, Tensor) else adv_embedding,
                   dtype=np.float64).reshape(-1)
    n = np.linalg.norm(e)
    if n < 1e-12:
        raise DegenerateNormError("cannot project a zero embedding to the vocabulary")
    rows = np.asarray(table, dtype=np.float64)
    row_norms = np.linalg.norm(rows, axis=1)
    cos = (rows @ e) / (np.where(row_norms > 0, row_norms, 1.0) * n)
    return int(np.argmax(cos))


# -- artifact ----------------------------------------------------------------

@dataclass
class UapArtifact:
    """One universal image perturbation plus (optionally) one universal adversarial word."""

    delta_v: np.ndarray
    adversarial_word: int | None
    epsilon_v: float = EPSILON_V
    epsilon_t: int = 1
    method: str = "cpgc"
    surrogate_id: str = ""
    surrogate_digest: str = ""
    config: dict[str, Any] = field(default_factory=dict)
    generator_ref: str = ""

    @classmethod
    def null(cls) -> "UapArtifact":
        return cls(np.zeros((IMAGE_SIZE, IMAGE_SIZE, CHANNELS)), None, method="null")

    def check_budget(self) -> None:
        """Raise if the image perturbation exceeds its L-inf budget or the word is out of vocabulary."""
        if self.delta_v.shape != (IMAGE_SIZE, IMAGE_SIZE, CHANNELS):
            raise ShapeError(f"delta_v has shape {self.delta_v.shape}")
        peak = float(np.max(np.abs(self.delta_v)))
        if not peak <= self.epsilon_v:
            raise ContractError(f"||delta_v||_inf = {peak!r} exceeds budget {self.epsilon_v!r}")
        if self.epsilon_t != 1:
            raise ContractError("only single-word text perturbations are supported (epsilon_t = 1)")
        if self.adversarial_word is not None and not 0 <= self.adversarial_word < VOCAB_SIZE:
            raise ContractError(f"adversarial word {self.adversarial_word} outside vocabulary")

    def save(self, stem: str | Path) -> Path:
        self.check_budget()
        meta = {"kind": "uap_artifact", "method": self.method, "epsilon_v": self.epsilon_v,
                "epsilon_t": self.epsilon_t, "adversarial_word": self.adversarial_word,
                "surrogate_id": self.surrogate_id, "surrogate_digest": self.surrogate_digest,
                "generator_ref": self.generator_ref, "config": self.config,
                "delta_v_linf": float(np.max(np.abs(self.delta_v)))}
        return ad.save_checkpoint(stem, {"delta_v": self.delta_v}, meta)

    @classmethod
    def load(cls, stem: str | Path) -> "UapArtifact":
        tensors, meta = ad.load_checkpoint(stem)
        if meta.get("kind") != "uap_artifact":
            raise ContractError(f"{stem}: not a UAP artifact")
        art = cls(tensors["delta_v"], meta["adversarial_word"], meta["epsilon_v"], meta["epsilon_t"],
                  meta["method"], meta["surrogate_id"], meta["surrogate_digest"], meta["config"],
                  meta["generator_ref"])
        art.check_budget()
        return art


def save_generators(stem: str | Path, noise: NoiseSeed, generators: dict[str, PerturbationGenerator],
                    metadata: dict[str, Any] | None = None) -> Path:
    tensors = {"noise.z_v": noise.z_v, "noise.z_t": noise.z_t}
    layout = {}
    for branch, gen in generators.items():
        layout[branch] = {"dims": list(gen.dims), "cond_dim": gen.cond_dim, "use_attention": gen.use_attention}
        tensors.update({f"{branch}.{k}": v.data for k, v in gen.params.items()})
    meta = {"kind": "generators", "noise_seed": noise.seed, "layout": layout, **(metadata or {})}
    return ad.save_checkpoint(stem, tensors, meta)


def load_generators(stem: str | Path) -> tuple[NoiseSeed, dict[str, PerturbationGenerator]]:
    tensors, meta = ad.load_checkpoint(stem)
    noise = NoiseSeed(tensors["noise.z_v"], tensors["noise.z_t"], meta["noise_seed"])
    gens = {}
    for branch, lay in meta["layout"].items():
        prefix = f"{branch}."
        params = {k[len(prefix):]: Tensor(v, name=k[len(prefix):]) for k, v in tensors.items() if k.startswith(prefix)}
        gens[branch] = PerturbationGenerator(branch, params, tuple(lay["dims"]), lay["cond_dim"], lay["use_attention"])
    return noise, gens
