"""Toy dual-stream image/text encoders, contrastive pre-training and retrieval."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from cpgc import autodiff as ad
from cpgc.autodiff import Tape, Tensor
from cpgc.corpus import CHANNELS, IMAGE_SIZE, MAX_CAPTION_LEN, VOCAB_SIZE, Corpus, Split
from cpgc.errors import ContractError, DomainError, ShapeError, TrainingFailure
from cpgc.rng import stream

log = logging.getLogger(__name__)

ARCH_KINDS = ("mean_pool", "max_pool")
PATCH = 4
N_PATCHES = (IMAGE_SIZE // PATCH) ** 2
PATCH_DIM = PATCH * PATCH * CHANNELS
HIDDEN = 64
TOKEN_DIM = 64
EMBED_DIM = 32

# name -> (shape, init std as a function of fan-in; None means zeros)
_PARAM_SPECS = {
    "img.patch_w": ((PATCH_DIM, HIDDEN), "fan_in"),
    "img.patch_b": ((HIDDEN,), None),
    "img.pos": ((N_PATCHES, HIDDEN), 1.0),
    "img.h1_w": ((HIDDEN, HIDDEN), "fan_in"),
    "img.h1_b": ((HIDDEN,), None),
    "img.h2_w": ((HIDDEN, HIDDEN), "fan_in"),
    "img.h2_b": ((HIDDEN,), None),
    "img.proj_w": ((HIDDEN, EMBED_DIM), "fan_in"),
    "txt.table": ((VOCAB_SIZE, TOKEN_DIM), 1.0),
    "txt.h1_w": ((TOKEN_DIM, HIDDEN), "fan_in"),
    "txt.h1_b": ((HIDDEN,), None),
    "txt.h2_w": ((HIDDEN, HIDDEN), "fan_in"),
    "txt.h2_b": ((HIDDEN,), None),
    "txt.proj_w": ((HIDDEN, EMBED_DIM), "fan_in"),
}


@dataclass
class DualEncoderModel:
    params: dict[str, Tensor]
    arch_kind: str
    seed: int
    d: int = EMBED_DIM
    corpus_digest: str = ""

    @property
    def model_id(self) -> str:
        return f"{self.arch_kind}-s{self.seed}"

    @property
    def token_table(self) -> np.ndarray:
        return self.params["txt.table"].data

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def digest(self) -> str:
        return ad.tensors_digest({k: v.data for k, v in self.params.items()})

    def freeze(self) -> "DualEncoderModel":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    # -- image stream ------------------------------------------------------
    def encode_images(self, images) -> Tensor:
        """(n,32,32,3) images -> (n,d) unit embeddings. Inputs are clamped to [0,1]."""
        x = ad.as_tensor(images)
        if x.ndim != 4 or x.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, CHANNELS):
            raise ShapeError(f"expected images of shape (n,32,32,3), got {x.shape}")
        n = x.shape[0]
        g = IMAGE_SIZE // PATCH
        p = self.params
        x = ad.clamp(x, 0.0, 1.0)
        x = x.reshape(n, g, PATCH, g, PATCH, CHANNELS).transpose(0, 1, 3, 2, 4, 5)
        x = x.reshape(n * N_PATCHES, PATCH_DIM)
        h = (x @ p["img.patch_w"]).reshape(n, N_PATCHES, HIDDEN) + p["img.patch_b"] + p["img.pos"]
        h = ad.tanh(h).reshape(n * N_PATCHES, HIDDEN)
        h = ad.tanh(h @ p["img.h1_w"] + p["img.h1_b"])
        h = ad.tanh(h @ p["img.h2_w"] + p["img.h2_b"]).reshape(n, N_PATCHES, HIDDEN)
        pooled = ad.mean(h, axis=1) if self.arch_kind == "mean_pool" else ad.tmax(h, axis=1)
        return ad.l2_normalize(pooled @ p["img.proj_w"], axis=-1)

    # -- text stream -------------------------------------------------------
    def pool_tokens(self, tokens, lengths) -> Tensor:
        """Mean of token-embedding rows over each caption's valid positions: (n,L) -> (n,64)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        if tokens.ndim != 2 or lengths.shape != tokens.shape[:1]:
            raise ShapeError(f"tokens (n,L) and lengths (n,) expected, got {tokens.shape}, {lengths.shape}")
        if np.any(lengths < 1) or np.any(lengths > tokens.shape[1]) or tokens.shape[1] > MAX_CAPTION_LEN:
            raise ContractError(f"caption lengths must lie in [1, {MAX_CAPTION_LEN}]")
        valid = np.arange(tokens.shape[1])[None, :] < lengths[:, None]
        if np.any((tokens < 0) | (tokens >= VOCAB_SIZE)):
            raise DomainError(f"token id outside vocabulary of {VOCAB_SIZE}")
        weights = valid / lengths[:, None]
        rows = ad.take_rows(self.params["txt.table"], tokens)
        return (rows * weights[:, :, None]).sum(axis=1)

    def text_head(self, pooled) -> Tensor:
        """(n,64) pooled token embeddings -> (n,d) unit embeddings."""
        p = self.params
        h = ad.tanh(ad.as_tensor(pooled) @ p["txt.h1_w"] + p["txt.h1_b"])
        h = ad.tanh(h @ p["txt.h2_w"] + p["txt.h2_b"])
        return ad.l2_normalize(h @ p["txt.proj_w"], axis=-1)

    def encode_tokens(self, tokens, lengths) -> Tensor:
        return self.text_head(self.pool_tokens(tokens, lengths))

    def embed_split(self, split: Split) -> tuple[np.ndarray, np.ndarray]:
        """Constant embeddings for a whole split: images (n,d), captions (n*m,d)."""
        toks, lens, _ = split.flat_captions()
        return self.encode_images(split.images).data, self.encode_tokens(toks, lens).data


def encode_image(model: DualEncoderModel, image) -> Tensor:
    x = ad.as_tensor(image)
    if x.shape != (IMAGE_SIZE, IMAGE_SIZE, CHANNELS):
        raise ShapeError(f"expected a 32x32x3 image, got {x.shape}")
    return model.encode_images(x.reshape(1, IMAGE_SIZE, IMAGE_SIZE, CHANNELS))[0]


def encode_text(model: DualEncoderModel, tokens: Sequence[int]) -> Tensor:
    tokens = list(tokens)
    if not 1 <= len(tokens) <= MAX_CAPTION_LEN:
        raise ContractError(f"caption length must be in [1, {MAX_CAPTION_LEN}], got {len(tokens)}")
    return model.encode_tokens(np.array([tokens]), np.array([len(tokens)]))[0]


def init_model(arch_kind: str, seed: int) -> DualEncoderModel:
    if arch_kind not in ARCH_KINDS:
        raise ContractError(f"arch_kind must be one of {ARCH_KINDS}, got {arch_kind!r}")
    rng = stream(seed, "encoder-init", ARCH_KINDS.index(arch_kind))
    params = {}
    for name, (shape, std) in _PARAM_SPECS.items():
        if std is None:
            arr = np.zeros(shape)
        else:
            scale = 1.0 / np.sqrt(shape[0]) if std == "fan_in" else std
            arr = rng.normal(0.0, scale, size=shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return DualEncoderModel(params, arch_kind, seed)


# -- retrieval ---------------------------------------------------------------

def rank_retrieval(query: np.ndarray, gallery: np.ndarray, k: int | None = None) -> np.ndarray:
    """Gallery indices by descending cosine similarity, ties by ascending index.

    ``query`` may be one vector (d,) or a batch (q,d); rows are ranked independently.
    """
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.ndim != 2 or len(gallery) == 0:
        raise ContractError("gallery must be a non-empty (n,d) array")
    single = query.ndim == 1
    q = query[None] if single else query
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    gn = gallery / np.linalg.norm(gallery, axis=1, keepdims=True)
    order = np.argsort(-(qn @ gn.T), axis=1, kind="stable")
    if k is not None:
        order = order[:, :k]
    return order[0] if single else order


def topk_hits(query_emb, gallery_emb, query_classes, gallery_classes, k: int) -> np.ndarray:
    """Per query: does any of the top-k gallery items share the query's attribute class?"""
    top = rank_retrieval(query_emb, gallery_emb, k)
    return np.any(np.asarray(gallery_classes)[top] == np.asarray(query_classes)[:, None], axis=1)


def retrieval_recall(model: DualEncoderModel, split: Split, k: int = 1) -> dict[str, float]:
    """Class-level R@k for text retrieval (image query) and image retrieval (caption query)."""
    img, txt = model.embed_split(split)
    cap_cls = np.repeat(split.class_ids, split.m)
    tr = topk_hits(img, txt, split.class_ids, cap_cls, k).mean()
    ir = topk_hits(txt, img, cap_cls, split.class_ids, k).mean()
    return {"TR": float(tr), "IR": float(ir)}


# -- pre-training ------------------------------------------------------------

def _contrastive_targets(classes: np.ndarray) -> np.ndarray:
    same = (classes[:, None] == classes[None, :]).astype(np.float64)
    return same / same.sum(axis=1, keepdims=True)


def pretrain_dual_encoder(corpus: Corpus, arch_kind: str, seed: int, epochs: int = 80, batch: int = 64,
                          temperature: float = 0.07, learning_rate: float = 5e-3) -> DualEncoderModel:
    """Symmetric in-batch contrastive training (image->text and text->image cross-entropy).

    Items of the same attribute class inside a batch share the target mass,
    so duplicate classes are not treated as negatives.
    """
    train = corpus.train
    if len(train) == 0:
        raise ContractError("empty training split")
    model = init_model(arch_kind, seed)
    opt = ad.Adam(model.parameters(), learning_rate=learning_rate)
    n = len(train)
    steps_per_epoch = -(-n // batch)
    total_steps = epochs * steps_per_epoch
    step = 0
    for epoch in range(epochs):
        rng = stream(seed, "encoder-batches", ARCH_KINDS.index(arch_kind), epoch)
        order = rng.permutation(n)
        cap_pick = rng.integers(0, train.m, size=n)
        total, steps = 0.0, 0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            if len(idx) < 2:
                continue
            toks = train.tokens[idx, cap_pick[idx]]
            lens = train.lengths[idx, cap_pick[idx]]
            targets = _contrastive_targets(train.class_ids[idx])
            # cosine decay to zero over the whole run
            opt.state.learning_rate = 0.5 * learning_rate * (1 + np.cos(np.pi * step / total_steps))
            step += 1
            opt.zero_grad()
            with Tape() as tape:
                ev = model.encode_images(train.images[idx])
                et = model.encode_tokens(toks, lens)
                logits = (ev @ et.T) * (1.0 / temperature)
                i2t = -(ad.log_softmax(logits, axis=1) * targets).sum() * (1.0 / len(idx))
                t2i = -(ad.log_softmax(logits.T, axis=1) * targets).sum() * (1.0 / len(idx))
                loss = (i2t + t2i) * 0.5
            if not np.isfinite(loss.item()):
                raise TrainingFailure(f"pre-training {arch_kind}/seed {seed} diverged", steps)
            tape.backward(loss)
            opt.step()
            total += loss.item()
            steps += 1
        log.debug("pretrain %s-s%d epoch %d loss %.4f", arch_kind, seed, epoch, total / max(steps, 1))
    model.corpus_digest = corpus.manifest.digest
    return model.freeze()


# -- persistence -------------------------------------------------------------

def save_model(model: DualEncoderModel, stem: str | Path) -> Path:
    meta = {"kind": "dual_encoder", "arch_kind": model.arch_kind, "d": model.d,
            "seed": model.seed, "corpus_digest": model.corpus_digest, "model_digest": model.digest()}
    return ad.save_checkpoint(stem, {k: v.data for k, v in model.params.items()}, meta)


def load_model(stem: str | Path) -> DualEncoderModel:
    tensors, meta = ad.load_checkpoint(stem)
    if meta.get("kind") != "dual_encoder":
        raise ContractError(f"{stem}: not a dual-encoder checkpoint")
    params = {k: Tensor(v, name=k) for k, v in tensors.items()}
    return DualEncoderModel(params, meta["arch_kind"], meta["seed"], meta["d"], meta["corpus_digest"])


@dataclass
class ModelZoo:
    surrogate: DualEncoderModel
    targets: list[DualEncoderModel] = field(default_factory=list)

    def __post_init__(self):
        if all(t is not self.surrogate for t in self.targets):
            self.targets.insert(0, self.surrogate)

    def is_white_box(self, model: DualEncoderModel) -> bool:
        return model is self.surrogate or model.digest() == self.surrogate.digest()

    @property
    def black_box(self) -> list[DualEncoderModel]:
        return [t for t in self.targets if t is not self.surrogate]
