"""C-PGC training: malicious contrastive objective, farthest-positive selection,
set-level augmentation, and single-word text substitution.

The image trainer follows the per-iteration procedure: perturb the clean
image, augment clean and adversarial images into N-sets (multi-scale resize +
Gaussian noise), pick the candidate caption set farthest from the clean image
as positives, use the matched captions as negatives, and step the generator on
``L_CL + lambda * L_Dis``. The text trainer mirrors it with the roles of the
modalities swapped.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from cpgc import autodiff as ad
from cpgc.autodiff import Tape, Tensor
from cpgc.corpus import CHANNELS, IMAGE_SIZE, MASK_ID, VOCAB_SIZE, Corpus, Split
from cpgc.encoders import DualEncoderModel
from cpgc.errors import ContractError, TrainingFailure
from cpgc.generator import (EPSILON_V, NoiseSeed, PerturbationGenerator, UapArtifact, generate_image_uap,
                            generate_text_uap, project_to_vocab)
from cpgc.rng import stream

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_CL", "no_Dis", "random_positives", "no_cross_attention")
LOSS_MODES = ("infonce", "mse", "cos")
ORDERS = ("add_then_augment", "augment_then_add")
REFERENCE_RULES = ("best_of_set", "mean_condition")


@dataclass
class AttackConfig:
    epsilon_v: float = EPSILON_V
    epsilon_t: int = 1
    scales: tuple[float, ...] = (0.5, 0.75, 1.0, 1.25, 1.5)
    noise_sigma: float = 0.5
    tau: float = 0.1
    lam: float = 0.1
    K: int = 3
    B: int = 8
    epochs: int = 40
    learning_rate: float = 2e-4
    seed: int = 0
    # pairs per generator update; 1 reproduces one-pair-per-iteration sampling
    batch_pairs: int = 1
    # cap on updates per epoch (None: a full pass over the training split)
    steps_per_epoch: int | None = None
    variant: str = "full"
    loss_mode: str = "infonce"
    perturb_order: str = "add_then_augment"
    reference_size: int = 32
    reference_rule: str = "best_of_set"
    train_text: bool = True

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        problems = []
        if not self.epsilon_v > 0:
            problems.append("epsilon_v must be > 0")
        if self.epsilon_t != 1:
            problems.append("epsilon_t must be 1")
        if not self.tau > 0:
            problems.append("tau must be > 0")
        if self.lam < 0:
            problems.append("lambda must be >= 0")
        if len(self.scales) != 5:
            problems.append("exactly 5 augmentation scales are required")
        if self.K < 1:
            problems.append("K must be >= 1")
        if self.B < 2:
            problems.append("B must be >= 2")
        if self.batch_pairs < 1 or self.epochs < 0:
            problems.append("batch_pairs must be >= 1 and epochs >= 0")
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}")
        if self.loss_mode not in LOSS_MODES:
            problems.append(f"loss_mode must be one of {LOSS_MODES}")
        if self.reference_rule not in REFERENCE_RULES:
            problems.append(f"reference_rule must be one of {REFERENCE_RULES}")
        if self.perturb_order not in ORDERS:
            problems.append(f"perturb_order must be one of {ORDERS}")
        if problems:
            raise ContractError("invalid AttackConfig: " + "; ".join(problems))

    @property
    def N(self) -> int:
        return len(self.scales)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AttackConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown AttackConfig keys: {sorted(unknown)}")
        return cls(**d)


# -- augmentation ------------------------------------------------------------

def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) half-pixel-centred bilinear interpolation matrix."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    m[np.arange(n_out), lo] += 1.0 - w
    m[np.arange(n_out), hi] += w
    return m


@lru_cache(maxsize=None)
def rescale_operator(scale: float, size: int = IMAGE_SIZE) -> np.ndarray:
    """Down/up-sampling round trip ``size -> round(size*scale) -> size`` as one (size, size) matrix."""
    mid = int(round(size * scale))
    op = bilinear_matrix(mid, size) @ bilinear_matrix(size, mid)
    op.setflags(write=False)
    return op


def augment_batch(images, scales: Sequence[float], noise: np.ndarray | None) -> Tensor:
    """Differentiable set augmentation: (B,32,32,3) -> (B,N,32,32,3).

    Each scale resizes every image to ``32*scale`` and back (bilinear), then
    adds ``noise[:, i]`` and clamps to [0, 1].
    """
    x = ad.as_tensor(images)
    b = x.shape[0]
    chw = x.transpose(0, 3, 1, 2)
    outs = []
    for s in scales:
        r = rescale_operator(float(s))
        outs.append(Tensor(r) @ chw @ Tensor(r.T))
    out = ad.stack(outs, axis=1).transpose(0, 1, 3, 4, 2)
    if noise is not None:
        out = out + noise
    return ad.clamp(out, 0.0, 1.0).reshape(b, len(scales), IMAGE_SIZE, IMAGE_SIZE, CHANNELS)


def augment_image_set(image: np.ndarray, scales: Sequence[float], noise_sigma: float, seed: int) -> list[np.ndarray]:
    """N augmented copies of one image (one per scale), deterministic in ``seed``."""
    rng = stream(seed, "augment-noise")
    noise = rng.normal(0.0, noise_sigma, size=(1, len(scales), IMAGE_SIZE, IMAGE_SIZE, CHANNELS)) \
        if noise_sigma > 0 else None
    out = augment_batch(np.asarray(image)[None], scales, noise).data[0]
    return [out[i] for i in range(len(scales))]


# -- positive selection ------------------------------------------------------

def select_farthest(anchor: np.ndarray, candidates: np.ndarray) -> int:
    """Index of the candidate set with the largest mean Euclidean distance to ``anchor``.

    ``anchor`` is (d,); ``candidates`` is (B, M, d). Ties go to the lowest index.
    """
    dist = np.linalg.norm(candidates - anchor[None, None, :], axis=-1).mean(axis=1)
    return int(np.argmax(dist))


def select_farthest_texts(clean_image: np.ndarray, candidate_sets: Sequence[Sequence[Sequence[int]]],
                          model: DualEncoderModel, K: int, matched_set=None) -> tuple[int, list[list[int]]]:
    """Farthest caption set from ``clean_image`` among candidates; returns (index, first K captions).

    When a winner has fewer than K captions, all of them are returned and the
    truncation is logged.
    """
    if len(candidate_sets) < 2:
        raise ContractError("need at least two candidate sets")
    if matched_set is not None:
        matched = {tuple(c) for c in matched_set}
        if any(matched & {tuple(c) for c in cand} for cand in candidate_sets):
            raise ContractError("candidate pool contains the image's own caption set")
    from cpgc.encoders import encode_image, encode_text
    anchor = encode_image(model, clean_image).data
    dists = [np.mean([np.linalg.norm(anchor - encode_text(model, c).data) for c in cand]) for cand in candidate_sets]
    best = int(np.argmax(dists))
    winner = [list(c) for c in candidate_sets[best]]
    if len(winner) < K:
        log.info("farthest set has %d captions < K=%d; using all", len(winner), K)
    return best, winner[:K]


def sample_candidates(rng: np.random.Generator, n: int, exclude: np.ndarray, count: int) -> np.ndarray:
    """(len(exclude), count) indices in [0, n), none equal to its row's excluded index."""
    draws = rng.integers(0, n - 1, size=(len(exclude), count))
    return draws + (draws >= exclude[:, None])


# -- losses ------------------------------------------------------------------

def _batched(t) -> tuple[Tensor, bool]:
    t = ad.as_tensor(t)
    return (t.reshape(1, *t.shape), True) if t.ndim == 2 else (t, False)


def contrastive_loss(anchors, negatives, positives, tau: float) -> Tensor:
    """``log(S_neg / (S_neg + S_pos))`` with ``S = sum exp(cos / tau)`` over anchor x set pairs.

    Inputs are unit-norm embeddings, (n, d) for one sample or (B, n, d) for a
    batch; returns a scalar or a (B,) tensor respectively.
    """
    a, single = _batched(anchors)
    neg, _ = _batched(negatives)
    pos, _ = _batched(positives)
    if neg.shape[1] == 0 or pos.shape[1] == 0 or a.shape[1] == 0:
        raise ContractError("contrastive loss needs non-empty anchor, negative and positive sets")
    if not tau > 0:
        raise ContractError("tau must be > 0")
    s_neg = ad.exp((a @ neg.transpose(0, 2, 1)) * (1.0 / tau)).sum(axis=(1, 2))
    s_pos = ad.exp((a @ pos.transpose(0, 2, 1)) * (1.0 / tau)).sum(axis=(1, 2))
    loss = ad.log(s_neg) - ad.log(s_neg + s_pos)
    return loss.reshape(()) if single else loss


def pairwise_distance_sum(a, b) -> Tensor:
    """Sum over all (i, j) of ||a_i - b_j||; (n,d)x(m,d) -> scalar or (B,n,d)x(B,m,d) -> (B,)."""
    a, single = _batched(a)
    b, _ = _batched(b)
    diff = a.reshape(a.shape[0], a.shape[1], 1, a.shape[2]) - b.reshape(b.shape[0], 1, b.shape[1], b.shape[2])
    total = ad.norm(diff, axis=-1).sum(axis=(1, 2))
    return total.reshape(()) if single else total


def distance_loss(adv_set, clean_set) -> Tensor:
    """``-sum_i sum_j ||adv_i - clean_j||`` over two equal-size embedding sets."""
    a, b = ad.as_tensor(adv_set), ad.as_tensor(clean_set)
    if a.shape[-2] != b.shape[-2]:
        raise ContractError(f"distance loss needs equal set sizes, got {a.shape[-2]} and {b.shape[-2]}")
    return -pairwise_distance_sum(a, b)


def matched_distance_loss(adv, clean) -> Tensor:
    """``-sum_i ||adv_i - clean_i||`` for aligned (B, n, d) sets."""
    return -ad.norm(ad.as_tensor(adv) - clean, axis=-1).sum(axis=1)


def alternative_loss(mode: str, anchors, negatives) -> Tensor:
    """Non-contrastive cross-modal objectives on (B,n,d) anchors vs (B,m,d) matched items."""
    a, neg = ad.as_tensor(anchors), ad.as_tensor(negatives)
    count = a.shape[1] * neg.shape[1]
    cos = a @ neg.transpose(0, 2, 1)
    if mode == "cos":
        return cos.sum(axis=(1, 2)) * (1.0 / count)
    if mode == "mse":
        # unit vectors: ||a - t||^2 = 2 - 2 cos
        return (cos * 2.0 - 2.0).sum(axis=(1, 2)) * (1.0 / count)
    raise ContractError(f"unknown loss mode {mode!r}")


def cross_modal_loss(config: AttackConfig, anchors, negatives, positives) -> Tensor:
    if config.loss_mode == "infonce":
        return contrastive_loss(anchors, negatives, positives, config.tau)
    return alternative_loss(config.loss_mode, anchors, negatives)


# -- word importance and substitution ----------------------------------------

def word_importance(tokens: Sequence[int], model: DualEncoderModel) -> tuple[np.ndarray, int]:
    """Per-position ||f_T(s) - f_T(s with position i masked)|| and the leftmost argmax."""
    toks = np.asarray(tokens, dtype=np.int64)[None]
    scores = importance_scores(toks, np.array([toks.shape[1]]), model)[0, : toks.shape[1]]
    return scores, int(np.argmax(scores))


def importance_scores(tokens: np.ndarray, lengths: np.ndarray, model: DualEncoderModel) -> np.ndarray:
    """Masking scores for a batch of padded captions, (n, L); padded positions score -inf."""
    tokens = np.asarray(tokens, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    n, L = tokens.shape
    base = model.encode_tokens(tokens, lengths).data
    masked = np.repeat(tokens[:, None, :], L, axis=1)
    masked[:, np.arange(L), np.arange(L)] = MASK_ID
    emb = model.encode_tokens(masked.reshape(n * L, L), np.repeat(lengths, L)).data.reshape(n, L, -1)
    scores = np.linalg.norm(emb - base[:, None, :], axis=-1)
    scores[np.arange(L)[None, :] >= lengths[:, None]] = -np.inf
    return scores


def importance_positions(tokens: np.ndarray, lengths: np.ndarray, model: DualEncoderModel) -> np.ndarray:
    return np.argmax(importance_scores(tokens, lengths, model), axis=1)


def substitute_word(tokens: np.ndarray, positions: np.ndarray, word: int | None) -> np.ndarray:
    out = np.array(tokens, dtype=np.int64, copy=True)
    if word is not None:
        out[np.arange(len(out)), positions] = word
    return out


@dataclass
class AdversarialPair:
    image: np.ndarray
    tokens: list[int]
    position: int | None
    degenerate: bool


def apply_uap(image: np.ndarray, tokens: Sequence[int], artifact: UapArtifact, model: DualEncoderModel) -> AdversarialPair:
    """``(clamp(v + delta_v), t with its most important word replaced)``; at most one token changes."""
    adv_img = np.clip(np.asarray(image) + artifact.delta_v, 0.0, 1.0)
    toks = list(tokens)
    if artifact.adversarial_word is None:
        return AdversarialPair(adv_img, toks, None, True)
    _, pos = word_importance(toks, model)
    degenerate = toks[pos] == artifact.adversarial_word
    toks[pos] = artifact.adversarial_word
    return AdversarialPair(adv_img, toks, pos, degenerate)


# -- training ----------------------------------------------------------------

@dataclass
class TraceRow:
    branch: str
    epoch: int
    iteration: int
    l_cl: float
    l_dis: float
    total: float


@dataclass
class TrainResult:
    artifact: UapArtifact
    noise: NoiseSeed
    generators: dict[str, PerturbationGenerator]
    trace: list[TraceRow] = field(default_factory=list)
    seconds: float = 0.0

    def epoch_means(self, branch: str = "image") -> list[float]:
        rows = [r for r in self.trace if r.branch == branch]
        epochs = sorted({r.epoch for r in rows})
        return [float(np.mean([r.total for r in rows if r.epoch == e])) for e in epochs]


def write_trace(rows: Sequence[TraceRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["branch", "epoch", "iteration", "L_CL", "L_Dis", "total"])
        for r in rows:
            w.writerow([r.branch, r.epoch, r.iteration, repr(r.l_cl), repr(r.l_dis), repr(r.total)])
    return path


@dataclass
class _SurrogateCache:
    """Constant surrogate-side quantities reused by every training step."""

    image_emb: np.ndarray      # (n, d) clean images
    caption_emb: np.ndarray    # (n, m, d)
    positions: np.ndarray      # (n, m) most important word per caption
    rest_pooled: np.ndarray    # (n, m, 64) pooled embedding with the important word removed
    inv_len: np.ndarray        # (n, m)

    @classmethod
    def build(cls, model: DualEncoderModel, split: Split) -> "_SurrogateCache":
        n, m = split.lengths.shape
        toks, lens, _ = split.flat_captions()
        img, cap = model.embed_split(split)
        pos = importance_positions(toks, lens, model)
        table = model.token_table
        valid = np.arange(toks.shape[1])[None, :] < lens[:, None]
        keep = valid.copy()
        keep[np.arange(len(toks)), pos] = False
        rest = (table[toks] * keep[:, :, None]).sum(axis=1) / lens[:, None]
        d = img.shape[1]
        return cls(img, cap.reshape(n, m, d), pos.reshape(n, m), rest.reshape(n, m, -1),
                   (1.0 / lens).reshape(n, m))


def _schedule(config: AttackConfig, n: int, branch_id: int):
    """Yield (epoch, iteration, sample indices) for every generator update."""
    for epoch in range(config.epochs):
        order = stream(config.seed, "attack-order", branch_id, epoch).permutation(n)
        steps = -(-n // config.batch_pairs)
        if config.steps_per_epoch is not None:
            steps = min(steps, config.steps_per_epoch)
        for it in range(steps):
            yield epoch, it, order[it * config.batch_pairs:(it + 1) * config.batch_pairs]


def _augment_noise(config: AttackConfig, branch_id: int, epoch: int, it: int, shape: tuple[int, ...]):
    if config.noise_sigma <= 0:
        return None
    return stream(config.seed, "augment-noise", branch_id, epoch, it).normal(0.0, config.noise_sigma, size=shape)


def _reference_indices(config: AttackConfig, n: int) -> np.ndarray:
    rng = stream(config.seed, "reference-set")
    return np.sort(rng.choice(n, size=min(config.reference_size, n), replace=False))


def image_objective(config: AttackConfig, surrogate: DualEncoderModel, delta, images: np.ndarray,
                    negatives: np.ndarray, positives: np.ndarray, aug_noise: np.ndarray | None):
    """Per-sample (L_CL, L_Dis) of perturbation(s) ``delta`` on clean ``images``.

    ``delta`` is (b,32,32,3) or (1,32,32,3); the other inputs are constants.
    """
    b = images.shape[0]
    n_aug = config.N
    delta = ad.as_tensor(delta)
    clean_aug = augment_batch(images, config.scales, aug_noise).data
    if config.perturb_order == "add_then_augment":
        adv_aug = augment_batch(ad.clamp(Tensor(images) + delta, 0.0, 1.0), config.scales, aug_noise)
    else:
        adv_aug = ad.clamp(Tensor(clean_aug) + delta.reshape(-1, 1, IMAGE_SIZE, IMAGE_SIZE, CHANNELS), 0.0, 1.0)
    flat = (b * n_aug, IMAGE_SIZE, IMAGE_SIZE, CHANNELS)
    e_adv = surrogate.encode_images(adv_aug.reshape(flat)).reshape(b, n_aug, -1)
    e_clean = surrogate.encode_images(clean_aug.reshape(flat)).data.reshape(b, n_aug, -1)
    l_cl = cross_modal_loss(config, e_adv, negatives, positives)
    l_dis = distance_loss(e_adv, e_clean)
    return l_cl, l_dis


def image_step_loss(config: AttackConfig, surrogate: DualEncoderModel, noise: NoiseSeed,
                    gen: PerturbationGenerator, images: np.ndarray, condition: np.ndarray,
                    negatives: np.ndarray, positives: np.ndarray, aug_noise: np.ndarray | None):
    """Per-sample (L_CL, L_Dis) for one image-side step; every array input is constant."""
    delta = generate_image_uap(noise, condition, gen, config.epsilon_v)
    return image_objective(config, surrogate, delta, images, negatives, positives, aug_noise)


def text_objective(config: AttackConfig, surrogate: DualEncoderModel, pooled, clean_text: np.ndarray,
                   negatives: np.ndarray, positives: np.ndarray):
    """Per-sample (L_CL, L_Dis) of adversarial captions given as pooled token embeddings (b, m, 64)."""
    pooled = ad.as_tensor(pooled)
    b, m, _ = pooled.shape
    t_adv = surrogate.text_head(pooled.reshape(b * m, -1)).reshape(b, m, -1)
    l_cl = cross_modal_loss(config, t_adv, negatives, positives)
    l_dis = matched_distance_loss(t_adv, clean_text)
    return l_cl, l_dis


def text_step_loss(config: AttackConfig, surrogate: DualEncoderModel, noise: NoiseSeed,
                   gen: PerturbationGenerator, condition: np.ndarray, rest_pooled: np.ndarray,
                   inv_len: np.ndarray, clean_text: np.ndarray, negatives: np.ndarray, positives: np.ndarray):
    """Per-sample (L_CL, L_Dis) for one text-side step.

    The generator's embedding replaces the most important word of each matched
    caption before pooling; those adversarial captions are the anchors.
    """
    e_word = generate_text_uap(noise, condition, gen)                       # (b, 64), or (1, 64) without attention
    pooled = Tensor(rest_pooled) + e_word.reshape(e_word.shape[0], 1, -1) * inv_len[:, :, None]
    return text_objective(config, surrogate, pooled, clean_text, negatives, positives)


def _weights(config: AttackConfig) -> tuple[float, float]:
    w_cl = 0.0 if config.variant == "no_CL" else 1.0
    w_dis = 0.0 if config.variant == "no_Dis" else config.lam
    return w_cl, w_dis


def combined_loss(config: AttackConfig, l_cl: Tensor, l_dis: Tensor) -> Tensor:
    """Batch mean of ``L_CL + lambda * L_Dis`` with the variant's terms switched off."""
    w_cl, w_dis = _weights(config)
    return (l_cl * w_cl + l_dis * w_dis).sum() * (1.0 / l_cl.shape[0])


def _step(opt: ad.Adam, l_cl: Tensor, l_dis: Tensor, total: Tensor, config: AttackConfig, tape: Tape,
          branch: str, epoch: int, it: int, trace: list[TraceRow]) -> None:
    w_cl, w_dis = _weights(config)
    value = total.item()
    if not np.isfinite(value):
        raise TrainingFailure(f"{branch} generator loss is not finite", it)
    trace.append(TraceRow(branch, epoch, it, float(l_cl.data.mean()) * w_cl,
                          float(l_dis.data.mean()) * w_dis, value))
    if total.requires_grad:
        tape.backward(total)
        opt.step()
        opt.zero_grad()


def choose_positive(variant: str, dists: np.ndarray) -> np.ndarray:
    """Per row of (b, B) candidate distances, the candidate used as positives.

    Candidates are already uniform draws, so "random positives" keeps the first.
    """
    if variant == "random_positives":
        return np.zeros(len(dists), dtype=np.int64)
    return np.argmax(dists, axis=1)


def _caption_positives(config: AttackConfig, cache: _SurrogateCache, idx: np.ndarray,
                       rng: np.random.Generator) -> np.ndarray:
    """First K caption embeddings of the selected candidate set per image, (b, K, d)."""
    cand = sample_candidates(rng, len(cache.image_emb), idx, config.B)
    cand_emb = cache.caption_emb[cand]                                       # (b, B, m, d)
    dists = np.linalg.norm(cand_emb - cache.image_emb[idx][:, None, None, :], axis=-1).mean(axis=2)
    chosen = cand[np.arange(len(idx)), choose_positive(config.variant, dists)]
    return cache.caption_emb[chosen][:, : config.K]


def _image_sets(config: AttackConfig, surrogate: DualEncoderModel, cache: _SurrogateCache, images: np.ndarray,
                idx: np.ndarray, rng: np.random.Generator, aug_noise: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Augmented-set embeddings of each caption's matched image and of its farthest candidate image."""
    b = len(idx)
    shape = (IMAGE_SIZE, IMAGE_SIZE, CHANNELS)
    cand = sample_candidates(rng, len(cache.image_emb), idx, config.B)
    dists = np.linalg.norm(cache.image_emb[cand][:, :, None, :] - cache.caption_emb[idx][:, None, :, :],
                           axis=-1).mean(axis=2)
    chosen = cand[np.arange(b), choose_positive(config.variant, dists)]
    both = np.concatenate([images[idx], images[chosen]])
    noise = None if aug_noise is None else aug_noise.reshape(2 * b, config.N, *shape)
    aug = augment_batch(both, config.scales, noise)
    emb = surrogate.encode_images(aug.reshape(2 * b * config.N, *shape)).data.reshape(2, b, config.N, -1)
    return emb[0], emb[1]


def train_image_generator(corpus: Corpus, surrogate: DualEncoderModel, config: AttackConfig,
                          noise: NoiseSeed, cache: _SurrogateCache | None = None):
    train = corpus.train
    cache = cache or _SurrogateCache.build(surrogate, train)
    gen = PerturbationGenerator.create("image", config.seed, cond_dim=surrogate.d,
                                       use_attention=config.variant != "no_cross_attention")
    opt = ad.Adam(gen.parameters(), learning_rate=config.learning_rate)
    trace: list[TraceRow] = []
    for epoch, it, idx in _schedule(config, len(train), 0):
        positives = _caption_positives(config, cache, idx, stream(config.seed, "attack-candidates", 0, epoch, it))
        aug_noise = _augment_noise(config, 0, epoch, it, (len(idx), config.N, IMAGE_SIZE, IMAGE_SIZE, CHANNELS))
        # condition: mean embedding of the image's captions
        condition = cache.caption_emb[idx].mean(axis=1, keepdims=True)
        with Tape() as tape:
            l_cl, l_dis = image_step_loss(config, surrogate, noise, gen, train.images[idx], condition,
                                          cache.caption_emb[idx], positives, aug_noise)
            total = combined_loss(config, l_cl, l_dis)
        _step(opt, l_cl, l_dis, total, config, tape, "image", epoch, it, trace)
    delta = emit_image_uap(config, surrogate, noise, gen, cache, train.images)
    return gen, delta, trace


def train_text_generator(corpus: Corpus, surrogate: DualEncoderModel, config: AttackConfig,
                         noise: NoiseSeed, cache: _SurrogateCache | None = None):
    train = corpus.train
    cache = cache or _SurrogateCache.build(surrogate, train)
    gen = PerturbationGenerator.create("text", config.seed, cond_dim=surrogate.d,
                                       use_attention=config.variant != "no_cross_attention")
    opt = ad.Adam(gen.parameters(), learning_rate=config.learning_rate)
    trace: list[TraceRow] = []
    shape = (IMAGE_SIZE, IMAGE_SIZE, CHANNELS)
    for epoch, it, idx in _schedule(config, len(train), 1):
        aug_noise = _augment_noise(config, 1, epoch, it, (2, len(idx), config.N, *shape))
        negatives, positives = _image_sets(config, surrogate, cache, train.images, idx,
                                           stream(config.seed, "attack-candidates", 1, epoch, it), aug_noise)
        with Tape() as tape:
            l_cl, l_dis = text_step_loss(config, surrogate, noise, gen, cache.image_emb[idx][:, None, :],
                                         cache.rest_pooled[idx], cache.inv_len[idx], cache.caption_emb[idx],
                                         negatives, positives)
            total = combined_loss(config, l_cl, l_dis)
        _step(opt, l_cl, l_dis, total, config, tape, "text", epoch, it, trace)
    word = emit_adversarial_word(config, surrogate, noise, gen, cache, train.images)
    return gen, word, trace


# -- emitting the universal artifact -----------------------------------------
#
# The generator maps a condition to a perturbation, but the artifact must be
# one fixed perturbation. Each reference sample's condition yields a
# candidate; the candidate with the lowest training objective over all
# reference pairs is emitted ("best_of_set"). "mean_condition" instead feeds
# the mean reference embedding through the generator once.

def _reference_noise(config: AttackConfig, shape: tuple[int, ...]) -> np.ndarray | None:
    if config.noise_sigma <= 0:
        return None
    return stream(config.seed, "reference-set", 1).normal(0.0, config.noise_sigma, size=shape)


def emit_image_uap(config: AttackConfig, surrogate: DualEncoderModel, noise: NoiseSeed,
                   gen: PerturbationGenerator, cache: _SurrogateCache, images: np.ndarray) -> np.ndarray:
    ref = _reference_indices(config, len(images))
    if config.reference_rule == "mean_condition":
        condition = cache.caption_emb[ref, 0].mean(axis=0).reshape(1, 1, -1)
        return generate_image_uap(noise, condition, gen, config.epsilon_v).data[0]
    conditions = cache.caption_emb[ref].mean(axis=1, keepdims=True)          # (R, 1, d)
    candidates = generate_image_uap(noise, conditions, gen, config.epsilon_v).data
    positives = _caption_positives(config, cache, ref, stream(config.seed, "reference-set", 2))
    aug_noise = _reference_noise(config, (len(ref), config.N, IMAGE_SIZE, IMAGE_SIZE, CHANNELS))
    scores = []
    for delta in candidates:
        l_cl, l_dis = image_objective(config, surrogate, delta[None], images[ref], cache.caption_emb[ref],
                                      positives, aug_noise)
        scores.append(combined_loss(config, l_cl, l_dis).item())
    best = int(np.argmin(scores))
    log.info("emitted image perturbation from reference candidate %d (objective %.4f)", best, scores[best])
    return candidates[best]


def emit_adversarial_word(config: AttackConfig, surrogate: DualEncoderModel, noise: NoiseSeed,
                          gen: PerturbationGenerator, cache: _SurrogateCache, images: np.ndarray) -> int:
    ref = _reference_indices(config, len(images))
    table = surrogate.token_table
    if config.reference_rule == "mean_condition":
        return project_to_vocab(generate_text_uap(noise, cache.image_emb[ref].mean(axis=0), gen).data[0], table)
    embs = generate_text_uap(noise, cache.image_emb[ref], gen).data
    words = list(dict.fromkeys(project_to_vocab(e, table) for e in embs))
    shape = (2, len(ref), config.N, IMAGE_SIZE, IMAGE_SIZE, CHANNELS)
    negatives, positives = _image_sets(config, surrogate, cache, images, ref,
                                       stream(config.seed, "reference-set", 2), _reference_noise(config, shape))
    scores = []
    for w in words:
        pooled = cache.rest_pooled[ref] + table[w] * cache.inv_len[ref][:, :, None]
        l_cl, l_dis = text_objective(config, surrogate, pooled, cache.caption_emb[ref], negatives, positives)
        scores.append(combined_loss(config, l_cl, l_dis).item())
    best = int(np.argmin(scores))
    log.info("emitted adversarial word %d from %d candidates (objective %.4f)", words[best], len(words), scores[best])
    return words[best]


def train_uap(corpus: Corpus, surrogate: DualEncoderModel, config: AttackConfig) -> TrainResult:
    """Train both generator branches and emit the universal (delta_v, word) artifact."""
    if len(corpus.train) < 2:
        raise ContractError("training split needs at least two samples")
    t0 = time.perf_counter()
    noise = NoiseSeed.draw(config.seed)
    cache = _SurrogateCache.build(surrogate, corpus.train)
    img_gen, delta, trace = train_image_generator(corpus, surrogate, config, noise, cache)
    gens = {"image": img_gen}
    word = None
    if config.train_text:
        txt_gen, word, txt_trace = train_text_generator(corpus, surrogate, config, noise, cache)
        gens["text"] = txt_gen
        trace += txt_trace
    method = "cpgc" if config.variant == "full" and config.loss_mode == "infonce" else \
        f"cpgc_{config.variant}" if config.loss_mode == "infonce" else f"cpgc_loss_{config.loss_mode}"
    art = UapArtifact(delta, word, config.epsilon_v, config.epsilon_t, method, surrogate.model_id,
                      surrogate.digest(), config.to_dict())
    art.check_budget()
    return TrainResult(art, noise, gens, trace, time.perf_counter() - t0)


# -- baselines ---------------------------------------------------------------

def baseline_gap_train(corpus: Corpus, surrogate: DualEncoderModel, config: AttackConfig) -> TrainResult:
    """Generative baseline: unconditioned generator maximizing image-to-matched-text distance.

    No augmentation, no positives, no cross-attention and no text perturbation.
    """
    t0 = time.perf_counter()
    train = corpus.train
    noise = NoiseSeed.draw(config.seed)
    cache = _SurrogateCache.build(surrogate, train)
    gen = PerturbationGenerator.create("image", config.seed, cond_dim=surrogate.d, use_attention=False)
    opt = ad.Adam(gen.parameters(), learning_rate=config.learning_rate)
    trace: list[TraceRow] = []
    for epoch, it, idx in _schedule(config, len(train), 2):
        with Tape() as tape:
            delta = generate_image_uap(noise, None, gen, config.epsilon_v)
            adv = ad.clamp(Tensor(train.images[idx]) + delta, 0.0, 1.0)
            e_adv = surrogate.encode_images(adv).reshape(len(idx), 1, -1)
            loss = -pairwise_distance_sum(e_adv, cache.caption_emb[idx])
            total = loss.sum() * (1.0 / len(idx))
        if not np.isfinite(total.item()):
            raise TrainingFailure("GAP generator loss is not finite", it)
        trace.append(TraceRow("image", epoch, it, 0.0, total.item(), total.item()))
        tape.backward(total)
        opt.step()
        opt.zero_grad()
    delta = generate_image_uap(noise, None, gen, config.epsilon_v).data[0]
    art = UapArtifact(delta, None, config.epsilon_v, config.epsilon_t, "gap", surrogate.model_id,
                      surrogate.digest(), config.to_dict())
    art.check_budget()
    return TrainResult(art, noise, {"image": gen}, trace, time.perf_counter() - t0)


def random_noise_uap(config: AttackConfig, surrogate: DualEncoderModel | None = None) -> UapArtifact:
    """Uniformly random +-epsilon_v sign pattern, no text perturbation."""
    rng = stream(config.seed, "random-noise-uap")
    delta = config.epsilon_v * rng.choice([-1.0, 1.0], size=(IMAGE_SIZE, IMAGE_SIZE, CHANNELS))
    art = UapArtifact(delta, None, config.epsilon_v, config.epsilon_t, "random_noise",
                      surrogate.model_id if surrogate else "", surrogate.digest() if surrogate else "",
                      config.to_dict())
    art.check_budget()
    return art
