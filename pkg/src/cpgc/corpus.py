"""Procedural image-caption corpus.

Each sample is a single shape (kind, color, quadrant, size) on a gray
background, rendered at 32x32x3 with 4x4 supersampled anti-aliasing, and
described by ``m`` distinct 8-token captions drawn from a small grammar with
three synonyms per attribute value. Domain ``"B"`` keeps the attribute space
and vocabulary but changes background levels, adds an outline stroke and skews
synonym frequencies.

On disk a corpus directory holds ``manifest.json``, ``images.f32`` (little
endian float32, sample-major, row-major HxWxC) and ``captions.txt`` (one line
per caption: ``sample_id caption_index tok tok ...``).
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cpgc.autodiff.checkpoint import dump_json
from cpgc.errors import CPGCError, ContractError, DomainError
from cpgc.rng import stream

IMAGE_SIZE = 32
CHANNELS = 3
MAX_CAPTION_LEN = 8
VOCAB_SIZE = 64
PAD_ID = 0
MASK_ID = 1

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow")
POSITIONS = ("top_left", "top_right", "bottom_left", "bottom_right")
SIZES = ("small", "large")
BACKGROUNDS = ("dark", "light")
FIELDS = ("shape_kind", "color", "position", "size", "background")
_CHOICES = dict(zip(FIELDS, (SHAPES, COLORS, POSITIONS, SIZES, BACKGROUNDS)))

RGB = {
    "red": (0.90, 0.12, 0.12),
    "green": (0.12, 0.75, 0.20),
    "blue": (0.15, 0.30, 0.95),
    "yellow": (0.95, 0.85, 0.10),
}

SYNONYMS = {
    "circle": ("circle", "disc", "round"),
    "square": ("square", "box", "block"),
    "triangle": ("triangle", "wedge", "pyramid"),
    "cross": ("cross", "plus", "xmark"),
    "red": ("red", "crimson", "scarlet"),
    "green": ("green", "emerald", "lime"),
    "blue": ("blue", "azure", "navy"),
    "yellow": ("yellow", "gold", "amber"),
    "top_left": ("topleft", "upperleft", "northwest"),
    "top_right": ("topright", "upperright", "northeast"),
    "bottom_left": ("bottomleft", "lowerleft", "southwest"),
    "bottom_right": ("bottomright", "lowerright", "southeast"),
    "small": ("small", "tiny", "little"),
    "large": ("large", "big", "huge"),
    "dark": ("dark", "dim", "shadowed"),
    "light": ("light", "pale", "bright"),
}
FILLERS = ("a", "the", "an", "on", "in", "at", "with", "background",
           "ground", "corner", "shape", "object", "sits", "is")

# Slots: S size, C color, H shape kind, P position, B background.
TEMPLATES = (
    ("a", "S", "C", "H", "at", "P", "on", "B"),
    ("the", "S", "C", "H", "in", "P", "B", "background"),
    ("S", "C", "H", "sits", "P", "corner", "B", "ground"),
    ("B", "background", "with", "S", "C", "H", "at", "P"),
    ("an", "S", "C", "H", "object", "in", "P", "B"),
    ("H", "shape", "is", "S", "C", "at", "P", "B"),
)
_SLOT_FIELD = {"S": "size", "C": "color", "H": "shape_kind", "P": "position", "B": "background"}

VOCAB: tuple[str, ...] = (("<pad>", "<mask>")
                          + tuple(w for value in (*SHAPES, *COLORS, *POSITIONS, *SIZES, *BACKGROUNDS)
                                  for w in SYNONYMS[value])
                          + FILLERS)
assert len(VOCAB) == VOCAB_SIZE and len(set(VOCAB)) == VOCAB_SIZE
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
_WORD_MEANING = {TOKEN_ID[w]: (f, value) for f, values in _CHOICES.items()
                 for value in values for w in SYNONYMS[value]}

DOMAIN_STYLE = {
    "A": {"background": {"dark": 0.15, "light": 0.70}, "stroke": 0.0, "synonym_p": (1 / 3, 1 / 3, 1 / 3)},
    "B": {"background": {"dark": 0.30, "light": 0.58}, "stroke": 1.25, "synonym_p": (0.15, 0.25, 0.60)},
}
_QUADRANT_CENTER = {"top_left": (8.0, 8.0), "top_right": (8.0, 24.0),
                    "bottom_left": (24.0, 8.0), "bottom_right": (24.0, 24.0)}
_RADIUS = {"small": 5.0, "large": 7.5}
_SUPERSAMPLE = 4
_PIXEL_NOISE = 0.02
_JITTER = 1.0


class CorpusFileError(CPGCError, OSError):
    pass


@dataclass(frozen=True)
class AttributeRecord:
    shape_kind: str
    color: str
    position: str
    size: str
    background: str

    def __post_init__(self):
        for f in FIELDS:
            if getattr(self, f) not in _CHOICES[f]:
                raise DomainError(f"{f}={getattr(self, f)!r} not in {_CHOICES[f]}")

    @property
    def class_index(self) -> int:
        idx = 0
        for f in FIELDS:
            choices = _CHOICES[f]
            idx = idx * len(choices) + choices.index(getattr(self, f))
        return idx

    @classmethod
    def from_class_index(cls, index: int) -> "AttributeRecord":
        values = []
        for f in reversed(FIELDS):
            choices = _CHOICES[f]
            index, r = divmod(index, len(choices))
            values.append(choices[r])
        return cls(*reversed(values))


def all_records() -> list[AttributeRecord]:
    return [AttributeRecord(*combo) for combo in itertools.product(*(_CHOICES[f] for f in FIELDS))]


@dataclass
class PairedSample:
    image: np.ndarray
    captions: list[list[int]]
    attributes: AttributeRecord
    sample_id: int


# -- rendering ---------------------------------------------------------------

def _inside(kind: str, dy: np.ndarray, dx: np.ndarray, r: float) -> np.ndarray:
    if kind == "circle":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        s = 0.85 * r
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if kind == "triangle":
        # apex up; base at dy = +0.8r, apex at dy = -r
        base, apex = 0.8 * r, -r
        half_width = r * (dy - apex) / (base - apex)
        return (dy >= apex) & (dy <= base) & (np.abs(dx) <= half_width)
    if kind == "cross":
        arm = r / 3.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise DomainError(f"unknown shape {kind!r}")


def _coverage(kind: str, cy: float, cx: float, r: float) -> np.ndarray:
    n = IMAGE_SIZE * _SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / _SUPERSAMPLE
    yy, xx = np.meshgrid(coords - cy, coords - cx, indexing="ij")
    hit = _inside(kind, yy, xx, r).astype(np.float64)
    return hit.reshape(IMAGE_SIZE, _SUPERSAMPLE, IMAGE_SIZE, _SUPERSAMPLE).mean(axis=(1, 3))


def render_image(attrs: AttributeRecord, seed: int, domain: str = "A") -> np.ndarray:
    """Deterministic 32x32x3 image in [0, 1] for ``attrs``."""
    style = DOMAIN_STYLE[domain]
    rng = stream(seed, "corpus-render")
    jitter = rng.uniform(-_JITTER, _JITTER, size=2)
    noise = rng.normal(0.0, _PIXEL_NOISE, size=(IMAGE_SIZE, IMAGE_SIZE, CHANNELS))

    cy, cx = np.add(_QUADRANT_CENTER[attrs.position], jitter)
    r = _RADIUS[attrs.size]
    color = np.asarray(RGB[attrs.color])
    img = np.full((IMAGE_SIZE, IMAGE_SIZE, CHANNELS), style["background"][attrs.background])
    alpha = _coverage(attrs.shape_kind, cy, cx, r)[..., None]
    img = img * (1 - alpha) + color * alpha
    if style["stroke"] > 0:
        inner = _coverage(attrs.shape_kind, cy, cx, r - style["stroke"])[..., None]
        ring = np.clip(alpha - inner, 0.0, 1.0)
        img = img * (1 - ring) + 0.45 * color * ring
    # noise depends on the seed alone, so changing an attribute only moves shape pixels
    return np.clip(img + noise, 0.0, 1.0)


# -- captions ----------------------------------------------------------------

def render_captions(attrs: AttributeRecord, m: int, seed: int, domain: str = "A") -> list[list[int]]:
    """``m`` distinct captions, each naming every attribute in ``attrs`` once."""
    if m < 2:
        raise ContractError(f"need at least 2 captions per image, got m={m}")
    p = DOMAIN_STYLE[domain]["synonym_p"]
    rng = stream(seed, "corpus-captions")
    seen: set[tuple[int, ...]] = set()
    out: list[list[int]] = []
    while len(out) < m:
        template = TEMPLATES[rng.integers(len(TEMPLATES))]
        synonym = {slot: rng.choice(3, p=p) for slot in _SLOT_FIELD}
        words = [SYNONYMS[getattr(attrs, _SLOT_FIELD[w])][synonym[w]] if w in _SLOT_FIELD else w
                 for w in template]
        ids = tuple(TOKEN_ID[w] for w in words)
        if ids not in seen:
            seen.add(ids)
            out.append(list(ids))
    return out


def parse_caption(tokens) -> AttributeRecord:
    """Recover the attribute record named by a caption; raises on missing or conflicting words."""
    found: dict[str, str] = {}
    for tok in tokens:
        tok = int(tok)
        if not 0 <= tok < VOCAB_SIZE:
            raise DomainError(f"token id {tok} out of vocabulary")
        meaning = _WORD_MEANING.get(tok)
        if meaning is None:
            continue
        f, value = meaning
        if found.setdefault(f, value) != value:
            raise DomainError(f"caption names two values for {f}: {found[f]}, {value}")
    missing = [f for f in FIELDS if f not in found]
    if missing:
        raise DomainError(f"caption does not name {missing}")
    return AttributeRecord(**found)


def decode(tokens) -> str:
    return " ".join(VOCAB[int(t)] for t in tokens)


# -- corpus ------------------------------------------------------------------

@dataclass
class Split:
    """Array view of one split: images (n,32,32,3), tokens (n,m,8), lengths (n,m)."""

    images: np.ndarray
    tokens: np.ndarray
    lengths: np.ndarray
    class_ids: np.ndarray
    sample_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def m(self) -> int:
        return self.tokens.shape[1]

    def caption(self, i: int, j: int) -> list[int]:
        return self.tokens[i, j, : self.lengths[i, j]].tolist()

    def sample(self, i: int) -> PairedSample:
        return PairedSample(self.images[i], [self.caption(i, j) for j in range(self.m)],
                            AttributeRecord.from_class_index(int(self.class_ids[i])), int(self.sample_ids[i]))

    def flat_captions(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All captions as (tokens (n*m, 8), lengths (n*m,), owning image index (n*m,))."""
        n, m = self.lengths.shape
        return (self.tokens.reshape(n * m, -1), self.lengths.reshape(-1), np.repeat(np.arange(n), m))


@dataclass
class CorpusManifest:
    n_train: int
    n_test: int
    m: int
    domain: str
    seed: int
    vocabulary: tuple[str, ...] = VOCAB
    train_ids: tuple[int, int] = (0, 0)
    test_ids: tuple[int, int] = (0, 0)
    files: dict[str, str] = field(default_factory=dict)
    digest: str = ""

    def to_json(self) -> dict:
        return {
            "format": "cpgc-corpus/1",
            "n_train": self.n_train, "n_test": self.n_test, "m": self.m,
            "domain": self.domain, "seed": self.seed,
            "splits": {"train": list(self.train_ids), "test": list(self.test_ids)},
            "vocabulary": {str(i): w for i, w in enumerate(self.vocabulary)},
            "image_shape": [IMAGE_SIZE, IMAGE_SIZE, CHANNELS],
            "max_caption_len": MAX_CAPTION_LEN,
            "files": self.files,
            "digest": self.digest,
        }


@dataclass
class Corpus:
    manifest: CorpusManifest
    train: Split
    test: Split


def _build_split(ids: range, records: list[AttributeRecord], m: int, seed: int, domain: str) -> Split:
    n = len(ids)
    images = np.empty((n, IMAGE_SIZE, IMAGE_SIZE, CHANNELS))
    tokens = np.full((n, m, MAX_CAPTION_LEN), PAD_ID, dtype=np.int64)
    lengths = np.zeros((n, m), dtype=np.int64)
    for k, (sid, rec) in enumerate(zip(ids, records)):
        sample_seed = seed * 1_000_003 + sid
        images[k] = render_image(rec, sample_seed, domain)
        for j, cap in enumerate(render_captions(rec, m, sample_seed, domain)):
            tokens[k, j, : len(cap)] = cap
            lengths[k, j] = len(cap)
    # the on-disk format is float32; keep memory identical to what a reload yields
    images = images.astype("<f4").astype(np.float64)
    return Split(images, tokens, lengths, np.array([r.class_index for r in records]), np.asarray(ids))


def generate_corpus(n_train: int, n_test: int, m: int = 3, domain: str = "A", seed: int = 0,
                    out_dir: str | Path | None = None) -> Corpus:
    if n_train < 1 or n_test < 1:
        raise ContractError("n_train and n_test must be >= 1")
    if domain not in DOMAIN_STYLE:
        raise ContractError(f"unknown domain {domain!r}")
    rng = stream(seed, "corpus-attributes")
    total = n_train + n_test
    class_ids = rng.integers(0, len(all_records()), size=total)
    records = [AttributeRecord.from_class_index(int(c)) for c in class_ids]
    train = _build_split(range(0, n_train), records[:n_train], m, seed, domain)
    test = _build_split(range(n_train, total), records[n_train:], m, seed, domain)
    manifest = CorpusManifest(n_train, n_test, m, domain, seed,
                              train_ids=(0, n_train), test_ids=(n_train, total))
    corpus = Corpus(manifest, train, test)
    if out_dir is not None:
        write_corpus(corpus, out_dir)
    return corpus


def _caption_lines(split: Split) -> list[str]:
    lines = []
    for i, sid in enumerate(split.sample_ids):
        for j in range(split.m):
            toks = " ".join(str(t) for t in split.caption(i, j))
            lines.append(f"{sid} {j} {toks}")
    return lines


def write_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        images = np.concatenate([corpus.train.images, corpus.test.images]).astype("<f4")
        img_bytes = images.tobytes(order="C")
        cap_text = "\n".join(_caption_lines(corpus.train) + _caption_lines(corpus.test)) + "\n"
        (out / "images.f32").write_bytes(img_bytes)
        (out / "captions.txt").write_text(cap_text, encoding="utf-8")
        h = hashlib.sha256(img_bytes)
        h.update(cap_text.encode())
        corpus.manifest.files = {"images": "images.f32", "captions": "captions.txt"}
        corpus.manifest.digest = h.hexdigest()
        path = out / "manifest.json"
        path.write_text(dump_json(corpus.manifest.to_json()), encoding="utf-8")
    except OSError as exc:
        raise CorpusFileError(f"cannot write corpus to {exc.filename or out}: {exc.strerror}") from exc
    return path


def load_corpus(corpus_dir: str | Path) -> Corpus:
    root = Path(corpus_dir)
    try:
        meta = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
        raw = (root / meta["files"]["images"]).read_bytes()
        cap_lines = (root / meta["files"]["captions"]).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CorpusFileError(f"cannot read corpus at {exc.filename or root}: {exc.strerror}") from exc
    n_train, n_test, m = meta["n_train"], meta["n_test"], meta["m"]
    total = n_train + n_test
    images = np.frombuffer(raw, dtype="<f4").reshape(total, IMAGE_SIZE, IMAGE_SIZE, CHANNELS).astype(np.float64)
    tokens = np.full((total, m, MAX_CAPTION_LEN), PAD_ID, dtype=np.int64)
    lengths = np.zeros((total, m), dtype=np.int64)
    for line in cap_lines:
        parts = [int(x) for x in line.split()]
        sid, j, toks = parts[0], parts[1], parts[2:]
        tokens[sid, j, : len(toks)] = toks
        lengths[sid, j] = len(toks)
    class_ids = np.array([parse_caption(tokens[i, 0, : lengths[i, 0]]).class_index for i in range(total)])
    manifest = CorpusManifest(n_train, n_test, m, meta["domain"], meta["seed"],
                              vocabulary=tuple(meta["vocabulary"][str(i)] for i in range(VOCAB_SIZE)),
                              train_ids=tuple(meta["splits"]["train"]), test_ids=tuple(meta["splits"]["test"]),
                              files=meta["files"], digest=meta["digest"])
    ids = np.arange(total)

    def split(sl):
        return Split(images[sl], tokens[sl], lengths[sl], class_ids[sl], ids[sl])

    return Corpus(manifest, split(slice(0, n_train)), split(slice(n_train, total)))
