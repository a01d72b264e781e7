"""Retrieval attack evaluation: ASR@k, d_rel, transfer over a zoo, ablations,
defenses, cross-domain runs and baselines.

Retrieval is judged at the attribute-class level: a query counts as correct
at k when any of its top-k gallery items shares its class. Galleries are the
full test split. Word positions for the adversarial substitution are chosen
with the surrogate (the attacker's model), so every target sees the same
adversarial captions.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from cpgc.attack import AttackConfig, importance_positions, substitute_word, train_uap
from cpgc.corpus import Corpus, Split
from cpgc.defenses import apply_defense
from cpgc.encoders import DualEncoderModel, ModelZoo, topk_hits
from cpgc.errors import ContractError, UndefinedASRError
from cpgc.generator import UapArtifact

TASKS = ("TR", "IR")
MODES = ("joint", "image_only", "text_only")
DEFAULT_KS = (1, 5, 10)

# published figures for the full-scale attack, carried as annotations only
PUBLISHED_ASR = {
    "cpgc_white_box_TR": 90.13,
    "cpgc_white_box_IR": 88.82,
    "gap_white_box_TR": 69.78,
    "gap_white_box_IR": 81.59,
    "cpgc_no_CL_white_box_TR": 76.46,
    "cpgc_no_CL_white_box_IR": 77.58,
    "cpgc_no_Dis_white_box_TR": 79.54,
    "cpgc_no_Dis_white_box_IR": 82.46,
    "cpgc_random_positives_white_box_TR": 61.87,
    "cpgc_random_positives_white_box_IR": 65.17,
    "cpgc_no_cross_attention_white_box_TR": 85.18,
    "cpgc_no_cross_attention_white_box_IR": 83.07,
    "cpgc_transfer_IR_clip_cnn": 72.51,
}


@dataclass(frozen=True)
class AdversarialSplit:
    """Clean and attacked copies of a test split (images, flattened captions)."""

    images: np.ndarray
    adv_images: np.ndarray
    tokens: np.ndarray
    adv_tokens: np.ndarray
    lengths: np.ndarray
    image_classes: np.ndarray
    caption_classes: np.ndarray
    caption_owner: np.ndarray
    positions: np.ndarray
    degenerate: int


def attack_split(split: Split, artifact: UapArtifact, position_model: DualEncoderModel,
                 mode: str = "joint") -> AdversarialSplit:
    """Apply the artifact to every test pair; ``mode`` picks which modalities are perturbed."""
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}")
    artifact.check_budget()
    tokens, lengths, owner = split.flat_captions()
    positions = importance_positions(tokens, lengths, position_model)
    images = split.images
    adv_images = np.clip(images + artifact.delta_v, 0.0, 1.0) if mode != "text_only" else images
    word = artifact.adversarial_word if mode != "image_only" else None
    adv_tokens = substitute_word(tokens, positions, word)
    degenerate = int(np.sum(tokens[np.arange(len(tokens)), positions] == word)) if word is not None else len(tokens)
    return AdversarialSplit(images, adv_images, tokens, adv_tokens, lengths, split.class_ids,
                            split.class_ids[owner], owner, positions, degenerate)


@dataclass
class Embeddings:
    image: np.ndarray
    text: np.ndarray
    adv_image: np.ndarray
    adv_text: np.ndarray

    @classmethod
    def compute(cls, model: DualEncoderModel, adv: AdversarialSplit, defense: str | None = None) -> "Embeddings":
        def enc_img(x):
            return model.encode_images(apply_defense(x, defense)).data

        return cls(enc_img(adv.images), model.encode_tokens(adv.tokens, adv.lengths).data,
                   enc_img(adv.adv_images), model.encode_tokens(adv.adv_tokens, adv.lengths).data)


@dataclass
class AsrResult:
    asr: float
    clean_recall: float
    adv_recall: float
    n_correct: int
    n_queries: int


def asr_from_embeddings(emb: Embeddings, adv: AdversarialSplit, k: int, task: str) -> AsrResult:
    """ASR over the queries whose clean top-k holds a same-class gallery item."""
    if task == "TR":
        q_cls, g_cls = adv.image_classes, adv.caption_classes
        clean = topk_hits(emb.image, emb.text, q_cls, g_cls, k)
        attacked = topk_hits(emb.adv_image, emb.adv_text, q_cls, g_cls, k)
    elif task == "IR":
        q_cls, g_cls = adv.caption_classes, adv.image_classes
        clean = topk_hits(emb.text, emb.image, q_cls, g_cls, k)
        attacked = topk_hits(emb.adv_text, emb.adv_image, q_cls, g_cls, k)
    else:
        raise ContractError(f"task must be TR or IR, got {task!r}")
    n_correct = int(clean.sum())
    if n_correct == 0:
        raise UndefinedASRError(f"no initially correct {task} queries at k={k}")
    broken = int(np.sum(clean & ~attacked))
    return AsrResult(broken / n_correct, float(clean.mean()), float(attacked.mean()), n_correct, len(clean))


def attack_success_rate(model: DualEncoderModel, split: Split, artifact: UapArtifact, k: int, task: str,
                        mode: str = "joint", position_model: DualEncoderModel | None = None,
                        defense: str | None = None) -> AsrResult:
    if len(split) == 0:
        raise ContractError("test split is empty")
    adv = attack_split(split, artifact, position_model or model, mode)
    return asr_from_embeddings(Embeddings.compute(model, adv, defense), adv, k, task)


def relative_distances(emb: Embeddings, adv: AdversarialSplit) -> tuple[np.ndarray, int]:
    """Per image-caption pair ``(||f_I(v') - f_T(t')|| - ||f_I(v) - f_T(t)||) / ||f_I(v) - f_T(t)||``.

    Pairs with clean distance <= 1e-8 are dropped; their count is returned.
    """
    owner = adv.caption_owner
    clean = np.linalg.norm(emb.image[owner] - emb.text, axis=1)
    attacked = np.linalg.norm(emb.adv_image[owner] - emb.adv_text, axis=1)
    ok = clean > 1e-8
    return (attacked[ok] - clean[ok]) / clean[ok], int(np.sum(~ok))


def relative_distance(model: DualEncoderModel, split: Split, artifact: UapArtifact,
                      position_model: DualEncoderModel | None = None, mode: str = "joint") -> float:
    adv = attack_split(split, artifact, position_model or model, mode)
    d, _ = relative_distances(Embeddings.compute(model, adv), adv)
    return float(d.mean()) if len(d) else 0.0


# -- reports -----------------------------------------------------------------

@dataclass
class EvalReport:
    surrogate_id: str
    target_id: str
    task: str
    k: int
    clean_recall: float
    adv_recall: float
    asr: float
    d_rel: float
    white_box: bool
    method: str = "cpgc"
    mode: str = "joint"
    defense: str = "none"
    no_CL: bool = False
    no_Dis: bool = False
    random_positives: bool = False
    no_cross_attention: bool = False
    domain_pair: str = "A->A"
    n_samples: int = 0
    n_correct: int = 0
    runtime_seconds: float = 0.0
    published_reference: str = ""

    def sort_key(self):
        return (self.target_id, self.task, self.k)


REPORT_COLUMNS = tuple(f.name for f in fields(EvalReport))


def _variant_flags(method: str) -> dict[str, bool]:
    return {v: method == f"cpgc_{v}" for v in ("no_CL", "no_Dis", "random_positives", "no_cross_attention")}


def _published_reference(method: str, white_box: bool, task: str) -> str:
    key = f"{method}_white_box_{task}"
    return f"{PUBLISHED_ASR[key]:.2f}" if white_box and key in PUBLISHED_ASR else ""


def evaluate_transfer(zoo: ModelZoo, artifact: UapArtifact, split: Split, ks: Sequence[int] = DEFAULT_KS,
                      mode: str = "joint", defense: str | None = None, domain_pair: str = "A->A") -> list[EvalReport]:
    """One report per (target, task, k); the surrogate's own row is flagged white-box."""
    if artifact.surrogate_digest and artifact.surrogate_digest != zoo.surrogate.digest():
        raise ContractError("artifact was trained on a different surrogate than the zoo's")
    adv = attack_split(split, artifact, zoo.surrogate, mode)
    reports = []
    for target in zoo.targets:
        t0 = time.perf_counter()
        emb = Embeddings.compute(target, adv, defense)
        d_rel, _ = relative_distances(emb, adv)
        white = zoo.is_white_box(target)
        for task in TASKS:
            for k in ks:
                r = asr_from_embeddings(emb, adv, k, task)
                reports.append(EvalReport(
                    zoo.surrogate.model_id, target.model_id, task, int(k), r.clean_recall, r.adv_recall, r.asr,
                    float(d_rel.mean()) if len(d_rel) else 0.0, white, artifact.method, mode, defense or "none",
                    domain_pair=domain_pair, n_samples=r.n_queries, n_correct=r.n_correct,
                    runtime_seconds=0.0, published_reference=_published_reference(artifact.method, white, task),
                    **_variant_flags(artifact.method)))
        elapsed = time.perf_counter() - t0
        for rep in reports[-len(TASKS) * len(ks):]:
            rep.runtime_seconds = elapsed
    return sorted(reports, key=EvalReport.sort_key)


def run_ablation(config: AttackConfig, variant: str, zoo: ModelZoo, corpus: Corpus,
                 ks: Sequence[int] = DEFAULT_KS) -> tuple[UapArtifact, list[EvalReport]]:
    """Retrain the UAP under ``variant`` and evaluate it like the full method."""
    if variant not in ("no_CL", "no_Dis", "random_positives", "no_cross_attention"):
        raise ContractError(f"unknown ablation variant {variant!r}")
    result = train_uap(corpus, zoo.surrogate, replace(config, variant=variant))
    return result.artifact, evaluate_transfer(zoo, result.artifact, corpus.test, ks)


def cross_domain_eval(artifact: UapArtifact, corpus: Corpus, zoo: ModelZoo, domain_pair: str,
                      ks: Sequence[int] = DEFAULT_KS) -> list[EvalReport]:
    """Evaluate an artifact trained on one domain against another domain's test split."""
    if "->" not in domain_pair:
        raise ContractError(f"domain pair must look like 'A->B', got {domain_pair!r}")
    return evaluate_transfer(zoo, artifact, corpus.test, ks, domain_pair=domain_pair)


def select(reports: Iterable[EvalReport], **criteria) -> list[EvalReport]:
    return [r for r in reports if all(getattr(r, k) == v for k, v in criteria.items())]


def white_box_asr(reports: Iterable[EvalReport], k: int = 1) -> float:
    """Mean of the white-box TR and IR ASR at ``k``."""
    rows = select(reports, white_box=True, k=k)
    if not rows:
        raise ContractError("no white-box rows")
    return float(np.mean([r.asr for r in rows]))


# runtime varies between executions, so it stays out of the CSV (see write_timings)
CSV_COLUMNS = tuple(c for c in REPORT_COLUMNS if c != "runtime_seconds")
KEY_COLUMNS = ("method", "surrogate_id", "target_id", "task", "k", "mode", "defense", "domain_pair")
_BOOL_COLUMNS = {f.name for f in fields(EvalReport) if f.type in ("bool", bool)}
_INT_COLUMNS = {f.name for f in fields(EvalReport) if f.type in ("int", int)}
_FLOAT_COLUMNS = {f.name for f in fields(EvalReport) if f.type in ("float", float)}


def write_reports_csv(reports: Sequence[EvalReport], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in reports:
            row = asdict(r)
            w.writerow([f"{row[c]:.6f}" if isinstance(row[c], float) else row[c] for c in CSV_COLUMNS])
    return path


def write_timings(reports: Sequence[EvalReport], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target_id", "task", "k", "runtime_seconds"])
        for r in reports:
            w.writerow([r.target_id, r.task, r.k, f"{r.runtime_seconds:.3f}"])
    return path


class ReportFormatError(ContractError):
    pass


def read_reports_csv(path: str | Path) -> list[tuple[EvalReport, str]]:
    """Parse a report CSV; returns (report, "file:row") pairs. Row numbers count the header as 1."""
    path = Path(path)
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise ReportFormatError(f"{path}:1: unexpected header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_COLUMNS):
                raise ReportFormatError(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
            values = {}
            try:
                for col, raw in zip(CSV_COLUMNS, row):
                    if col in _BOOL_COLUMNS:
                        if raw not in ("True", "False"):
                            raise ValueError(f"{col}={raw!r} is not a boolean")
                        values[col] = raw == "True"
                    elif col in _INT_COLUMNS:
                        values[col] = int(raw)
                    elif col in _FLOAT_COLUMNS:
                        values[col] = float(raw)
                    else:
                        values[col] = raw
            except ValueError as exc:
                raise ReportFormatError(f"{path}:{lineno}: {exc}") from None
            out.append((EvalReport(**values), f"{path}:{lineno}"))
    return out


def merge_reports(sources: Iterable[tuple[EvalReport, str]]) -> list[EvalReport]:
    """Union of report rows; exact duplicates collapse, conflicting duplicates raise."""
    seen: dict[tuple, tuple[EvalReport, str]] = {}
    for rep, where in sources:
        key = tuple(getattr(rep, c) for c in KEY_COLUMNS)
        if key in seen:
            prev, prev_where = seen[key]
            if replace(prev, runtime_seconds=0.0) != replace(rep, runtime_seconds=0.0):
                raise ReportFormatError(f"conflicting rows for {dict(zip(KEY_COLUMNS, key))}: {prev_where} and {where}")
            continue
        seen[key] = (rep, where)
    return sorted((r for r, _ in seen.values()), key=lambda r: (r.method, r.defense, r.domain_pair, *r.sort_key()))


def comparison_table(reports: Sequence[EvalReport], k: int = 1) -> str:
    """Method x (target, task) grid of ASR@k in percent, published figures alongside."""
    rows = [r for r in reports if r.k == k]
    cols = sorted({(r.target_id + ("*" if r.white_box else ""), r.task) for r in rows})
    groups = sorted({(r.method, r.mode, r.defense, r.domain_pair) for r in rows})
    head = f"| {'method':<28} | {'defense':<15} | {'domain':<6} | " + " | ".join(f"{t} {task}" for t, task in cols) \
        + " | reference (published, TR/IR) |"
    lines = [f"ASR@{k} (%), * = white-box", "", head, "|" + "---|" * (len(cols) + 4)]
    for method, mode, defense, domain in groups:
        cells = []
        for t, task in cols:
            hit = [r for r in rows if (r.method, r.mode, r.defense, r.domain_pair) == (method, mode, defense, domain)
                   and r.target_id + ("*" if r.white_box else "") == t and r.task == task]
            cells.append(f"{100 * hit[0].asr:.2f}" if hit else "-")
        ref = [PUBLISHED_ASR.get(f"{method}_white_box_{task}") for task in TASKS]
        ref_text = "/".join(f"{v:.2f}" for v in ref) if all(v is not None for v in ref) else ""
        label = method if mode == "joint" else f"{method} ({mode})"
        lines.append(f"| {label:<28} | {defense:<15} | {domain:<6} | " + " | ".join(cells) + f" | {ref_text} |")
    return "\n".join(lines)


def format_table(reports: Sequence[EvalReport]) -> str:
    """Fixed-width human-readable table (runtime excluded so the text is reproducible)."""
    head = f"{'method':<28} {'target':<16} {'wb':<3} {'task':<4} {'k':>3} {'clean':>7} {'adv':>7} {'ASR':>7} {'d_rel':>8} {'defense':<16} {'domain':<6}"
    lines = [head, "-" * len(head)]
    for r in reports:
        lines.append(f"{r.method:<28} {r.target_id:<16} {'*' if r.white_box else '':<3} {r.task:<4} {r.k:>3} "
                     f"{r.clean_recall:>7.3f} {r.adv_recall:>7.3f} {r.asr:>7.3f} {r.d_rel:>8.4f} "
                     f"{r.defense:<16} {r.domain_pair:<6}")
    return "\n".join(lines)
