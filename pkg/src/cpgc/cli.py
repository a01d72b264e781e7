"""``cpgc`` command line: gen-data -> pretrain -> train-uap -> eval -> report.

Every command reads one YAML run config (``--config``), resolves its output
directory under the run root (``--out``, else ``root`` in the config, else
``$CPGC_RUN_ROOT``, else ``./runs``), refuses to overwrite existing outputs
unless ``--force`` is given, and archives the effective config beside what it
wrote. Exit status is 0 on success, 1 on any failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from cpgc.attack import VARIANTS, baseline_gap_train, random_noise_uap, train_uap, write_trace
from cpgc.config import BASELINES, RunConfig
from cpgc.corpus import generate_corpus, load_corpus, write_corpus
from cpgc.defenses import DEFENSES
from cpgc.encoders import ModelZoo, load_model, pretrain_dual_encoder, retrieval_recall, save_model
from cpgc.errors import CPGCError
from cpgc.evaluation import (comparison_table, evaluate_transfer, format_table, merge_reports, read_reports_csv,
                             select, write_reports_csv, write_timings)
from cpgc.generator import UapArtifact, save_generators
from cpgc.plotting import asr_bar_chart, loss_curve

log = logging.getLogger("cpgc")

METHOD_CHOICES = VARIANTS + BASELINES


class CommandError(CPGCError):
    pass


def method_name(variant: str) -> str:
    if variant in BASELINES:
        return variant
    return "cpgc" if variant == "full" else f"cpgc_{variant}"


def _guard(paths: Sequence[Path], force: bool) -> None:
    existing = [p for p in paths if p.exists()]
    if existing and not force:
        raise CommandError(f"refusing to overwrite {existing[0]} (pass --force)")


def _load_zoo(cfg: RunConfig, out: str | None) -> ModelZoo:
    zoo_dir = cfg.dir("zoo", out)
    models = {}
    for member in cfg.zoo.member_ids:
        stem = zoo_dir / member
        if not Path(f"{stem}.manifest.json").exists():
            raise CommandError(f"missing zoo checkpoint {stem}.manifest.json (run `cpgc pretrain`)")
        models[member] = load_model(stem)
    return ModelZoo(models[cfg.zoo.surrogate], [models[m] for m in cfg.zoo.member_ids])


def _load_domain(cfg: RunConfig, out: str | None, domain: str):
    path = cfg.dir("corpus", out) / domain
    if not (path / "manifest.json").exists():
        raise CommandError(f"missing corpus {path} (run `cpgc gen-data`)")
    return load_corpus(path)


# -- commands ----------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    out_root = cfg.dir("corpus", args.out)
    domains = [args.domain] if args.domain else cfg.corpus.domains
    _guard([out_root / d / "manifest.json" for d in domains], args.force)
    for d in domains:
        corpus = generate_corpus(cfg.corpus.n_train, cfg.corpus.n_test, cfg.corpus.m, d, cfg.seed)
        write_corpus(corpus, out_root / d)
        man = corpus.manifest
        print(f"corpus {d}: train ids {man.train_ids[0]}..{man.train_ids[1] - 1}, "
              f"test ids {man.test_ids[0]}..{man.test_ids[1] - 1}, m={man.m}, digest {man.digest[:16]}")
    cfg.archive(out_root)
    return 0


def cmd_pretrain(cfg: RunConfig, args) -> int:
    corpus = _load_domain(cfg, args.out, cfg.zoo.train_domain)
    zoo_dir = cfg.dir("zoo", args.out)
    _guard([zoo_dir / f"{m}.manifest.json" for m in cfg.zoo.member_ids], args.force)
    failed = []
    rows = ["member,TR_R@1,IR_R@1"]
    for arch, seed in cfg.zoo.members:
        member = f"{arch}-s{seed}"
        try:
            model = pretrain_dual_encoder(corpus, arch, seed, epochs=cfg.zoo.epochs, batch=cfg.zoo.batch,
                                          temperature=cfg.zoo.temperature, learning_rate=cfg.zoo.learning_rate)
        except CPGCError as exc:
            raise CommandError(f"pre-training {member} failed: {exc}") from exc
        save_model(model, zoo_dir / member)
        rec = retrieval_recall(model, corpus.test, 1)
        ok = min(rec.values()) >= cfg.zoo.min_recall
        print(f"{member}: held-out R@1 TR={rec['TR']:.4f} IR={rec['IR']:.4f} {'ok' if ok else 'BELOW FLOOR'}")
        rows.append(f"{member},{rec['TR']:.6f},{rec['IR']:.6f}")
        if not ok:
            failed.append(member)
    (zoo_dir / "recall.csv").write_text("\n".join(rows) + "\n")
    cfg.archive(zoo_dir)
    if failed:
        raise CommandError(f"R@1 below {cfg.zoo.min_recall} for: {', '.join(failed)}")
    return 0


def cmd_train_uap(cfg: RunConfig, args) -> int:
    variant = args.variant or "full"
    method = method_name(variant)
    corpus = _load_domain(cfg, args.out, cfg.zoo.train_domain)
    art_dir = cfg.dir("artifacts", args.out)
    stem = art_dir / method
    _guard([Path(f"{stem}.manifest.json")], args.force)
    surrogate = load_model(cfg.dir("zoo", args.out) / cfg.zoo.surrogate)
    attack_cfg = cfg.attack_config(**({"variant": variant} if variant in VARIANTS else {}))
    if variant == "random_noise":
        artifact, result = random_noise_uap(attack_cfg, surrogate), None
    else:
        trainer = baseline_gap_train if variant == "gap" else train_uap
        result = trainer(corpus, surrogate, attack_cfg)
        artifact = result.artifact
        artifact.generator_ref = f"{method}.generators"
        save_generators(art_dir / f"{method}.generators", result.noise, result.generators, {"method": method})
        write_trace(result.trace, art_dir / f"{method}.trace.csv")
        loss_curve(result.trace, art_dir / f"{method}.loss.svg")
    artifact.save(stem)
    linf = float(np.max(np.abs(artifact.delta_v)))
    print(f"{method}: ||delta_v||_inf = {linf:.6f} <= {artifact.epsilon_v:.6f}; "
          f"adversarial word = {artifact.adversarial_word}")
    if result is not None:
        for branch in ("image", "text"):
            means = result.epoch_means(branch)
            if means:
                print(f"{method} {branch} loss per epoch: " + " ".join(f"{v:.4f}" for v in means))
    cfg.archive(art_dir)
    return 0


def _artifact_stems(art_dir: Path, variant: str | None) -> list[Path]:
    if variant:
        stems = [art_dir / method_name(variant)]
    else:
        stems = sorted(p.parent / p.name[: -len(".manifest.json")] for p in art_dir.glob("*.manifest.json")
                       if not p.name.endswith(".generators.manifest.json"))
    missing = [s for s in stems if not Path(f"{s}.manifest.json").exists()]
    if missing or not stems:
        raise CommandError(f"missing artifact {missing[0] if missing else art_dir} (run `cpgc train-uap`)")
    return stems


def _summary_line(reports, label: str) -> str:
    k = min(r.k for r in reports)
    parts = []
    for task in ("TR", "IR"):
        wb = select(reports, white_box=True, k=k, task=task)
        bb = select(reports, white_box=False, k=k, task=task)
        bb_text = f"{np.mean([r.asr for r in bb]):.4f}" if bb else "n/a"
        parts.append(f"{task} white-box {wb[0].asr:.4f} / mean black-box {bb_text}")
    return f"{label}: ASR@{k} " + "; ".join(parts)


def cmd_eval(cfg: RunConfig, args) -> int:
    zoo = _load_zoo(cfg, args.out)
    report_dir = cfg.dir("reports", args.out)
    domains = [args.domain] if args.domain else cfg.eval.domains
    defenses = [None, *cfg.eval.defenses]
    if args.defense and args.defense not in defenses:
        defenses.append(args.defense)
    stems = _artifact_stems(cfg.dir("artifacts", args.out), args.variant)
    jobs = [(s, dom, d) for s in stems for dom in domains for d in defenses]
    names = [f"{s.name}__{d or 'none'}__{cfg.zoo.train_domain}-{dom}" for s, dom, d in jobs]
    _guard([report_dir / f"{n}.csv" for n in names], args.force)
    corpora = {dom: _load_domain(cfg, args.out, dom) for dom in domains}
    for (stem, dom, defense), name in zip(jobs, names):
        artifact = UapArtifact.load(stem)
        pair = f"{cfg.zoo.train_domain}->{dom}"
        reports = evaluate_transfer(zoo, artifact, corpora[dom].test, cfg.eval.ks, cfg.eval.mode, defense, pair)
        write_reports_csv(reports, report_dir / f"{name}.csv")
        write_timings(reports, report_dir / f"{name}.timing.csv")
        (report_dir / f"{name}.txt").write_text(format_table(reports) + "\n")
        asr_bar_chart(reports, report_dir / f"{name}.svg", title=f"{artifact.method} ({defense or 'no defense'}, {pair})")
        print(_summary_line(reports, f"{artifact.method} [{defense or 'none'}] {pair}"))
    cfg.archive(report_dir)
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    report_dir = cfg.dir("reports", args.out)
    inputs = [Path(p) for p in args.inputs] or sorted(p for p in report_dir.glob("*.csv")
                                                       if not p.name.endswith(".timing.csv") and p.name != "summary.csv")
    if not inputs:
        raise CommandError(f"no report CSVs found in {report_dir}")
    outputs = [report_dir / "summary.md", report_dir / "summary.csv"]
    _guard(outputs, args.force)
    sources = [row for path in inputs for row in read_reports_csv(path)]
    merged = merge_reports(sources)
    ks = sorted({r.k for r in merged})
    doc = ["# Attack comparison", "",
           "Rows are methods, columns are (target, task). Published values are shown for reference only; "
           "they come from full-size pretrained models and real datasets and are not comparable thresholds.", ""]
    for k in ks:
        doc += [comparison_table(merged, k), ""]
    doc += ["Sources: " + ", ".join(p.name for p in inputs), ""]
    report_dir.mkdir(parents=True, exist_ok=True)
    outputs[0].write_text("\n".join(doc))
    write_reports_csv(merged, outputs[1])
    print(comparison_table(merged, ks[0]))
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic corpus"),
    "pretrain": (cmd_pretrain, "pre-train every zoo member"),
    "train-uap": (cmd_train_uap, "train a universal perturbation (or a baseline)"),
    "eval": (cmd_eval, "evaluate artifacts over the zoo"),
    "report": (cmd_report, "merge report CSVs into one comparison table"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpgc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--out", help="run root directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train-uap", "eval"):
            p.add_argument("--variant", choices=METHOD_CHOICES,
                           help="ablation variant or baseline (train-uap default: full)")
        if name == "eval":
            p.add_argument("--defense", choices=DEFENSES)
        if name in ("gen-data", "eval"):
            p.add_argument("--domain", choices=("A", "B"))
        if name == "report":
            p.add_argument("inputs", nargs="*", help="report CSVs (default: every CSV in the report dir)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        return COMMANDS[args.command][0](cfg, args)
    except (CPGCError, OSError) as exc:
        print(f"cpgc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
