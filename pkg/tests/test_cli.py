import hashlib
from pathlib import Path

import numpy as np
import pytest
import yaml

from cpgc.cli import main
from cpgc.config import RunConfig
from cpgc.errors import ContractError
from cpgc.evaluation import read_reports_csv
from cpgc.generator import UapArtifact

SMALL = {
    "corpus": {"n_train": 96, "n_test": 48, "m": 3},
    "zoo": {"arch_kinds": ["mean_pool", "max_pool"], "seeds": [0], "epochs": 3, "batch": 32, "min_recall": 0.0},
    "attack": {"epochs": 1, "batch_pairs": 16, "steps_per_epoch": 2, "reference_size": 4},
    "eval": {"ks": [1, 5]},
}


def write_config(path: Path, **sections) -> Path:
    data = {k: dict(v) for k, v in SMALL.items()}
    for k, v in sections.items():
        data[k] = {**data.get(k, {}), **v} if isinstance(v, dict) else v
    path.write_text(yaml.safe_dump(data))
    return path


def digest_tree(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "cfg.yaml")
    base = ["--config", str(cfg), "--out", str(root)]
    assert main(["gen-data", *base]) == 0
    assert main(["pretrain", *base]) == 0
    assert main(["train-uap", *base]) == 0
    return root, cfg, base


def test_layout(run):
    root, _, _ = run
    assert (root / "corpus" / "A" / "manifest.json").exists()
    assert {p.name for p in (root / "zoo").glob("*.manifest.json")} == {"mean_pool-s0.manifest.json",
                                                                         "max_pool-s0.manifest.json"}
    for suffix in (".manifest.json", ".bin", ".trace.csv", ".loss.svg", ".generators.manifest.json"):
        assert (root / "artifacts" / f"cpgc{suffix}").exists()
    assert (root / "artifacts" / "run_config.yaml").exists()


def test_refuses_overwrite_without_force(run, capsys):
    _, _, base = run
    assert main(["gen-data", *base]) == 1
    assert "refusing to overwrite" in capsys.readouterr().err
    assert main(["train-uap", *base]) == 1


def test_force_rerun_is_idempotent(run):
    root, _, base = run
    before = digest_tree(root / "artifacts")
    assert main(["train-uap", *base, "--force"]) == 0
    assert digest_tree(root / "artifacts") == before


def test_seed_flag_gives_identical_corpora(tmp_path):
    cfg = write_config(tmp_path / "cfg.yaml")
    for name in ("a", "b"):
        assert main(["gen-data", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / name)]) == 0
    assert digest_tree(tmp_path / "a" / "corpus") == digest_tree(tmp_path / "b" / "corpus")
    assert main(["gen-data", "--config", str(cfg), "--seed", "8", "--out", str(tmp_path / "c")]) == 0
    assert digest_tree(tmp_path / "a" / "corpus") != digest_tree(tmp_path / "c" / "corpus")


def test_recall_floor_fails_a_truncated_run(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.yaml", zoo={"epochs": 1, "min_recall": 0.8, "arch_kinds": ["mean_pool"]})
    base = ["--config", str(cfg), "--out", str(tmp_path)]
    assert main(["gen-data", *base]) == 0
    assert main(["pretrain", *base]) == 1
    err = capsys.readouterr().err
    assert "mean_pool-s0" in err and "below" in err


def test_unknown_config_key_is_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.yaml", attack={"lamda": 0.2})
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "lamda" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"corpus": {"n_train": 10, "colour": 1}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 1
    with pytest.raises(ContractError):
        RunConfig.from_dict({"evaluation": {}})


def test_missing_inputs_fail_cleanly(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.yaml")
    base = ["--config", str(cfg), "--out", str(tmp_path)]
    assert main(["pretrain", *base]) == 1
    assert main(["eval", *base]) == 1
    assert "missing" in capsys.readouterr().err


def test_variant_flows_through(run):
    root, _, base = run
    assert main(["train-uap", *base, "--variant", "no_CL"]) == 0
    art = UapArtifact.load(root / "artifacts" / "cpgc_no_CL")
    assert art.method == "cpgc_no_CL" and art.config["variant"] == "no_CL"
    lines = (root / "artifacts" / "cpgc_no_CL.trace.csv").read_text().splitlines()[1:]
    assert all(float(line.split(",")[3]) == 0.0 for line in lines)


def test_eval_and_report(run, capsys):
    root, _, base = run
    assert main(["eval", *base, "--variant", "full", "--defense", "gaussian_smooth"]) == 0
    out = capsys.readouterr().out
    assert "white-box" in out and "mean black-box" in out
    plain = read_reports_csv(root / "reports" / "cpgc__none__A-A.csv")
    smoothed = read_reports_csv(root / "reports" / "cpgc__gaussian_smooth__A-A.csv")
    # 2 targets x 2 tasks x 2 ks
    assert len(plain) == len(smoothed) == 8
    assert {r.defense for r, _ in smoothed} == {"gaussian_smooth"}
    assert (root / "reports" / "cpgc__none__A-A.svg").exists()
    assert main(["report", *base, str(root / "reports" / "cpgc__none__A-A.csv")]) == 0
    merged = read_reports_csv(root / "reports" / "summary.csv")
    assert [r for r, _ in merged] == sorted((r for r, _ in plain), key=lambda r: (r.target_id, r.task, r.k))
    assert "| cpgc " in (root / "reports" / "summary.md").read_text()


def test_report_merges_variants_and_flags_conflicts(run, tmp_path, capsys):
    root, _, base = run
    assert main(["eval", *base, "--variant", "no_CL", "--force"]) == 0
    a = root / "reports" / "cpgc__none__A-A.csv"
    b = root / "reports" / "cpgc_no_CL__none__A-A.csv"
    assert main(["report", *base, "--force", str(a), str(b)]) == 0
    text = (root / "reports" / "summary.md").read_text()
    assert "| cpgc " in text and "| cpgc_no_CL " in text
    lines = a.read_text().splitlines()
    cols = lines[1].split(",")
    cols[6] = "0.123456"
    clash = tmp_path / "clash.csv"
    clash.write_text("\n".join([lines[0], ",".join(cols)]) + "\n")
    assert main(["report", *base, "--force", str(a), str(clash)]) == 1
    err = capsys.readouterr().err
    assert "cpgc__none__A-A.csv:2" in err and "clash.csv:2" in err


def test_null_artifact_eval_is_all_zero(run, tmp_path):
    root, cfg, _ = run
    base = ["--config", str(cfg), "--out", str(tmp_path)]
    for sub in ("corpus", "zoo"):
        (tmp_path / sub).symlink_to(root / sub)
    UapArtifact.null().save(tmp_path / "artifacts" / "null")
    assert main(["eval", *base]) == 0
    rows = read_reports_csv(tmp_path / "reports" / "null__none__A-A.csv")
    assert rows and all(r.asr == 0.0 and r.d_rel == 0.0 for r, _ in rows)


def test_env_root_and_baselines(run, tmp_path, monkeypatch):
    root, cfg, _ = run
    monkeypatch.setenv("CPGC_RUN_ROOT", str(tmp_path))
    for sub in ("corpus", "zoo"):
        (tmp_path / sub).symlink_to(root / sub)
    for variant in ("gap", "random_noise"):
        assert main(["train-uap", "--config", str(cfg), "--variant", variant]) == 0
    gap = UapArtifact.load(tmp_path / "artifacts" / "gap")
    noise = UapArtifact.load(tmp_path / "artifacts" / "random_noise")
    assert gap.adversarial_word is None and np.all(np.abs(noise.delta_v) == noise.epsilon_v)
    assert RunConfig.load(cfg).resolved_root() == tmp_path.resolve()
