import csv
import json
import shutil

import pytest

from setofsets import cli, genome, specialists
from setofsets.config import ConfigError, build_config
from setofsets.pareto import HypervolumeTrend

TINY = {
    "seed": 4,
    "suite": {"samples_per_class": 30, "cluster_spread": 0.5},
    "arch": {"layer_sizes": [16, 10, 10]},
    "jat_hyper": {"epochs": 15},
    "engine": {"population_size": 8, "generations": 3},
    "finetune_hyper": {"epochs": 2, "lr": 0.01},
    "repeats": 2,
}


def write_config(path, **extra):
    doc = json.loads(json.dumps(TINY))
    doc.update(extra)
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "tiny.json")
    assert cli.main(["run", "--config", str(cfg), "--out", str(root / "a")]) == 0
    return root, cfg


def test_invalid_arch_names_field(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.json", arch={"layer_sizes": [16]})
    assert cli.main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("setofsets: error[config]: arch.layer_sizes")
    with pytest.raises(ConfigError, match="engine.population_size"):
        build_config({"engine": {"population_size": 7}})
    with pytest.raises(ConfigError, match="suite.bogus"):
        build_config({"suite": {"bogus": 1}})


def test_run_layout_and_counts(pipeline):
    root, _ = pipeline
    out = root / "a"
    for name in ("config.json", "suite_manifest.json", "jat.json", "jat_baseline.json"):
        assert (out / name).is_file()
    baseline = json.loads((out / "jat_baseline.json").read_text())
    assert set(baseline["tasks"]) == {"1", "2"}
    for arm in ("multitask", "singletask"):
        assert len(list((out / "evolve" / arm).glob("seed*/trend.csv"))) == 2
        assert (out / "evolve" / f"{arm}_trend_mean.csv").is_file()
    summary = json.loads((out / "evolve" / "summary.json").read_text())
    assert summary["arms"]["singletask"]["transfer_events"] == [0, 0]
    assert summary["arms"]["multitask"]["evaluations"] == summary["arms"]["singletask"]["evaluations"] == [64, 64]
    for line in (out / "evolve" / "singletask" / "seed004" / "audit.jsonl").read_text().splitlines():
        assert json.loads(line)["transfer_events"] == 0


def test_artifacts_share_hash_and_seed(pipeline):
    root, _ = pipeline
    out = root / "a"
    cfg = json.loads((out / "config.json").read_text())
    h, seed = cfg["config_hash"], cfg["config"]["seed"]
    docs = [out / "suite_manifest.json", out / "jat_baseline.json", out / "evolve" / "summary.json",
            out / "evolve" / "multitask" / "seed004" / "run.json"]
    for p in docs:
        d = json.loads(p.read_text())
        assert d["config_hash"] == h and d["seed"] in (seed, seed + 1)
    man = json.loads((out / "final" / "manifest.json").read_text())
    assert man["run"]["config_hash"] == h and man["run"]["seed"] == seed
    assert all(rec["provenance"]["config_hash"] == h for rec in man["models"])
    rows = list(csv.DictReader(open(out / "report" / "scatter_task1.csv")))
    assert {r["config_hash"] for r in rows} == {h}


def test_rerun_is_byte_identical(pipeline):
    root, cfg = pipeline
    assert cli.main(["run", "--config", str(cfg), "--out", str(root / "b")]) == 0
    a, b = root / "a", root / "b"
    for rel in ("jat.json", "final/manifest.json", "evolve/multitask_trend_mean.csv", "report/hv_trends.csv"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    for p in sorted(a.glob("evolve/*/seed*/trend.csv")):
        assert p.read_bytes() == (b / p.relative_to(a)).read_bytes()
    assert specialists.file_sha256(a / "final/manifest.json") == specialists.file_sha256(b / "final/manifest.json")


def test_finalize_summary_and_baseline(pipeline, capsys):
    root, cfg = pipeline
    out = root / "a"
    assert cli.main(["finalize", "--config", str(cfg), "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "size reduction" in printed
    baseline = json.loads((out / "jat_baseline.json").read_text())
    man = json.loads((out / "final" / "manifest.json").read_text())
    assert man["jat_reference"] == baseline["tasks"]
    n_params = baseline["n_params"]
    rows = [line for line in printed.splitlines() if line[:3] in ("| 1", "| 2")]
    assert len(rows) == 2
    for line in rows:
        cells = [c.strip() for c in line.strip("|").split("|")]
        if cells[1] == "0":
            continue
        smallest, reduction = int(cells[6]), cells[7]
        assert reduction == f"{100 * (1 - smallest / n_params):.1f}%"
        assert cells[3] == f"{baseline['tasks'][cells[0]]['loss']:.4f}"


def test_report_schema_and_means(pipeline):
    root, _ = pipeline
    out = root / "a"
    for t in (1, 2):
        rows = list(csv.DictReader(open(out / "report" / f"scatter_task{t}.csv")))
        assert [r["kind"] for r in rows].count("jat") == 1
    with open(out / "report" / "hv_trends.csv") as fh:
        reader = csv.DictReader(fh)
        assert reader.fieldnames == ["arm", "task_id", "generation", "mean_hv", "std_hv"]
        rows = list(reader)
    for arm in ("multitask", "singletask"):
        trends = [HypervolumeTrend.read_csv(p) for p in sorted((out / "evolve" / arm).glob("seed*/trend.csv"))]
        for r in (r for r in rows if r["arm"] == arm):
            vals = [tr.values(int(r["task_id"]))[int(r["generation"])] for tr in trends]
            assert abs(float(r["mean_hv"]) - sum(vals) / len(vals)) <= 1e-12
    assert "ratio" in (out / "report" / "summary.md").read_text()


def test_report_missing_artifacts(tmp_path, capsys):
    assert cli.main(["report", "--out", str(tmp_path / "nothing")]) == 1
    err = capsys.readouterr().err
    assert "error[missing_artifact]" in err and "manifest.json" in err and "config.json" in err


def test_injected_dominated_model_is_excluded(pipeline, tmp_path):
    root, cfg = pipeline
    out = tmp_path / "inj"
    shutil.copytree(root / "a", out)
    man = json.loads((out / "final" / "manifest.json").read_text())
    biggest = max((r for r in man["models"] if r["task_id"] == 1), key=lambda r: r["metrics"]["retained_params"])
    ckpt = json.loads((out / "final" / biggest["file"]).read_text())
    model = specialists.load_checkpoint(ckpt)
    ones = genome.GroupedMask.ones(model.mask.grouping)
    # all-ones mask with every weight zeroed: maximal size, no skill
    injected = [{"task_id": 1, "mask_hex": ones.to_hex(), "unmasked_params": [0.0] * ones.retained_parameter_count}]
    path = tmp_path / "inject.json"
    path.write_text(json.dumps(injected))
    assert cli.main(["finalize", "--config", str(cfg), "--out", str(out), "--inject", str(path)]) == 0
    after = json.loads((out / "final" / "manifest.json").read_text())
    assert not any(r["provenance"].get("injected") == 0 for r in after["models"])
    models = [specialists.load_checkpoint(json.loads((out / "final" / r["file"]).read_text())) for r in after["models"]]
    assert specialists.audit_soundness(models) == []


def test_lock_blocks_second_owner(tmp_path, capsys):
    out = tmp_path / "locked"
    with cli.run_lock(out):
        assert cli.main(["pretrain", "--config", str(write_config(tmp_path / "c.json")), "--out", str(out)]) == 1
    assert "error[locked]" in capsys.readouterr().err
    assert not (out / ".lock").exists()


def test_arms_flag_restricts_evolve(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    out = tmp_path / "one"
    assert cli.main(["pretrain", "--config", str(cfg), "--out", str(out)]) == 0
    assert cli.main(["evolve", "--config", str(cfg), "--out", str(out), "--arms", "singletask",
                     "--repeats", "1", "--seed", "4"]) == 0
    assert not (out / "evolve" / "multitask").exists()
    assert len(list((out / "evolve" / "singletask").glob("seed*"))) == 1
