"""Command-line pipeline: pretrain -> evolve -> finalize -> report.

Run directory layout::

    <out>/config.json            resolved config + config hash
    <out>/suite_manifest.json    suite spec, seed and split indices
    <out>/jat.json               pretrained reference network
    <out>/jat_baseline.json      restricted-head test metrics per task
    <out>/evolve/<arm>/seed<N>/  trend.csv, audit.jsonl, population.json
    <out>/evolve/<arm>_trend_mean.csv
    <out>/final/                 manifest.json, models/, fronts/, summary.md
    <out>/report/                scatter_task<i>.csv, hv_trends.csv, summary.md

Errors exit with status 1 (2 for usage) after printing one line
``setofsets: error[<tag>]: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import evolver, specialists, taskbed
from . import network as nn
from .config import ConfigError, RunConfig, load_config
from .genome import GroupedMask, GroupingError
from .network import ReferenceNet
from .pareto import HypervolumeTrend

log = logging.getLogger("setofsets")


class PipelineError(RuntimeError):
    tag = "pipeline"


class MissingArtifactError(PipelineError):
    tag = "missing_artifact"

    def __init__(self, missing):
        self.missing = [str(p) for p in missing]
        super().__init__("missing artifacts: " + ", ".join(self.missing))


class LockError(PipelineError):
    tag = "locked"


def _require(*paths: Path) -> None:
    missing = [p for p in paths if not p.exists()]
    if missing:
        raise MissingArtifactError(missing)


@contextmanager
def run_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{out} is in use by another process (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path):
    return json.loads(path.read_text())


def _stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash, "seed": cfg.seed}


def _suite(cfg: RunConfig):
    return taskbed.generate_suite(cfg.suite)


def _load_jat(out: Path) -> ReferenceNet:
    _require(out / "jat.json")
    return ReferenceNet.loads((out / "jat.json").read_text())


def jat_baseline(jat: ReferenceNet, tasks) -> dict[int, dict]:
    return {t.id: taskbed.task_metrics(jat, None, t, "test") for t in tasks}


# -- stages ------------------------------------------------------------------


def cmd_pretrain(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    tasks, data = _suite(cfg)
    jat = taskbed.pretrain_jat(cfg.arch, data, cfg.jat_hyper)
    (out / "config.json").parent.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps())
    _write_json(out / "suite_manifest.json", {**taskbed.suite_manifest(cfg.suite, tasks, data), **_stamp(cfg)})
    (out / "jat.json").write_text(jat.dumps() + "\n")
    baseline = jat_baseline(jat, tasks)
    _write_json(out / "jat_baseline.json", {
        **_stamp(cfg),
        "n_params": jat.arch.n_params,
        "train_accuracy": nn.accuracy(jat, None, data.train),
        "tasks": {str(k): v for k, v in baseline.items()},
    })
    return out / "jat.json"


def _arm_dir(out: Path, arm: str, seed: int) -> Path:
    return out / "evolve" / arm / f"seed{seed:03d}"


def _write_mean_trend(path: Path, arm: str, trends: list[HypervolumeTrend]) -> None:
    task_ids = sorted(trends[0].series)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", "task_id", "generation", "mean_hv", "std_hv"])
        for t in task_ids:
            gens = [g for g, _ in trends[0].series[t]]
            vals = np.array([tr.values(t) for tr in trends])
            for k, g in enumerate(gens):
                w.writerow([arm, t, g, repr(float(vals[:, k].mean())), repr(float(vals[:, k].std()))])


def cmd_evolve(cfg: RunConfig, jat_path: Path | None = None) -> Path:
    out = Path(cfg.output_dir)
    jat_path = jat_path or out / "jat.json"
    _require(jat_path)
    jat = ReferenceNet.loads(Path(jat_path).read_text())
    if jat.arch != cfg.arch:
        raise ConfigError("arch: checkpoint architecture differs from the config")
    tasks, _ = _suite(cfg)
    grouping = cfg.grouping()
    summary = {**_stamp(cfg), "arms": {}}
    for arm in cfg.arms:
        trends, evals, transfers = [], [], []
        for r in range(cfg.repeats):
            engine = cfg.engine_for(arm, r)
            d = _arm_dir(out, arm, engine.seed)
            d.mkdir(parents=True, exist_ok=True)
            with evolver.JsonlSink(d / "audit.jsonl") as sink:
                result = evolver.run(engine, jat, tasks, grouping, sink)
            result.trend.write_csv(d / "trend.csv")
            evolver.dump_populations(result.populations, d / "population.json")
            _write_json(d / "run.json", {
                "config_hash": cfg.config_hash, "seed": engine.seed, "arm": arm,
                "bounds": {str(k): b.to_dict() for k, b in sorted(result.bounds.items())},
                "evaluations": result.total_evaluations, "transfer_events": result.total_transfer_events,
            })
            trends.append(result.trend)
            evals.append(result.total_evaluations)
            transfers.append(result.total_transfer_events)
            log.info("%s seed %d: final hv %s", arm, engine.seed,
                     {t: round(result.trend.values(t)[-1], 4) for t in sorted(result.trend.series)})
        _write_mean_trend(out / "evolve" / f"{arm}_trend_mean.csv", arm, trends)
        summary["arms"][arm] = {"evaluations": evals, "transfer_events": transfers,
                                "seeds": [cfg.seed + r for r in range(cfg.repeats)]}
    _write_json(out / "evolve" / "summary.json", summary)
    return out / "evolve"


def _load_injections(path: Path, grouping, arch):
    """Extra models for finalize: ``[{task_id, mask_hex[, unmasked_params]}]``.

    Entries with parameters join the per-task sets as-is; mask-only
    entries join the fine-tuning candidates.
    """
    models, candidates = [], []
    for k, entry in enumerate(_read_json(path)):
        mask = GroupedMask.from_hex(entry["mask_hex"], grouping)
        if "unmasked_params" in entry:
            keep = mask.expand()
            params = np.zeros(arch.n_params)
            params[keep] = np.array(entry["unmasked_params"], dtype=np.float64)
            models.append(specialists.SpecialistModel(
                task_id=entry["task_id"], mask=mask, params=params, arch=arch,
                origin={"injected": k}))
        else:
            candidates.append(evolver.Individual(
                id=-1 - k, task_id=entry["task_id"], mask=mask, phi1=float("nan"), phi2=float("nan"),
                generation=-1))
    return models, candidates


def cmd_finalize(cfg: RunConfig, run_dir: Path | None = None, inject: Path | None = None) -> Path:
    out = Path(run_dir or cfg.output_dir)
    seed = cfg.seed + cfg.finalize_repeat
    src = _arm_dir(out, cfg.finalize_arm, seed)
    _require(out / "jat.json", out / "jat_baseline.json", src / "population.json")
    jat = _load_jat(out)
    tasks, _ = _suite(cfg)
    task_map = {t.id: t for t in tasks}
    grouping = cfg.grouping()
    populations = evolver.load_populations(src / "population.json", grouping)
    extra_models, extra_candidates = ([], []) if inject is None else _load_injections(inject, grouping, jat.arch)

    per_task = {}
    for t in tasks:
        candidates = specialists.extract_candidates(populations[t.id])
        candidates += [c for c in extra_candidates if c.task_id == t.id]
        per_task[t.id] = specialists.finetune_all(candidates, jat, t, cfg.finetune_hyper)
    for m in extra_models:
        t = task_map[m.task_id]
        m.train_loss = m.train_loss_before = nn.loss(m.net, None, t.train, t.loss_kind, t.label_subspace)
        metrics = taskbed.task_metrics(m.net, None, t, "test")
        m.test_loss, m.test_accuracy = metrics["loss"], metrics.get("accuracy")
        per_task[m.task_id].append(m)

    baseline_doc = _read_json(out / "jat_baseline.json")
    baseline = {int(k): v for k, v in baseline_doc["tasks"].items()}
    sos = specialists.assemble(per_task, tasks, baseline)
    final = out / "final"
    if final.exists():
        for p in sorted(final.glob("models/*.json")):
            p.unlink()
    manifest = specialists.export(sos, final, {
        **_stamp(cfg), "source": f"{cfg.finalize_arm}/seed{seed:03d}", "config": cfg.hashable(),
    })
    table = summary_table(sos, baseline, jat.arch.n_params)
    (final / "summary.md").write_text(table)
    print(table, end="")
    return manifest


def summary_table(sos: specialists.SetOfSets, baseline: dict[int, dict], n_params: int) -> str:
    lines = ["| task | models | best test loss | JAT test loss | best test acc | JAT test acc |"
             " smallest retained | size reduction |",
             "|---|---|---|---|---|---|---|---|"]
    for t in sorted(sos.per_task):
        models = sos.per_task[t]
        base = baseline[t]
        if not models:
            lines.append(f"| {t} | 0 | - | {base['loss']:.4f} | - | {base.get('accuracy', 0):.4f} | - | - |")
            continue
        best = min(models, key=lambda m: m.test_loss)
        smallest = min(models, key=lambda m: m.retained_parameter_count)
        reduction = 1.0 - smallest.retained_parameter_count / n_params
        acc = max((m.test_accuracy or 0.0) for m in models)
        lines.append(
            f"| {t} | {len(models)} | {best.test_loss:.4f} | {base['loss']:.4f} | {acc:.4f} | "
            f"{base.get('accuracy', 0):.4f} | {smallest.retained_parameter_count} | {100 * reduction:.1f}% |"
        )
    return "\n".join(lines) + "\n"


def read_trend_files(out: Path, arm: str) -> dict[int, HypervolumeTrend]:
    trends = {}
    for d in sorted((out / "evolve" / arm).glob("seed*")):
        trends[int(d.name[4:])] = HypervolumeTrend.read_csv(d / "trend.csv")
    return trends


def cmd_report(run_dir: Path) -> Path:
    out = Path(run_dir)
    needed = [out / "config.json", out / "jat_baseline.json", out / "final" / "manifest.json",
              out / "evolve" / "summary.json"]
    _require(*needed)
    cfg_doc = _read_json(out / "config.json")
    manifest = _read_json(out / "final" / "manifest.json")
    baseline = _read_json(out / "jat_baseline.json")
    n_params = baseline["n_params"]
    report = out / "report"
    report.mkdir(exist_ok=True)
    stamp = {"config_hash": cfg_doc["config_hash"], "seed": cfg_doc["config"]["seed"]}

    for t, base in sorted(baseline["tasks"].items(), key=lambda kv: int(kv[0])):
        with open(report / f"scatter_task{t}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "task_id", "retained_params", "size_reduction", "test_loss", "test_accuracy",
                        "config_hash", "seed"])
            w.writerow(["jat", t, n_params, repr(0.0), repr(base["loss"]), repr(base.get("accuracy")),
                        stamp["config_hash"], stamp["seed"]])
            for rec in manifest["models"]:
                if str(rec["task_id"]) != t:
                    continue
                m = rec["metrics"]
                w.writerow(["specialist", t, m["retained_params"], repr(1.0 - m["retained_params"] / n_params),
                            repr(m["test_loss"]), repr(m["test_accuracy"]), stamp["config_hash"], stamp["seed"]])

    arms = [a for a in ("multitask", "singletask") if (out / "evolve" / a).is_dir()]
    finals: dict[str, dict[int, float]] = {}
    with open(report / "hv_trends.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", "task_id", "generation", "mean_hv", "std_hv"])
        for arm in arms:
            per_seed = list(read_trend_files(out, arm).values())
            if not per_seed:
                raise MissingArtifactError([out / "evolve" / arm / "seed*/trend.csv"])
            finals[arm] = {}
            for t in sorted(per_seed[0].series):
                gens = [g for g, _ in per_seed[0].series[t]]
                vals = np.array([tr.values(t) for tr in per_seed])
                for k, g in enumerate(gens):
                    w.writerow([arm, t, g, repr(float(vals[:, k].mean())), repr(float(vals[:, k].std()))])
                finals[arm][t] = float(vals[:, -1].mean())

    lines = [f"# Run report", "", f"config hash `{stamp['config_hash']}`, seed {stamp['seed']}", "",
             "## Final hypervolume (mean over seeds)", "",
             "| task | multitask | singletask | ratio |", "|---|---|---|---|"]
    for t in sorted(set().union(*[f.keys() for f in finals.values()]) if finals else []):
        mt = finals.get("multitask", {}).get(t)
        st = finals.get("singletask", {}).get(t)
        ratio = f"{mt / st:.4f}" if mt is not None and st else "-"
        lines.append(f"| {t} | {'-' if mt is None else f'{mt:.4f}'} | {'-' if st is None else f'{st:.4f}'} | {ratio} |")
    lines += ["", "## Set of Sets", "", f"{manifest['n_models']} models exported.", ""]
    (report / "summary.md").write_text("\n".join(lines) + "\n")
    return report


# -- entry point -------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="setofsets", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("pretrain", "evolve", "finalize", "report", "run"):
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="JSON config file (defaults if omitted)")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", type=Path, help="run directory (overrides output_dir)")
        s.add_argument("--arms", help="comma-separated subset of multitask,singletask")
        s.add_argument("--repeats", type=int)
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("finalize", "run"):
            s.add_argument("--inject", type=Path, help="JSON list of extra models/masks to consider")
    return p


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    if args.arms is not None:
        arms = [a.strip() for a in args.arms.split(",") if a.strip()]
        overrides["arms"] = arms
        fin = dict(cfg.raw["finalize"])
        if fin["arm"] not in arms and arms:
            fin["arm"] = arms[0]
        overrides["finalize"] = fin
    if args.repeats is not None:
        overrides["repeats"] = args.repeats
    return cfg.with_overrides(**overrides) if overrides else cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        out = Path(cfg.output_dir)
        if args.command == "report":
            print(cmd_report(out))
            return 0
        with run_lock(out):
            if args.command in ("pretrain", "run"):
                print(cmd_pretrain(cfg))
            if args.command in ("evolve", "run"):
                print(cmd_evolve(cfg))
            if args.command in ("finalize", "run"):
                print(cmd_finalize(cfg, out, getattr(args, "inject", None)))
        if args.command == "run":
            print(cmd_report(out))
        return 0
    except ConfigError as exc:
        tag, msg = "config", str(exc)
    except PipelineError as exc:
        tag, msg = exc.tag, str(exc)
    except (nn.DivergenceError, nn.NumericError) as exc:
        tag, msg = "numeric", str(exc)
    except (taskbed.SuiteError, GroupingError, nn.NetworkError) as exc:
        tag, msg = "input", str(exc)
    except OSError as exc:
        tag, msg = "io", str(exc)
    print(f"setofsets: error[{tag}]: {' '.join(msg.split())}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
