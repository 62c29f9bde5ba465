"""Turning evolved masks into fine-tuned specialists and the Set of Sets.

Evolution only scores masks on a training subset.  Here the non-dominated
masks of each population are fine-tuned on their task's full training data
with the mask frozen, scored on held-out data, and kept if they remain
non-dominated in (retained parameters, test loss).  The union over tasks,
filtered by per-task non-dominance, is the exported Set of Sets.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import network as nn
from .evolver import Individual
from .genome import GroupedMask, GroupingMap
from .network import ReferenceNet, TrainHyper
from .pareto import domination_matrix, nondominated_sort
from .taskbed import Task, task_metrics

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
FRONT_COLUMNS = ["task_id", "retained_params", "size_bytes", "train_loss", "test_loss", "test_accuracy"]


@dataclass
class SpecialistModel:
    task_id: int
    mask: GroupedMask
    params: np.ndarray = field(repr=False)
    arch: nn.Architecture = field(repr=False)
    train_loss_before: float = float("nan")
    train_loss: float = float("nan")
    test_loss: float = float("nan")
    test_accuracy: float | None = None
    origin: dict = field(default_factory=dict)
    task_losses: dict[int, float] = field(default_factory=dict)

    @property
    def key(self) -> tuple[int, bytes]:
        return self.task_id, self.mask.bits.tobytes()

    @property
    def retained_parameter_count(self) -> int:
        return self.mask.retained_parameter_count

    @property
    def net(self) -> ReferenceNet:
        return ReferenceNet(self.arch, self.params)

    def model_payload(self) -> dict:
        """Serializable model body: only unpruned values are stored."""
        keep = self.mask.expand()
        return {
            "arch": self.arch.to_dict(),
            "grouping_spec": self.mask.grouping.spec(),
            "mask_hex": self.mask.to_hex(),
            "unmasked_params": [float(v) for v in self.params[keep]],
        }

    @property
    def size_bytes(self) -> int:
        return len(json.dumps(self.model_payload(), separators=(",", ":")).encode())

    def metrics(self) -> dict:
        return {
            "retained_params": self.retained_parameter_count,
            "size_bytes": self.size_bytes,
            "train_loss_before": self.train_loss_before,
            "train_loss": self.train_loss,
            "test_loss": self.test_loss,
            "test_accuracy": self.test_accuracy,
            "task_losses": {str(k): v for k, v in sorted(self.task_losses.items())},
        }

    def to_checkpoint(self, provenance: dict | None = None) -> dict:
        body = self.model_payload()
        body.update({
            "format_version": CHECKPOINT_VERSION,
            "task_id": self.task_id,
            "metrics": self.metrics(),
            "provenance": {**self.origin, **(provenance or {})},
        })
        return body


def load_checkpoint(d: dict) -> SpecialistModel:
    if d.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {d.get('format_version')!r}")
    arch = nn.Architecture.from_dict(d["arch"])
    grouping = GroupingMap.from_spec(d["grouping_spec"])
    mask = GroupedMask.from_hex(d["mask_hex"], grouping)
    keep = mask.expand()
    values = np.array(d["unmasked_params"], dtype=np.float64)
    if values.size != int(keep.sum()):
        raise ValueError("checkpoint stores a different number of values than its mask keeps")
    params = np.zeros(arch.n_params)
    params[keep] = values
    m = d.get("metrics", {})
    return SpecialistModel(
        task_id=d["task_id"], mask=mask, params=params, arch=arch,
        train_loss_before=m.get("train_loss_before", float("nan")),
        train_loss=m.get("train_loss", float("nan")),
        test_loss=m.get("test_loss", float("nan")),
        test_accuracy=m.get("test_accuracy"),
        origin=dict(d.get("provenance", {})),
        task_losses={int(k): v for k, v in m.get("task_losses", {}).items()},
    )


def extract_candidates(population: Sequence[Individual]) -> list[Individual]:
    """Front 0 of an evolved population, first occurrence of each mask kept."""
    if not population:
        return []
    objs = np.array([ind.objectives for ind in population])
    front = sorted(nondominated_sort(objs)[0])
    seen, out = set(), []
    for pos in front:
        key = population[pos].mask.bits.tobytes()
        if key not in seen:
            seen.add(key)
            out.append(population[pos])
    return out


def nondominated_models(models: Sequence[SpecialistModel]) -> list[SpecialistModel]:
    if not models:
        return []
    objs = np.array([(m.retained_parameter_count, m.test_loss) for m in models], dtype=np.float64)
    return [models[i] for i in sorted(nondominated_sort(objs)[0])]


def finetune_all(candidates: Sequence[Individual], jat: ReferenceNet, task: Task,
                 hyper: TrainHyper) -> list[SpecialistModel]:
    """Fine-tune each candidate mask on the task and keep the non-dominated ones.

    A candidate whose training diverges is dropped with a warning.
    """
    head = task.label_subspace
    models = []
    for ind in candidates:
        before = nn.loss(jat, ind.mask, task.train, task.loss_kind, head)
        try:
            tuned = nn.train(jat, ind.mask, task.train, hyper, task.loss_kind, head)
        except (nn.DivergenceError, nn.NumericError) as exc:
            log.warning("dropping candidate %d on task %d: %s", ind.id, task.id, exc)
            continue
        test = task_metrics(tuned, None, task, "test")
        models.append(SpecialistModel(
            task_id=task.id, mask=ind.mask, params=tuned.params, arch=jat.arch,
            train_loss_before=before,
            train_loss=nn.loss(tuned, None, task.train, task.loss_kind, head),
            test_loss=test["loss"], test_accuracy=test.get("accuracy"),
            origin={"individual_id": ind.id, "generation": ind.generation},
        ))
    return nondominated_models(models)


@dataclass
class SetOfSets:
    per_task: dict[int, list[SpecialistModel]]
    members: list[SpecialistModel]
    jat_reference: dict[int, dict] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.members)


def cross_evaluate(models: Sequence[SpecialistModel], tasks: Sequence[Task]) -> None:
    """Fill ``task_losses`` with each model's held-out loss on every task."""
    for m in models:
        net = m.net
        for t in tasks:
            m.task_losses[t.id] = nn.loss(net, None, t.test, t.loss_kind, t.label_subspace)


def membership(models: Sequence[SpecialistModel]) -> list[bool]:
    """Per-model flag: non-dominated on at least one task it was scored on.

    Size is the retained parameter count; a model counts as scored on its
    own task (``test_loss``) and on every task in ``task_losses``.
    """
    n = len(models)
    if n == 0:
        return []
    task_ids = sorted({m.task_id for m in models} | {t for m in models for t in m.task_losses})
    size = np.array([m.retained_parameter_count for m in models], dtype=np.float64)
    member = np.zeros(n, dtype=bool)
    for t in task_ids:
        losses = np.array([m.task_losses.get(t, m.test_loss if m.task_id == t else np.nan) for m in models])
        scored = np.flatnonzero(~np.isnan(losses))
        if scored.size == 0:
            continue
        dom = domination_matrix(np.column_stack([size[scored], losses[scored]]))
        member[scored[~dom.any(axis=0)]] = True
    return member.tolist()


def assemble(per_task: dict[int, Sequence[SpecialistModel]], tasks: Sequence[Task] | None = None,
             jat_reference: dict[int, dict] | None = None) -> SetOfSets:
    """Union of the per-task sets, deduplicated on (task, mask), keeping only
    models that no other model dominates on some task.

    With ``tasks`` every model is also scored on every other task before the
    membership test.
    """
    pool: dict[tuple[int, bytes], SpecialistModel] = {}
    for task_id in sorted(per_task):
        for m in per_task[task_id]:
            pool.setdefault(m.key, m)
    models = list(pool.values())
    if tasks is not None:
        cross_evaluate(models, tasks)
    keep = membership(models)
    members = [m for m, k in zip(models, keep) if k]
    kept_keys = {m.key for m in members}
    filtered = {t: [m for m in models if m.task_id == t and m.key in kept_keys] for t in sorted(per_task)}
    return SetOfSets(filtered, members, dict(jat_reference or {}))


def audit_soundness(members: Sequence[SpecialistModel]) -> list[int]:
    """Positions of members dominated on every task they were scored on."""
    return [i for i, ok in enumerate(membership(members)) if not ok]


def _fmt(v):
    return "" if v is None else repr(float(v)) if isinstance(v, float) else v


def export(sos: SetOfSets, out_dir, run_info: dict | None = None) -> Path:
    """Write checkpoints, per-task front CSVs and ``manifest.json``.

    Returns the manifest path.  Output is byte-stable for identical inputs.
    """
    out = Path(out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "fronts").mkdir(exist_ok=True)
    run_info = dict(run_info or {})
    provenance = {k: run_info[k] for k in ("seed", "config_hash") if k in run_info}
    records = []
    for task_id in sorted(sos.per_task):
        models = sorted(sos.per_task[task_id], key=lambda m: (m.retained_parameter_count, m.test_loss))
        rows = []
        for rank, m in enumerate(models):
            name = f"task{task_id}_model{rank:03d}.json"
            ckpt = m.to_checkpoint(provenance)
            (out / "models" / name).write_text(json.dumps(ckpt, sort_keys=True) + "\n")
            records.append({"file": f"models/{name}", "task_id": task_id, "mask_hex": m.mask.to_hex(),
                            "metrics": ckpt["metrics"], "provenance": ckpt["provenance"]})
            rows.append([task_id, m.retained_parameter_count, m.size_bytes, m.train_loss,
                         m.test_loss, m.test_accuracy])
        with open(out / "fronts" / f"task{task_id}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FRONT_COLUMNS)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "n_models": len(records),
        "models": records,
        "jat_reference": {str(k): v for k, v in sorted(sos.jat_reference.items())},
        "run": run_info,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
