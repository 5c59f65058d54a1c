"""
Attack evaluation: fooling ratios, accuracies, dense-prediction metrics,
transfer runs, parameter counts and inference timing.

Fooling is measured against the victim's own clean prediction, accuracy
against ground truth; reports carry both.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
import timeit
from dataclasses import dataclass, field

import numpy as np

from . import generator as G
from . import tensor as T
from .data import (
    CLASSIFICATION,
    DENSE_CLASSIFICATION,
    DENSE_REGRESSION,
    DENSE_UNIT_VECTOR,
    SHARED_INPUT,
    MultiTaskDataset,
)
from .victims import VictimFamily, VictimModel, count_family_parameters, predict

WITHIN_DEGREES = (11.25, 22.5, 30.0)
REL_ERR_FLOOR = 1e-6


# -- plain metrics ------------------------------------------------------------


def _labels(pred: np.ndarray, kind: str | None = None) -> np.ndarray:
    """Argmax over the class axis unless ``pred`` already holds labels."""
    pred = np.asarray(pred)
    if kind == CLASSIFICATION and pred.ndim == 1:
        return pred.astype(np.int64)
    if kind == DENSE_CLASSIFICATION and pred.ndim == 3:
        return pred.astype(np.int64)
    return pred.argmax(axis=1)


def label_accuracy(pred: np.ndarray, y: np.ndarray) -> float:
    y = np.asarray(y)
    labels = _labels(pred) if np.asarray(pred).ndim > y.ndim else np.asarray(pred)
    if labels.shape != y.shape:
        raise ValueError(f"accuracy: predictions {labels.shape} vs labels {y.shape}")
    return float(np.mean(labels == y))


def miou(pred_labels: np.ndarray, y: np.ndarray, classes: int) -> float:
    """Per-image mean IoU over classes present in prediction or target, averaged over images."""
    scores = []
    for p, g in zip(pred_labels, y):
        ious = []
        for c in range(classes):
            inter = np.sum((p == c) & (g == c))
            union = np.sum((p == c) | (g == c))
            if union:
                ious.append(inter / union)
        scores.append(np.mean(ious))
    return float(np.mean(scores))


def angle_degrees(pred: np.ndarray, y: np.ndarray) -> np.ndarray:
    pred = pred / np.maximum(np.linalg.norm(pred, axis=1, keepdims=True), 1e-12)
    y = y / np.maximum(np.linalg.norm(y, axis=1, keepdims=True), 1e-12)
    cos = np.clip(np.sum(pred * y, axis=1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def dense_metrics(kind: str, pred: np.ndarray, y: np.ndarray) -> dict:
    pred, y = np.asarray(pred, dtype=np.float64), np.asarray(y)
    if kind == DENSE_CLASSIFICATION:
        labels = _labels(pred, kind)
        if labels.shape != y.shape:
            raise ValueError(f"dense_metrics: label maps {labels.shape} vs targets {y.shape}")
        classes = pred.shape[1] if pred.ndim == 4 else int(max(labels.max(), y.max())) + 1
        return {"miou": miou(labels, y, classes), "pix_acc": float(np.mean(labels == y))}
    if pred.shape != y.shape:
        raise ValueError(f"dense_metrics: predictions {pred.shape} vs targets {y.shape}")
    if kind == DENSE_REGRESSION:
        err = np.abs(pred - y)
        return {"abs_err": float(err.mean()), "rel_err": float(np.mean(err / np.maximum(y, REL_ERR_FLOOR)))}
    if kind == DENSE_UNIT_VECTOR:
        ang = angle_degrees(pred, y).reshape(-1)
        out = {"angle_mean": float(ang.mean()), "angle_median": float(np.median(ang))}
        for t in WITHIN_DEGREES:
            out[f"within_{t:g}"] = float(np.mean(ang <= t))
        return out
    raise ValueError(f"dense_metrics: kind {kind!r} is not a dense task")


# -- victim-level metrics -----------------------------------------------------


def fooling_ratio(victim: VictimModel, x_clean: np.ndarray, x_pert: np.ndarray) -> float:
    """Share of samples (pixels, for dense classification) whose argmax changes."""
    if victim.task.kind not in (CLASSIFICATION, DENSE_CLASSIFICATION):
        raise ValueError(f"fooling ratio needs a classification task, got {victim.task.kind}")
    if np.shape(x_clean) != np.shape(x_pert):
        raise ValueError(f"fooling_ratio: clean batch {np.shape(x_clean)} vs perturbed {np.shape(x_pert)}")
    clean = predict(victim, x_clean).argmax(axis=1)
    adv = predict(victim, x_pert).argmax(axis=1)
    return float(np.mean(clean != adv))


def accuracy(victim: VictimModel, x: np.ndarray, y: np.ndarray) -> float:
    y = np.asarray(y)
    if victim.task.is_classification and (y.min() < 0 or y.max() >= victim.task.classes):
        raise ValueError(f"labels outside 0..{victim.task.classes - 1}")
    return label_accuracy(predict(victim, x), y)


def top1_target_accuracy(victim: VictimModel, x_pert: np.ndarray, target: int) -> float:
    if not 0 <= target < victim.task.classes:
        raise ValueError(f"target class {target} outside 0..{victim.task.classes - 1}")
    return float(np.mean(predict(victim, x_pert).argmax(axis=1) == target))


def task_metrics(victim: VictimModel, x: np.ndarray, y: np.ndarray) -> dict:
    out = predict(victim, x)
    if victim.task.kind == CLASSIFICATION:
        return {"accuracy": label_accuracy(out, y)}
    return dense_metrics(victim.task.kind, out, y)


# -- reports ------------------------------------------------------------------


@dataclass
class EvalReport:
    method: str
    goal: str
    mode: str
    eps: float
    family: str
    seed: int
    tasks: list[str]
    clean: list[dict]
    attacked: list[dict]
    timing: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def averages(self, row: str = "attacked") -> dict:
        """Arithmetic mean over tasks of every metric that all tasks report."""
        rows = getattr(self, row)
        if not rows:
            return {}
        common = set(rows[0]).intersection(*rows[1:])
        return {k: float(math.fsum(r[k] for r in rows) / len(rows)) for k in sorted(common)}

    def records(self) -> list[dict]:
        out = []
        for row in ("clean", "attacked"):
            for t, metrics in enumerate(getattr(self, row)):
                for k in sorted(metrics):
                    out.append({"row": row, "task": self.tasks[t], "metric": k, "value": metrics[k]})
            for k, v in self.averages(row).items():
                out.append({"row": row, "task": "avg", "metric": k, "value": v})
        for k in sorted(self.params):
            out.append({"row": "params", "task": "all", "metric": k, "value": self.params[k]})
        for k in sorted(self.timing):
            out.append({"row": "timing", "task": "all", "metric": k, "value": self.timing[k]})
        return out

    def to_csv(self, include_timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "goal", "mode", "eps", "family", "seed", "row", "task", "metric", "value"])
        for r in self.records():
            if r["row"] == "timing" and not include_timing:
                continue
            w.writerow([self.method, self.goal, self.mode, repr(self.eps), self.family, self.seed,
                        r["row"], r["task"], r["metric"], repr(float(r["value"]))])
        return buf.getvalue()

    def to_markdown(self) -> str:
        names = sorted({k for row in self.clean + self.attacked for k in row})
        lines = [
            f"**{self.method}** ({self.goal}, {self.mode}, eps={self.eps:g}) vs {self.family}",
            "",
            "| row | task | " + " | ".join(names) + " |",
            "|---|---|" + "---|" * len(names),
        ]
        for row in ("clean", "attacked"):
            for t, m in enumerate(getattr(self, row)):
                cells = [f"{m[k]:.4f}" if k in m else "" for k in names]
                lines.append(f"| {row} | {self.tasks[t]} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty report")
        head = rows[0]
        tasks = []
        for r in rows:
            if r["row"] in ("clean", "attacked") and r["task"] != "avg" and r["task"] not in tasks:
                tasks.append(r["task"])
        clean = [dict() for _ in tasks]
        attacked = [dict() for _ in tasks]
        timing, params = {}, {}
        for r in rows:
            v = float(r["value"])
            if r["row"] == "timing":
                timing[r["metric"]] = v
            elif r["row"] == "params":
                params[r["metric"]] = v
            elif r["task"] != "avg":
                target = clean if r["row"] == "clean" else attacked
                target[tasks.index(r["task"])][r["metric"]] = v
        return cls(head["method"], head["goal"], head["mode"], float(head["eps"]), head["family"],
                   int(head["seed"]), tasks, clean, attacked, timing, params)


def task_names(dataset: MultiTaskDataset) -> list[str]:
    return [f"T{t.task_id + 1}" for t in dataset.tasks]


# -- attack evaluation --------------------------------------------------------


def _victim_list(victims) -> list[VictimModel]:
    return list(victims.victims) if isinstance(victims, VictimFamily) else list(victims)


def perturb_split(
    gen: G.MultiTaskGenerator, dataset: MultiTaskDataset, part: str = "test", tasks: list[int] | None = None,
    batch_size: int = 64,
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """(x, x_hat, y) per task for ``part`` using the generator's perturbations.

    ``tasks[i]`` is the dataset task served by generator decoder ``i``.
    """
    tasks = list(range(gen.M)) if tasks is None else tasks
    out = []
    with T.no_grad():
        shared = gen.config.mode == G.PER_INSTANCE and dataset.suite == SHARED_INPUT and len(tasks) > 1
        if shared:
            x, _ = dataset.split(tasks[0], part)
            chunks = [[] for _ in tasks]
            for i in range(0, len(x), batch_size):
                for j, v in enumerate(G.generate_all_shared(gen, x[i : i + batch_size])):
                    chunks[j].append(v.data)
        for j, t in enumerate(tasks):
            x, y = dataset.split(t, part)
            if gen.config.mode == G.UNIVERSAL:
                v = G.generate_universal(gen, j).data
            elif shared:
                v = np.concatenate(chunks[j])
            else:
                v = np.concatenate(
                    [G.generate_per_instance(gen, j, x[i : i + batch_size]).data for i in range(0, len(x), batch_size)]
                )
            out.append((x, G.apply_perturbation(x, v), y))
    return out


def attacked_metrics(victim: VictimModel, x: np.ndarray, x_hat: np.ndarray, y: np.ndarray, target: int | None = None) -> dict:
    m = task_metrics(victim, x_hat, y)
    if victim.task.kind in (CLASSIFICATION, DENSE_CLASSIFICATION):
        m["fooling_ratio"] = fooling_ratio(victim, x, x_hat)
    if target is not None:
        m["target_accuracy"] = top1_target_accuracy(victim, x_hat, target)
    return m


def _report_from_triples(
    triples, victims, method, goal, mode, eps, family, seed, names, targets=None
) -> EvalReport:
    clean, attacked = [], []
    for t, (x, x_hat, y) in enumerate(triples):
        v = victims[t]
        c = task_metrics(v, x, y)
        if v.task.kind in (CLASSIFICATION, DENSE_CLASSIFICATION):
            c["fooling_ratio"] = 0.0
        tgt = None if targets is None else targets[t]
        if tgt is not None:
            c["target_accuracy"] = top1_target_accuracy(v, x, tgt)
        clean.append(c)
        attacked.append(attacked_metrics(v, x, x_hat, y, tgt))
    return EvalReport(method, goal, mode, float(eps), family, int(seed), names, clean, attacked)


def evaluate_attack(
    gen: G.MultiTaskGenerator | list[G.MultiTaskGenerator],
    victims,
    dataset: MultiTaskDataset,
    goal: str = "non_targeted",
    targets: list[int] | None = None,
    method: str = "mta",
    part: str = "test",
    seed: int = 0,
) -> EvalReport:
    """Clean and attacked metrics of every task on ``part``.

    ``gen`` is one multi-task generator, or a list of single-task generators
    (one per task, GAP style).
    """
    family = victims.kind if isinstance(victims, VictimFamily) else "independent"
    victims = _victim_list(victims)
    if isinstance(gen, list):
        triples = [perturb_split(g, dataset, part, tasks=[t])[0] for t, g in enumerate(gen)]
        cfg = gen[0].config
    else:
        triples = perturb_split(gen, dataset, part)
        cfg = gen.config
    if len(triples) != len(victims):
        raise ValueError(f"{len(triples)} perturbation sets for {len(victims)} victims")
    report = _report_from_triples(
        triples, victims, method, goal, cfg.mode, cfg.eps, family, seed, task_names(dataset),
        targets if goal == "targeted" else None,
    )
    report.params["generator_parameters"] = count_parameters(gen)
    return report


def evaluate_fgsm(victims, dataset: MultiTaskDataset, eps: float, part: str = "test", seed: int = 0) -> EvalReport:
    from .objectives import fgsm_perturb

    victims = _victim_list(victims)
    triples = []
    for t, v in enumerate(victims):
        x, y = dataset.split(t, part)
        triples.append((x, G.apply_perturbation(x, fgsm_perturb(v, x, y, eps)), y))
    return _report_from_triples(triples, victims, "fgsm", "non_targeted", "per_instance", eps, "independent", seed,
                                task_names(dataset))


def transfer_eval(
    gen: G.MultiTaskGenerator,
    family_b: VictimFamily,
    dataset: MultiTaskDataset,
    seed: int = 0,
    part: str = "test",
) -> EvalReport:
    """Apply perturbations trained against one family to another family."""
    if len(family_b) != dataset.num_tasks or gen.M != dataset.num_tasks:
        raise ValueError("transfer_eval: generator, victims and dataset disagree on the task count")
    for v, task in zip(family_b.victims, dataset.tasks):
        if v.task.kind != task.kind or v.task.input_shape != task.input_shape:
            raise ValueError(f"transfer_eval: victim for task {task.task_id} does not match the dataset suite")
    if gen.config.input_shape != dataset.tasks[0].input_shape:
        raise ValueError("transfer_eval: generator input shape does not match the dataset suite")
    report = evaluate_attack(gen, family_b, dataset, method="mta-transfer", part=part, seed=seed)
    report.family = family_b.kind
    return report


# -- storage and speed ----------------------------------------------------------


def count_parameters(obj) -> int:
    if isinstance(obj, G.MultiTaskGenerator):
        return G.count_parameters(obj)
    if isinstance(obj, VictimFamily):
        return count_family_parameters(obj)
    if isinstance(obj, VictimModel):
        return int(sum(p.size for p in obj.params.values()))
    if isinstance(obj, (list, tuple)):
        return int(sum(count_parameters(o) for o in obj))
    raise TypeError(f"cannot count parameters of {type(obj).__name__}")


def _median_time(fn, repetitions: int, warmup: int) -> float:
    if repetitions < 30:
        raise ValueError(f"timing needs at least 30 repetitions, got {repetitions}")
    with T.no_grad():
        for _ in range(warmup):
            fn()
        # timeit switches the garbage collector off while timing
        times = timeit.Timer(fn).repeat(repeat=repetitions, number=1)
    return float(statistics.median(times))


def measure_inference_time(gen, x: np.ndarray, repetitions: int = 30, warmup: int = 3) -> float:
    """Median seconds to produce one perturbation per task for the batch ``x``.

    A per-instance multi-task generator uses the shared encoding path (one
    encoder pass, M decoders); a list of single-task generators runs M full
    passes.  Universal generators decode their fixed patterns.
    """
    if isinstance(gen, list):
        return _median_time(lambda: [G.perturbation(g, 0, x) for g in gen], repetitions, warmup)
    if gen.config.mode == G.UNIVERSAL:
        return _median_time(lambda: [G.generate_universal(gen, t) for t in range(gen.M)], repetitions, warmup)
    return _median_time(lambda: G.generate_all_shared(gen, x), repetitions, warmup)


def measure_independent_passes(gen: G.MultiTaskGenerator, x: np.ndarray, repetitions: int = 30, warmup: int = 3) -> float:
    """Median seconds for M separate encoder+decoder passes of the same generator."""
    return _median_time(lambda: [G.generate_per_instance(gen, t, x) for t in range(gen.M)], repetitions, warmup)


# -- comparison tables ----------------------------------------------------------


def comparison_table(reports: list[EvalReport]) -> str:
    """Method rows x task columns; cells are fooling ratio with accuracy in parentheses."""
    if not reports:
        raise ValueError("nothing to compare")
    tasks = reports[0].tasks
    lines = ["| method | eps | " + " | ".join(tasks) + " | Avg |", "|---|---|" + "---|" * (len(tasks) + 1)]

    def cell(m: dict) -> str:
        if "fooling_ratio" in m and "accuracy" in m:
            return f"{100 * m['fooling_ratio']:.2f}% ({100 * m['accuracy']:.2f}%)"
        if "fooling_ratio" in m:
            return f"{100 * m['fooling_ratio']:.2f}%"
        if "target_accuracy" in m:
            return f"{100 * m['target_accuracy']:.2f}%"
        key = sorted(m)[0] if m else None
        return f"{key}={m[key]:.4f}" if key else ""

    for r in reports:
        cells = [cell(m) for m in r.attacked] + [cell(r.averages("attacked"))]
        lines.append(f"| {r.method.upper()} | {r.eps:g} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
