"""
Victim models: the frozen predictors that attacks target.

A victim is a two-stage layer stack (encoder, head).  In a shared-encoder
family every task's victim holds the *same* encoder Tensor objects, so the
family stores one encoder plus one head per task.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import archive, nn
from . import tensor as T
from .data import (
    CLASSIFICATION,
    DENSE_CLASSIFICATION,
    DENSE_REGRESSION,
    DENSE_UNIT_VECTOR,
    SHARED_INPUT,
    SHARED_LABEL,
    MultiTaskDataset,
    TaskSpec,
)
from .optim import AdamState, adam_step, zero_grad
from .rng import stream
from .tensor import Tensor

log = logging.getLogger(__name__)

FORMAT = "mta-victims"
FORMAT_VERSION = 1
DEFAULT_ARCH = {"widths": [8, 16]}
COMPETENCE_GATE = 0.85


class TrainingDivergence(RuntimeError):
    def __init__(self, what: str, epoch: int):
        super().__init__(f"{what}: non-finite loss at epoch {epoch}")
        self.epoch = epoch


class IncompetentVictim(RuntimeError):
    """Attacks against a victim that cannot solve its clean task are meaningless."""

    def __init__(self, task: int, accuracy: float, threshold: float):
        super().__init__(f"victim task {task}: clean accuracy {accuracy:.4f} below gate {threshold}")
        self.task, self.accuracy = task, accuracy


@dataclass
class VictimModel:
    task: TaskSpec
    stages: list[tuple[str, list[dict]]]
    params: dict[str, Tensor]
    frozen: bool = False

    def layers(self) -> list[dict]:
        return [layer for _, layers in self.stages for layer in layers]

    def freeze(self) -> "VictimModel":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def checksum(self) -> str:
        return nn.checksum(self.params)


@dataclass
class VictimFamily:
    kind: str  # "independent" | "shared_encoder"
    victims: list[VictimModel]
    shared: list[str] = field(default_factory=list)

    def __getitem__(self, t: int) -> VictimModel:
        return self.victims[t]

    def __len__(self) -> int:
        return len(self.victims)

    def unique_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for t, v in enumerate(self.victims):
            for name, p in v.params.items():
                key = name if name in self.shared else f"task{t}/{name}"
                out[key] = p
        return out

    def checksum(self) -> str:
        return nn.checksum(self.unique_params())


def architecture(task: TaskSpec, arch_config: dict | None = None) -> tuple[list[dict], list[dict]]:
    """(encoder, head) layer lists for ``task``."""
    cfg = dict(DEFAULT_ARCH)
    cfg.update(arch_config or {})
    w1, w2 = cfg["widths"]
    cin, h, w = task.input_shape
    if task.kind == CLASSIFICATION:
        if h % 4 or w % 4:
            raise T.ShapeError(f"classification victim needs H, W divisible by 4, got {h}x{w}")
        enc = [nn.conv(cin, w1, stride=2), nn.RELU, nn.conv(w1, w2, stride=2), nn.RELU]
        head = [nn.FLATTEN, nn.dense(w2 * (h // 4) * (w // 4), task.classes)]
    else:
        if h % 2 or w % 2:
            raise T.ShapeError(f"dense victim needs even H, W, got {h}x{w}")
        out = task.output_shape()[0]
        enc = [nn.conv(cin, w1), nn.RELU, nn.conv(w1, w2, stride=2), nn.RELU]
        head = [nn.UPSAMPLE, nn.conv(w2, w1), nn.RELU, nn.conv(w1, out, k=1)]
    return enc, head


def build_victim(task: TaskSpec, arch_config: dict | None = None, seed: int = 0) -> VictimModel:
    enc, head = architecture(task, arch_config)
    expected = task.output_shape()
    got = nn.output_shape(enc + head, task.input_shape)
    if got != expected:
        raise T.ShapeError(f"architecture yields {got}, task needs {expected}")
    params = nn.init_params(enc, stream(seed, "victim", task.task_id, "enc"), "enc.")
    params.update(nn.init_params(head, stream(seed, "victim", task.task_id, "head"), "head."))
    return VictimModel(task, [("enc.", enc), ("head.", head)], params)


def forward(model: VictimModel, x) -> Tensor:
    """k(x): probabilities for classification kinds, dense output otherwise."""
    x = T.as_tensor(x)
    if x.shape[1:] != model.task.input_shape:
        raise T.ShapeError(f"victim expects inputs {model.task.input_shape}, got {x.shape[1:]}")
    for prefix, layers in model.stages:
        x = nn.run(layers, model.params, x, prefix)
    return head_activation(model.task.kind, x)


def head_activation(kind: str, out: Tensor) -> Tensor:
    if kind in (CLASSIFICATION, DENSE_CLASSIFICATION):
        return T.softmax(out, axis=1)
    if kind == DENSE_UNIT_VECTOR:
        norm = T.sqrt(T.add(T.sum(T.mul(out, out), axis=1, keepdims=True), 1e-12))
        return T.div(out, norm)
    return out


def predict(model: VictimModel, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    outs = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(forward(model, x[i : i + batch_size]).data)
    return np.concatenate(outs) if outs else np.zeros((0,) + model.task.output_shape())


def task_loss(kind: str, out: Tensor, y: np.ndarray, reduction: str = "mean") -> Tensor:
    """Supervised loss on activated outputs.

    ``reduction="none"`` returns one value per sample (pixel losses averaged
    within each image).
    """
    if kind == CLASSIFICATION:
        per = T.cross_entropy(out, T.one_hot(y, out.shape[1]), axis=1, reduction="none")
    elif kind == DENSE_CLASSIFICATION:
        pix = T.cross_entropy(out, T.one_hot(y, out.shape[1], axis=1), axis=1, reduction="none")
        per = T.mean(pix, axis=(1, 2))
    elif kind == DENSE_REGRESSION:
        per = T.mean(T.abs(T.sub(out, y)), axis=(1, 2, 3))
    elif kind == DENSE_UNIT_VECTOR:
        dot = T.sum(T.mul(out, y), axis=1)
        per = T.sub(1.0, T.mean(dot, axis=(1, 2)))
    else:
        raise ValueError(f"unknown task kind {kind!r}")
    return per if reduction == "none" else T.mean(per)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def clean_metrics(model: VictimModel, x: np.ndarray, y: np.ndarray) -> dict:
    from .evaluation import dense_metrics, label_accuracy

    out = predict(model, x)
    if model.task.kind == CLASSIFICATION:
        return {"accuracy": label_accuracy(out, y)}
    return dense_metrics(model.task.kind, out, y)


def train_victim(
    model: VictimModel,
    dataset: MultiTaskDataset,
    epochs: int = 30,
    lr: float = 5e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> tuple[VictimModel, dict]:
    """Supervised Adam training on the model's own task; freezes the model."""
    t = model.task.task_id
    if dataset.tasks[t].kind != model.task.kind:
        raise ValueError(f"dataset task {t} is {dataset.tasks[t].kind}, model expects {model.task.kind}")
    x, y = dataset.split(t, "train")
    state = AdamState(lr=lr)
    rng = stream(seed, "victim-train", t)
    for epoch in range(epochs):
        for idx in _batches(len(x), batch_size, rng):
            zero_grad(model.params)
            loss = task_loss(model.task.kind, forward(model, x[idx]), y[idx])
            if not np.isfinite(loss.data).all():
                raise TrainingDivergence(f"victim task {t}", epoch)
            loss.backward()
            adam_step(model.params, state)
        log.debug("victim %d epoch %d loss %.4f", t, epoch, loss.item())
    model.freeze()
    xt, yt = dataset.split(t, "test")
    return model, clean_metrics(model, xt, yt)


def require_competence(family, dataset: MultiTaskDataset, threshold: float = COMPETENCE_GATE) -> list[float]:
    """Clean test accuracies; raises IncompetentVictim below ``threshold``.

    Only shared-label suites are gated (dense tasks have no accuracy).
    """
    if dataset.suite != SHARED_LABEL:
        return []
    victims = family.victims if isinstance(family, VictimFamily) else list(family)
    accs = []
    for t, v in enumerate(victims):
        acc = clean_metrics(v, *dataset.split(t, "test"))["accuracy"]
        if acc < threshold:
            raise IncompetentVictim(t, acc, threshold)
        accs.append(acc)
    return accs


def train_independent_family(
    dataset: MultiTaskDataset,
    arch_config: dict | None = None,
    epochs: int = 30,
    lr: float = 5e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> tuple[VictimFamily, list[dict]]:
    victims, metrics = [], []
    for task in dataset.tasks:
        model = build_victim(task, arch_config, seed)
        model, m = train_victim(model, dataset, epochs, lr, batch_size, seed)
        victims.append(model)
        metrics.append(m)
    return VictimFamily("independent", victims), metrics


def train_shared_encoder_family(
    dataset: MultiTaskDataset,
    arch_config: dict | None = None,
    epochs: int = 30,
    lr: float = 5e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> tuple[VictimFamily, list[dict]]:
    """One encoder plus per-task heads trained on the uniform mean of task losses."""
    if dataset.suite != SHARED_INPUT:
        raise ValueError("a shared-encoder family needs a shared-input suite")
    enc0, _ = architecture(dataset.tasks[0], arch_config)
    enc_params = nn.init_params(enc0, stream(seed, "family", "enc"), "enc.")
    victims = []
    for task in dataset.tasks:
        enc, head = architecture(task, arch_config)
        if enc != enc0:
            raise ValueError("tasks disagree on the encoder architecture")
        params = dict(enc_params)
        params.update(nn.init_params(head, stream(seed, "family", "head", task.task_id), "head."))
        victims.append(VictimModel(task, [("enc.", enc), ("head.", head)], params))
    family = VictimFamily("shared_encoder", victims, shared=sorted(enc_params))
    trainable = family.unique_params()
    x = dataset.inputs[0][dataset.train_idx[0]]
    ys = [dataset.targets[t][dataset.train_idx[t]] for t in range(len(victims))]
    state = AdamState(lr=lr)
    rng = stream(seed, "family-train")
    m = len(victims)
    for epoch in range(epochs):
        for idx in _batches(len(x), batch_size, rng):
            zero_grad(trainable)
            h = nn.run(enc0, enc_params, T.Tensor(x[idx]), "enc.")
            total = None
            for t, v in enumerate(victims):
                out = head_activation(v.task.kind, nn.run(v.stages[1][1], v.params, h, "head."))
                term = T.mul(task_loss(v.task.kind, out, ys[t][idx]), 1.0 / m)
                total = term if total is None else T.add(total, term)
            if not np.isfinite(total.data).all():
                raise TrainingDivergence("shared-encoder family", epoch)
            total.backward()
            adam_step(trainable, state)
    for v in victims:
        v.freeze()
    metrics = []
    for t, v in enumerate(victims):
        metrics.append(clean_metrics(v, *dataset.split(t, "test")))
    return family, metrics


def count_family_parameters(family: VictimFamily) -> int:
    return int(sum(p.size for p in family.unique_params().values()))


def family_manifest(family: VictimFamily) -> dict:
    return {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "kind": family.kind,
        "shared": family.shared,
        "victims": [
            {"task": v.task.to_dict(), "stages": [[p, layers] for p, layers in v.stages], "frozen": v.frozen}
            for v in family.victims
        ],
    }


def save_family(family: VictimFamily, path) -> None:
    tensors = {name: p.data for name, p in family.unique_params().items()}
    archive.save(path, tensors, family_manifest(family))


def load_family(path) -> VictimFamily:
    tensors, man = archive.load(path)
    if man.get("format") != FORMAT:
        raise archive.ArchiveFormatError(f"{path}: not a victim checkpoint (format={man.get('format')!r})")
    if man.get("version") != FORMAT_VERSION:
        raise archive.ArchiveFormatError(f"{path}: unsupported victim checkpoint version {man.get('version')}")
    shared = man["shared"]
    shared_tensors = {name: Tensor(tensors[name]) for name in shared if name in tensors}
    victims = []
    try:
        for t, entry in enumerate(man["victims"]):
            task = TaskSpec.from_dict(entry["task"])
            stages = [(p, layers) for p, layers in entry["stages"]]
            params = {}
            for prefix, layers in stages:
                for name in _param_names(layers, prefix):
                    params[name] = shared_tensors[name] if name in shared else Tensor(tensors[f"task{t}/{name}"])
            v = VictimModel(task, stages, params, frozen=entry["frozen"])
            for p in v.params.values():
                p.requires_grad = not v.frozen
            victims.append(v)
    except KeyError as exc:
        raise archive.ArchiveFormatError(f"{path}: missing tensor {exc}") from None
    return VictimFamily(man["kind"], victims, shared)


def _param_names(layers: list[dict], prefix: str) -> list[str]:
    names = []
    for i, layer in enumerate(layers):
        if layer["type"] in ("conv", "dense"):
            names += [f"{prefix}{i}.w", f"{prefix}{i}.b"]
        elif layer["type"] == "res":
            names += [f"{prefix}{i}.{s}" for s in ("w1", "b1", "w2", "b2")]
    return names


def save_victim(model: VictimModel, path) -> None:
    save_family(VictimFamily("independent", [model]), path)


def load_victim(path) -> VictimModel:
    family = load_family(path)
    if len(family) != 1:
        raise archive.ArchiveFormatError(f"{path}: holds {len(family)} victims, expected one")
    return family[0]
