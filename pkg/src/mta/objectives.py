"""
Fooling losses and generator training (MTA and the single-task GAP baseline),
plus the FGSM baseline.

Per-task losses wrap the victim's supervised loss in a log:

* non-targeted: mean_i -log(max(H_i, delta))  (pushes H_i up)
* targeted:     mean_i  log(max(H_i, delta))  with H_i against the target

and the generator minimizes the weighted sum over tasks.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import generator as G
from . import tensor as T
from .data import CLASSIFICATION, DENSE_CLASSIFICATION, DENSE_REGRESSION, SHARED_INPUT, MultiTaskDataset
from .optim import AdamState, adam_step, zero_grad
from .rng import stream
from .tensor import Tensor
from .victims import TrainingDivergence, VictimFamily, VictimModel, forward, predict, task_loss

log = logging.getLogger(__name__)

NON_TARGETED = "non_targeted"
TARGETED = "targeted"


@dataclass
class AttackConfig:
    goal: str = NON_TARGETED
    mode: str = G.UNIVERSAL
    eps: float = 0.1
    p: float = math.inf
    weights: list[float] | None = None
    targets: list[int] | None = None
    epochs: int = 10
    batch_size: int = 10
    lr: float = 2e-4
    seed: int = 0
    delta: float = T.DELTA
    probe_size: int = 50

    def resolved_weights(self, M: int) -> list[float]:
        return [1.0 / M] * M if not self.weights else list(self.weights)

    def validate(self, tasks) -> "AttackConfig":
        M = len(tasks)
        if self.goal not in (NON_TARGETED, TARGETED):
            raise ValueError(f"unknown attack goal {self.goal!r}")
        if self.mode not in (G.UNIVERSAL, G.PER_INSTANCE):
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        w = self.resolved_weights(M)
        if len(w) != M:
            raise ValueError(f"{len(w)} task weights for {M} tasks")
        if any(a <= 0 for a in w):
            raise ValueError("task weights must be positive")
        if abs(math.fsum(w) - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")
        if self.goal == TARGETED:
            if not self.targets or len(self.targets) != M:
                raise ValueError("a targeted attack needs one target class per task")
            for task, tgt in zip(tasks, self.targets):
                if task.kind != CLASSIFICATION:
                    raise ValueError("targeted attacks are only defined for classification tasks")
                if not 0 <= int(tgt) < task.classes:
                    raise ValueError(f"target class {tgt} outside 0..{task.classes - 1}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        return self


@dataclass
class TrainingLog:
    objective: list[float] = field(default_factory=list)
    task_losses: list[list[float]] = field(default_factory=list)
    probe_fooling: list[list[float]] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def to_csv(self, include_timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        M = len(self.task_losses[0]) if self.task_losses else 0
        head = ["epoch", "L"] + [f"loss_{t + 1}" for t in range(M)] + [f"fool_{t + 1}" for t in range(M)]
        w.writerow(head + (["seconds"] if include_timing else []))
        for e, L in enumerate(self.objective):
            row = [e, repr(L)] + [repr(v) for v in self.task_losses[e]] + [repr(v) for v in self.probe_fooling[e]]
            w.writerow(row + ([repr(self.seconds[e])] if include_timing else []))
        return buf.getvalue()


# -- losses -------------------------------------------------------------------


def log_wrapped_loss(per_sample: Tensor, goal: str = NON_TARGETED, delta: float = T.DELTA) -> Tensor:
    """Mean of -log(max(L_i, delta)) (non-targeted) or log(max(L_i, delta)) (targeted)."""
    logs = T.log(T.clip(per_sample, lo=delta))
    return T.mean(T.neg(logs) if goal == NON_TARGETED else logs)


def nontargeted_fooling_loss(probs, labels: np.ndarray, delta: float = T.DELTA) -> Tensor:
    probs = T.as_tensor(probs)
    h = T.cross_entropy(probs, T.one_hot(labels, probs.shape[1]), axis=1, reduction="none", delta=delta)
    return log_wrapped_loss(h, NON_TARGETED, delta)


def targeted_fooling_loss(probs, target: int, delta: float = T.DELTA) -> Tensor:
    probs = T.as_tensor(probs)
    if not 0 <= target < probs.shape[1]:
        raise ValueError(f"target class {target} outside 0..{probs.shape[1] - 1}")
    onehot = T.one_hot(np.full(probs.shape[0], target), probs.shape[1])
    h = T.cross_entropy(probs, onehot, axis=1, reduction="none", delta=delta)
    return log_wrapped_loss(h, TARGETED, delta)


def loss_nontargeted_classification(victim: VictimModel, x, y, v, delta: float = T.DELTA) -> Tensor:
    if victim.task.kind != CLASSIFICATION:
        raise ValueError(f"expected a classification victim, got {victim.task.kind}")
    probs = forward(victim, G.apply_perturbation(T.as_tensor(x), v))
    return nontargeted_fooling_loss(probs, y, delta)


def loss_targeted_classification(victim: VictimModel, x, target: int, v, delta: float = T.DELTA) -> Tensor:
    if victim.task.kind != CLASSIFICATION:
        raise ValueError(f"expected a classification victim, got {victim.task.kind}")
    probs = forward(victim, G.apply_perturbation(T.as_tensor(x), v))
    return targeted_fooling_loss(probs, target, delta)


def loss_nontargeted_dense(victim: VictimModel, x, y, v, delta: float = T.DELTA, kind: str | None = None) -> Tensor:
    """Log-wrapped pixel CE, L1 or (1 - mean dot) per image for dense tasks."""
    kind = kind or victim.task.kind
    if kind != victim.task.kind or kind == CLASSIFICATION:
        raise ValueError(f"dense loss for kind {kind!r} does not match victim kind {victim.task.kind!r}")
    out = forward(victim, G.apply_perturbation(T.as_tensor(x), v))
    return log_wrapped_loss(task_loss(kind, out, y, reduction="none"), NON_TARGETED, delta)


def multi_task_objective(losses: list, weights: list[float]) -> Tensor:
    if len(losses) != len(weights):
        raise ValueError(f"{len(losses)} task losses for {len(weights)} weights")
    total = None
    for loss, a in zip(losses, weights):
        term = T.mul(T.as_tensor(loss), float(a))
        total = term if total is None else T.add(total, term)
    return total


def fooling_loss(victim: VictimModel, x, y, v, config: AttackConfig, target: int | None = None) -> Tensor:
    if config.goal == TARGETED:
        return loss_targeted_classification(victim, x, target, v, config.delta)
    if victim.task.kind == CLASSIFICATION:
        return loss_nontargeted_classification(victim, x, y, v, config.delta)
    return loss_nontargeted_dense(victim, x, y, v, config.delta)


# -- training -----------------------------------------------------------------


def _check_victims(victims, dataset: MultiTaskDataset, tasks: list[int]) -> list[VictimModel]:
    victims = list(victims.victims) if isinstance(victims, VictimFamily) else list(victims)
    if len(victims) != len(tasks):
        raise ValueError(f"{len(victims)} victims for {len(tasks)} tasks")
    for v, t in zip(victims, tasks):
        if not v.frozen:
            raise ValueError(f"victim for task {t} is not frozen")
        if v.task.kind != dataset.tasks[t].kind:
            raise ValueError(f"victim kind {v.task.kind} does not match dataset task {t}")
    return victims


def probe_fooling(victim: VictimModel, x: np.ndarray, y: np.ndarray, x_hat: np.ndarray) -> float:
    """Probe statistic in [0, 1] logged during training.

    Classification kinds: share of (pixel) predictions that change.
    Dense regression / unit vectors: share of pixels whose error grows.
    """
    clean, adv = predict(victim, x), predict(victim, x_hat)
    kind = victim.task.kind
    if kind in (CLASSIFICATION, DENSE_CLASSIFICATION):
        return float(np.mean(clean.argmax(axis=1) != adv.argmax(axis=1)))
    if kind == DENSE_REGRESSION:
        return float(np.mean(np.abs(adv - y) > np.abs(clean - y)))
    return float(np.mean(np.sum(adv * y, axis=1) < np.sum(clean * y, axis=1)))


def train_mta(
    gen: G.MultiTaskGenerator,
    victims,
    dataset: MultiTaskDataset,
    config: AttackConfig,
    tasks: list[int] | None = None,
) -> tuple[G.MultiTaskGenerator, TrainingLog]:
    """Train encoder and decoders jointly on the weighted sum of fooling losses.

    Each step draws ``batch_size`` samples per task (one common batch on a
    shared-input suite), builds every task's perturbation, and takes one Adam
    step on the summed objective.  ``tasks[i]`` is the dataset task served by
    decoder ``i`` (default: all tasks in order).
    """
    tasks = list(range(dataset.num_tasks)) if tasks is None else list(tasks)
    if gen.M != len(tasks):
        raise ValueError(f"generator has {gen.M} decoders for {len(tasks)} tasks")
    if gen.config.mode != config.mode:
        raise ValueError(f"generator mode {gen.config.mode} differs from attack mode {config.mode}")
    task_specs = [dataset.tasks[t] for t in tasks]
    config.validate(task_specs)
    victims = _check_victims(victims, dataset, tasks)
    weights = config.resolved_weights(len(tasks))
    targets = config.targets if config.goal == TARGETED else [None] * len(tasks)
    shared = dataset.suite == SHARED_INPUT
    for p in gen.params.values():
        p.requires_grad = True

    train = [dataset.split(t, "train") for t in tasks]
    probes = []
    for t in tasks:
        x, y = dataset.split(t, "test")
        probes.append((x[: config.probe_size], y[: config.probe_size]))
    n_max = max(len(x) for x, _ in train)
    steps = math.ceil(n_max / config.batch_size)
    rngs = {t: stream(config.seed, "attack-batches", "shared" if shared else t) for t in tasks}
    state = AdamState(lr=config.lr)
    history = TrainingLog()
    before = [v.checksum() for v in victims]

    for epoch in range(config.epochs):
        start = time.perf_counter()
        order = {}
        for t in (tasks[:1] if shared else tasks):
            n = len(train[tasks.index(t)][0])
            reps = math.ceil(steps * config.batch_size / n)
            order[t] = np.concatenate([rngs[t].permutation(n) for _ in range(reps)])
        objective, per_task = 0.0, np.zeros(len(tasks))
        for step in range(steps):
            zero_grad(gen.params)
            lo, hi = step * config.batch_size, (step + 1) * config.batch_size
            latent = None
            if shared and config.mode == G.PER_INSTANCE:
                idx = order[tasks[0]][lo:hi]
                latent = G.shared_encoding_path(gen, train[0][0][idx])
            losses = []
            for i, t in enumerate(tasks):
                idx = order[tasks[0] if shared else t][lo:hi]
                x, y = train[i][0][idx], train[i][1][idx]
                if config.mode == G.UNIVERSAL:
                    v = G.generate_universal(gen, i)
                elif latent is not None:
                    v = G.decode(gen, i, latent)
                else:
                    v = G.generate_per_instance(gen, i, x)
                losses.append(fooling_loss(victims[i], x, y, v, config, targets[i]))
            total = multi_task_objective(losses, weights)
            if not np.isfinite(total.data).all():
                raise TrainingDivergence("generator", epoch)
            total.backward()
            adam_step(gen.params, state)
            objective += total.item()
            per_task += [loss.item() for loss in losses]
        history.objective.append(objective / max(steps, 1))
        history.task_losses.append(list(per_task / max(steps, 1)))
        history.probe_fooling.append(_probe(gen, victims, probes))
        history.seconds.append(time.perf_counter() - start)
        log.info("epoch %d L=%.4f fool=%s", epoch, history.objective[-1], history.probe_fooling[-1])

    if [v.checksum() for v in victims] != before:
        raise RuntimeError("victim parameters changed during attack training")
    G.freeze(gen)
    return gen, history


def _probe(gen: G.MultiTaskGenerator, victims: list[VictimModel], probes) -> list[float]:
    out = []
    with T.no_grad():
        for i, (x, y) in enumerate(probes):
            v = G.generate_universal(gen, i) if gen.config.mode == G.UNIVERSAL else G.generate_per_instance(gen, i, x)
            out.append(probe_fooling(victims[i], x, y, G.apply_perturbation(x, v.data)))
    return out


def split_generator(gen: G.MultiTaskGenerator, t: int) -> G.MultiTaskGenerator:
    """Single-task generator holding a copy of ``gen``'s encoder and decoder ``t``."""
    cfg = G.GeneratorConfig.from_dict({**gen.config.to_dict(), "M": 1})
    params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in gen.encoder_params().items()}
    prefix = f"dec{t}."
    for k, v in gen.decoder_params(t).items():
        params["dec0." + k[len(prefix):]] = Tensor(v.data.copy(), requires_grad=True)
    patterns = [gen.patterns[t].copy()] if gen.patterns else []
    return G.MultiTaskGenerator(cfg, params, patterns)


def train_gap_baseline(
    dataset: MultiTaskDataset,
    victims,
    config: AttackConfig,
    gen_config: G.GeneratorConfig,
) -> tuple[list[G.MultiTaskGenerator], list[TrainingLog]]:
    """One full generator per task, each trained only on its own task loss.

    Generator t starts from the same encoder/decoder-t initialization (and the
    same pattern Z_t) that an MTA generator with ``gen_config`` would use, and
    sees the same batch sequence for its task, so the only difference from MTA
    is the absence of sharing.
    """
    victims = list(victims.victims) if isinstance(victims, VictimFamily) else list(victims)
    template = G.init_generator(gen_config)
    gens, logs = [], []
    for t in range(dataset.num_tasks):
        single = split_generator(template, t)
        sub = replace(config, weights=None, targets=[config.targets[t]] if config.goal == TARGETED else None)
        single, history = train_mta(single, [victims[t]], dataset, sub, tasks=[t])
        gens.append(single)
        logs.append(history)
    return gens, logs


def fgsm_perturb(victim: VictimModel, x, y, eps: float) -> np.ndarray:
    """eps * sign(grad_x CE(k(x), y)), with sign(0) = 0."""
    if victim.task.kind not in (CLASSIFICATION, DENSE_CLASSIFICATION):
        raise ValueError(f"FGSM needs a classification victim, got {victim.task.kind}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != victim.task.input_shape:
        raise T.ShapeError(f"FGSM: victim expects {victim.task.input_shape}, got {x.shape[1:]}")
    xt = Tensor(x.copy(), requires_grad=True)
    loss = task_loss(victim.task.kind, forward(victim, xt), np.asarray(y))
    loss.backward()
    return eps * np.sign(xt.grad)


def sign_perturbation(grad: np.ndarray, eps: float) -> np.ndarray:
    return eps * np.sign(np.asarray(grad, dtype=np.float64))
