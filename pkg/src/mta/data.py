"""
Synthetic multi-task suites.

Two regimes are generated:

* ``shared_label``: M classification tasks over the same C classes.  Every
  task renders class-conditional Gaussian clusters, but its cluster centres
  are a task-specific orthogonal mix of a common set of base patterns, so the
  label space is shared while the input distributions differ.
* ``shared_input``: one set of rendered scenes labelled for three dense tasks
  (4-region segmentation, per-pixel depth, per-pixel surface normal).

All inputs live in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import archive
from .rng import stream

CLASSIFICATION = "classification"
DENSE_CLASSIFICATION = "dense_classification"
DENSE_REGRESSION = "dense_regression"
DENSE_UNIT_VECTOR = "dense_unit_vector"
KINDS = (CLASSIFICATION, DENSE_CLASSIFICATION, DENSE_REGRESSION, DENSE_UNIT_VECTOR)

SHARED_LABEL = "shared_label"
SHARED_INPUT = "shared_input"

FORMAT = "mta-dataset"
FORMAT_VERSION = 1

# scene rendering constants for the shared-input suite
ALBEDO = (0.2, 0.4, 0.6, 0.8)
LIGHTS = ((0.6, 0.0, 0.8), (0.0, 0.6, 0.8))
DEPTH_SCALE = 4.5


@dataclass
class TaskSpec:
    task_id: int
    kind: str
    classes: int | None
    input_shape: tuple[int, int, int]
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind in (CLASSIFICATION, DENSE_CLASSIFICATION) and (self.classes is None or self.classes < 2):
            raise ValueError(f"task {self.task_id}: classification kinds need at least 2 classes")
        self.input_shape = tuple(int(s) for s in self.input_shape)

    @property
    def is_classification(self) -> bool:
        return self.kind in (CLASSIFICATION, DENSE_CLASSIFICATION)

    def output_shape(self) -> tuple[int, ...]:
        _, h, w = self.input_shape
        if self.kind == CLASSIFICATION:
            return (self.classes,)
        if self.kind == DENSE_CLASSIFICATION:
            return (self.classes, h, w)
        if self.kind == DENSE_REGRESSION:
            return (1, h, w)
        return (3, h, w)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "kind": self.kind,
            "classes": self.classes,
            "input_shape": list(self.input_shape),
            "params": self.params,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(d["task_id"], d["kind"], d["classes"], tuple(d["input_shape"]), d.get("params", {}))


@dataclass
class MultiTaskDataset:
    suite: str
    tasks: list[TaskSpec]
    inputs: list[np.ndarray]
    targets: list[np.ndarray]
    train_idx: list[np.ndarray]
    test_idx: list[np.ndarray]
    seed: int
    test_fraction: float = 0.2

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def split(self, t: int, part: str = "train") -> tuple[np.ndarray, np.ndarray]:
        idx = {"train": self.train_idx, "test": self.test_idx}[part][t]
        return self.inputs[t][idx], self.targets[t][idx]

    def manifest(self) -> dict:
        return {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "suite": self.suite,
            "seed": self.seed,
            "test_fraction": self.test_fraction,
            "M": self.num_tasks,
            "tasks": [t.to_dict() for t in self.tasks],
        }


def _check_seed(seed) -> int:
    if not isinstance(seed, (int, np.integer)) or seed < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed!r}")
    return int(seed)


def make_shared_label_suite(
    seed: int,
    M: int = 3,
    C: int = 10,
    n_per_task: int = 500,
    input_shape: tuple[int, int, int] = (1, 16, 16),
    amplitude: float = 0.5,
    noise: float = 0.05,
    test_fraction: float = 0.2,
) -> MultiTaskDataset:
    """Gaussian-cluster classification tasks sharing one label alphabet.

    Cluster centres of task t are ``amplitude * B @ Q_t`` where ``B`` holds C
    orthonormal base patterns and ``Q_t`` is a random C x C orthogonal matrix.
    """
    seed = _check_seed(seed)
    if M < 1:
        raise ValueError(f"need at least one task, got M={M}")
    if C < 2:
        raise ValueError(f"need at least two classes, got C={C}")
    if n_per_task < 10 * C:
        raise ValueError(f"n_per_task={n_per_task} must be at least 10*C={10 * C}")
    input_shape = tuple(int(s) for s in input_shape)
    dim = int(np.prod(input_shape))
    if dim < C:
        raise ValueError(f"input dimension {dim} cannot hold {C} orthogonal centres")
    base, _ = np.linalg.qr(stream(seed, "shared_label", "base").normal(size=(dim, C)))
    tasks, inputs, targets = [], [], []
    for t in range(M):
        rng = stream(seed, "shared_label", "task", t)
        q, r = np.linalg.qr(rng.normal(size=(C, C)))
        q = q * np.sign(np.diag(r))
        centres = amplitude * (base @ q).T  # C x dim
        labels = np.arange(n_per_task) % C
        rng.shuffle(labels)
        x = 0.5 + centres[labels] + noise * rng.normal(size=(n_per_task, dim))
        inputs.append(np.clip(x, 0.0, 1.0).reshape((n_per_task,) + input_shape))
        targets.append(labels.astype(np.int64))
        tasks.append(
            TaskSpec(t, CLASSIFICATION, C, input_shape, {"amplitude": amplitude, "noise": noise})
        )
    ds = MultiTaskDataset(SHARED_LABEL, tasks, inputs, targets, [], [], seed, test_fraction)
    return split_train_test(ds, test_fraction)


def _render_scene(rng: np.random.Generator, res: int):
    coords = (np.arange(res) + 0.5) / res
    v, u = np.meshgrid(coords, coords, indexing="ij")
    seeds = rng.uniform(0.0, 1.0, size=(4, 2))
    dist = (u[None] - seeds[:, 0, None, None]) ** 2 + (v[None] - seeds[:, 1, None, None]) ** 2
    seg = np.argmin(dist, axis=0)
    base = rng.uniform(1.5, 3.0, size=4)
    slope = rng.uniform(-1.5, 1.5, size=(4, 2))
    depth = base[seg] + slope[seg, 0] * (u - 0.5) + slope[seg, 1] * (v - 0.5)
    normal = np.stack([-slope[seg, 0], -slope[seg, 1], np.ones_like(depth)])
    normal /= np.linalg.norm(normal, axis=0, keepdims=True)
    lights = np.asarray(LIGHTS)
    shade = 0.5 + 0.5 * np.einsum("lc,chw->lhw", lights, normal)
    img = np.stack([np.asarray(ALBEDO)[seg], depth / DEPTH_SCALE, shade[0], shade[1]])
    img = img + rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0), seg, depth[None], normal


def make_shared_input_suite(seed: int, n: int = 200, resolution: int = 16, test_fraction: float = 0.2) -> MultiTaskDataset:
    """Rendered scenes annotated for segmentation, depth and surface normals.

    Each scene is a 4-cell Voronoi partition; cell k has albedo ``ALBEDO[k]``
    (its class) and its own tilted depth plane, whose normal is constant over
    the cell.  Channels: albedo, scaled depth, and two Lambertian shadings.
    """
    seed = _check_seed(seed)
    if n < 50:
        raise ValueError(f"shared-input suite needs n >= 50, got {n}")
    if resolution < 4 or resolution % 4:
        raise ValueError(f"resolution must be a positive multiple of 4, got {resolution}")
    rng = stream(seed, "shared_input", "scenes")
    scenes = [_render_scene(rng, resolution) for _ in range(n)]
    x = np.stack([s[0] for s in scenes])
    seg = np.stack([s[1] for s in scenes]).astype(np.int64)
    depth = np.stack([s[2] for s in scenes])
    normal = np.stack([s[3] for s in scenes])
    shape = x.shape[1:]
    params = {"albedo": list(ALBEDO), "lights": [list(l) for l in LIGHTS], "depth_scale": DEPTH_SCALE}
    tasks = [
        TaskSpec(0, DENSE_CLASSIFICATION, 4, shape, params),
        TaskSpec(1, DENSE_REGRESSION, None, shape, params),
        TaskSpec(2, DENSE_UNIT_VECTOR, None, shape, params),
    ]
    ds = MultiTaskDataset(SHARED_INPUT, tasks, [x, x, x], [seg, depth, normal], [], [], seed, test_fraction)
    return split_train_test(ds, test_fraction)


def split_train_test(dataset: MultiTaskDataset, test_fraction: float) -> MultiTaskDataset:
    """Deterministic split, stratified by class for classification tasks.

    Shared-input suites get one split used by every task.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    train, test = [], []
    if dataset.suite == SHARED_INPUT:
        n = len(dataset.inputs[0])
        perm = stream(dataset.seed, "split", "shared").permutation(n)
        n_test = int(round(test_fraction * n))
        tr, te = np.sort(perm[n_test:]), np.sort(perm[:n_test])
        train, test = [tr] * dataset.num_tasks, [te] * dataset.num_tasks
    else:
        for t, y in enumerate(dataset.targets):
            rng = stream(dataset.seed, "split", t)
            tr, te = [], []
            for c in np.unique(y):
                idx = rng.permutation(np.flatnonzero(y == c))
                k = int(round(test_fraction * len(idx)))
                te.append(idx[:k])
                tr.append(idx[k:])
            train.append(np.sort(np.concatenate(tr)))
            test.append(np.sort(np.concatenate(te)))
    return replace(dataset, train_idx=train, test_idx=test, test_fraction=test_fraction)


def save_dataset(dataset: MultiTaskDataset, path) -> None:
    tensors = {}
    input_keys = []
    seen: dict[int, str] = {}
    for t in range(dataset.num_tasks):
        arr = dataset.inputs[t]
        key = seen.get(id(arr))
        if key is None:
            key = f"inputs/{t}"
            seen[id(arr)] = key
            tensors[key] = arr
        input_keys.append(key)
        tensors[f"task{t}/y"] = dataset.targets[t].astype(np.float64)
        tensors[f"task{t}/train"] = dataset.train_idx[t].astype(np.float64)
        tensors[f"task{t}/test"] = dataset.test_idx[t].astype(np.float64)
    manifest = dataset.manifest()
    manifest["input_keys"] = input_keys
    archive.save(path, tensors, manifest)


def load_dataset(path) -> MultiTaskDataset:
    tensors, man = archive.load(path)
    if man.get("format") != FORMAT:
        raise archive.ArchiveFormatError(f"{path}: not a dataset archive (format={man.get('format')!r})")
    if man.get("version") != FORMAT_VERSION:
        raise archive.ArchiveFormatError(f"{path}: unsupported dataset version {man.get('version')}")
    try:
        tasks = [TaskSpec.from_dict(d) for d in man["tasks"]]
        inputs, targets, train, test = [], [], [], []
        for t, task in enumerate(tasks):
            inputs.append(tensors[man["input_keys"][t]])
            y = tensors[f"task{t}/y"]
            targets.append(y.astype(np.int64) if task.is_classification else y)
            train.append(tensors[f"task{t}/train"].astype(np.int64))
            test.append(tensors[f"task{t}/test"].astype(np.int64))
    except KeyError as exc:
        raise archive.ArchiveFormatError(f"{path}: missing entry {exc}") from None
    return MultiTaskDataset(man["suite"], tasks, inputs, targets, train, test, man["seed"], man["test_fraction"])
