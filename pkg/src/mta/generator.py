"""
Multi-task perturbation generator.

A shared encoder (two stride-2 convs plus residual blocks) feeds one decoder
per task (two nearest-upsample + conv stages, tanh output).  The decoder
output is rescaled onto the L_p ball of radius eps by ``project_epsilon``.

In universal mode each task owns a fixed random pattern ``Z_t`` drawn once
at construction; the perturbation for task t is the generator's image of
``Z_t``.  In per-instance mode the generator maps each input to its own
perturbation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import archive, nn
from . import tensor as T
from .rng import stream
from .tensor import Tensor

UNIVERSAL = "universal"
PER_INSTANCE = "per_instance"
FORMAT = "mta-generator"
FORMAT_VERSION = 1


@dataclass
class GeneratorConfig:
    M: int = 3
    mode: str = UNIVERSAL
    eps: float = 0.1
    p: float = math.inf
    blocks: int = 2
    widths: tuple[int, int] = (8, 16)
    input_shape: tuple[int, int, int] = (1, 16, 16)
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.p = float(self.p)
        if self.M < 1:
            raise ValueError(f"generator needs at least one task, got M={self.M}")
        if self.mode not in (UNIVERSAL, PER_INSTANCE):
            raise ValueError(f"unknown generator mode {self.mode!r}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.p not in (2.0, math.inf):
            raise ValueError(f"only p=2 and p=inf are supported, got {self.p}")
        if self.blocks < 1:
            raise ValueError(f"need at least one residual block, got {self.blocks}")
        if len(self.widths) != 2 or min(self.widths) < 1:
            raise ValueError(f"widths must be two positive ints, got {self.widths}")
        _, h, w = self.input_shape
        if h % 4 or w % 4:
            raise ValueError(f"input height/width must be divisible by 4, got {h}x{w}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["p"] = "inf" if math.isinf(self.p) else self.p
        d["widths"] = list(self.widths)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        d["p"] = math.inf if d.get("p") == "inf" else d.get("p", math.inf)
        return cls(**d)


def encoder_layers(cfg: GeneratorConfig) -> list[dict]:
    cin = cfg.input_shape[0]
    w0, w1 = cfg.widths
    layers = [nn.conv(cin, w0, stride=2), nn.RELU, nn.conv(w0, w1, stride=2), nn.RELU]
    return layers + [nn.res(w1) for _ in range(cfg.blocks)]


def decoder_layers(cfg: GeneratorConfig) -> list[dict]:
    cin = cfg.input_shape[0]
    w0, w1 = cfg.widths
    return [nn.UPSAMPLE, nn.conv(w1, w0), nn.RELU, nn.UPSAMPLE, nn.conv(w0, cin), nn.TANH]


@dataclass
class MultiTaskGenerator:
    config: GeneratorConfig
    params: dict[str, Tensor]
    patterns: list[np.ndarray] = field(default_factory=list)
    encoder_calls: int = 0

    @property
    def M(self) -> int:
        return self.config.M

    @property
    def encoder(self) -> list[dict]:
        return encoder_layers(self.config)

    @property
    def decoder(self) -> list[dict]:
        return decoder_layers(self.config)

    def encoder_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("enc.")}

    def decoder_params(self, t: int) -> dict[str, Tensor]:
        prefix = f"dec{t}."
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def checksum(self) -> str:
        return nn.checksum(self.params)


def init_generator(config: GeneratorConfig) -> MultiTaskGenerator:
    enc, dec = encoder_layers(config), decoder_layers(config)
    params = nn.init_params(enc, stream(config.seed, "generator", "enc"), "enc.")
    for t in range(config.M):
        params.update(nn.init_params(dec, stream(config.seed, "generator", "dec", t), f"dec{t}."))
    patterns = []
    if config.mode == UNIVERSAL:
        for t in range(config.M):
            rng = stream(config.seed, "generator", "pattern", t)
            patterns.append(rng.uniform(0.0, 1.0, size=(1,) + config.input_shape))
    return MultiTaskGenerator(config, params, patterns)


def project_epsilon(raw, eps: float, p: float = math.inf, per_sample: bool = False) -> Tensor:
    """Scale ``raw`` by min(1, eps / ||raw||_p).

    With ``per_sample`` the norm is taken over all axes but the first, so each
    row of a batch is projected independently.  A zero tensor maps to itself.
    On the ball boundary the gradient of the inside (identity) branch is used.
    """
    raw = T.as_tensor(raw)
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    p = float(p)
    if p not in (2.0, math.inf):
        raise ValueError(f"only p=2 and p=inf are supported, got {p}")
    x = raw.data
    rows = x.reshape(x.shape[0], -1) if per_sample and x.ndim > 0 else x.reshape(1, -1)
    norm = np.abs(rows).max(axis=1, initial=0.0) if math.isinf(p) else np.sqrt((rows * rows).sum(axis=1))
    outside = norm > eps
    scale = np.where(outside, eps / np.where(outside, norm, 1.0), 1.0)
    bshape = (-1,) + (1,) * (x.ndim - 1) if per_sample and x.ndim > 0 else ()
    out = x * scale.reshape(bshape) if bshape else x * scale[0]

    def rule(g):
        grows = g.reshape(rows.shape)
        grad = grows * scale[:, None]
        if outside.any():
            gs = (grows * rows).sum(axis=1)
            coef = np.where(outside, -gs * eps / np.where(outside, norm, 1.0) ** 2, 0.0)
            if math.isinf(p):
                dnorm = np.zeros_like(rows)
                arg = np.abs(rows).argmax(axis=1)
                dnorm[np.arange(len(rows)), arg] = np.sign(rows[np.arange(len(rows)), arg])
            else:
                dnorm = rows / np.where(norm > 0, norm, 1.0)[:, None]
            grad = grad + coef[:, None] * dnorm
        return (grad.reshape(x.shape),)

    return T.record("project_epsilon", out, (raw,), rule)


def lp_norm(v: np.ndarray, p: float, per_sample: bool = False) -> np.ndarray:
    v = np.asarray(v)
    rows = v.reshape(v.shape[0], -1) if per_sample else v.reshape(1, -1)
    return np.abs(rows).max(axis=1) if math.isinf(p) else np.sqrt((rows * rows).sum(axis=1))


def encode(gen: MultiTaskGenerator, a) -> Tensor:
    gen.encoder_calls += 1
    return nn.run(gen.encoder, gen.params, T.as_tensor(a), "enc.")


def decode(gen: MultiTaskGenerator, t: int, latent: Tensor) -> Tensor:
    if not 0 <= t < gen.M:
        raise IndexError(f"task {t} out of range for a {gen.M}-task generator")
    raw = nn.run(gen.decoder, gen.params, latent, f"dec{t}.")
    return project_epsilon(raw, gen.config.eps, gen.config.p, per_sample=True)


def generate_universal(gen: MultiTaskGenerator, t: int) -> Tensor:
    """v_t for task t, shape 1 x C x H x W (broadcasts over a batch)."""
    if gen.config.mode != UNIVERSAL:
        raise ValueError("generate_universal needs a universal-mode generator")
    return decode(gen, t, encode(gen, gen.patterns[t]))


def _check_input(gen: MultiTaskGenerator, x) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[1:] != gen.config.input_shape:
        raise T.ShapeError(f"generator expects N x {gen.config.input_shape}, got {x.shape}")
    return x


def generate_per_instance(gen: MultiTaskGenerator, t: int, x) -> Tensor:
    if gen.config.mode != PER_INSTANCE:
        raise ValueError("generate_per_instance needs a per-instance generator")
    return decode(gen, t, encode(gen, _check_input(gen, x)))


def shared_encoding_path(gen: MultiTaskGenerator, x) -> Tensor:
    """Encode a shared input batch once; the latent is decodable by every task."""
    if gen.config.mode != PER_INSTANCE:
        raise ValueError("the shared encoding path applies to per-instance generators")
    return encode(gen, _check_input(gen, x))


def generate_all_shared(gen: MultiTaskGenerator, x) -> list[Tensor]:
    """Perturbations for all tasks from one encoder pass over shared inputs."""
    latent = shared_encoding_path(gen, x)
    return [decode(gen, t, latent) for t in range(gen.M)]


def perturbation(gen: MultiTaskGenerator, t: int, x) -> Tensor:
    """Mode-dispatching helper: v_t (universal) or v_t^i (per instance)."""
    if gen.config.mode == UNIVERSAL:
        return generate_universal(gen, t)
    return generate_per_instance(gen, t, x)


def _broadcastable(xshape, vshape) -> bool:
    return xshape == vshape or (len(xshape) == len(vshape) and vshape[0] == 1 and xshape[1:] == vshape[1:])


def apply_perturbation(x, v, clamp_range: tuple[float, float] | None = None):
    """x + v, optionally clipped to ``clamp_range``.

    Works on Tensors (differentiable) and on plain arrays.  A universal v of
    shape 1 x ... broadcasts over the batch.
    """
    tensors = isinstance(x, Tensor) or isinstance(v, Tensor)
    if tensors:
        x, v = T.as_tensor(x), T.as_tensor(v)
    else:
        x, v = np.asarray(x, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if not _broadcastable(x.shape, v.shape):
        raise T.ShapeError(f"apply_perturbation: x {x.shape} vs v {v.shape}")
    if tensors:
        out = T.add(x, v)
        return T.clip(out, *clamp_range) if clamp_range else out
    out = x + v
    return np.clip(out, *clamp_range) if clamp_range else out


def count_parameters(gen: MultiTaskGenerator) -> int:
    return int(sum(p.size for p in gen.params.values()))


def closed_form_parameter_count(cfg: GeneratorConfig) -> int:
    """|f| + M * |g| from the layer arithmetic alone."""
    return nn.param_count(encoder_layers(cfg)) + cfg.M * nn.param_count(decoder_layers(cfg))


def freeze(gen: MultiTaskGenerator) -> MultiTaskGenerator:
    for p in gen.params.values():
        p.requires_grad = False
        p.grad = None
    return gen


def save_generator(gen: MultiTaskGenerator, path, extra: dict | None = None) -> None:
    tensors = {name: p.data for name, p in gen.params.items()}
    for t, z in enumerate(gen.patterns):
        tensors[f"Z/{t}"] = z
    manifest = {"format": FORMAT, "version": FORMAT_VERSION, "config": gen.config.to_dict()}
    if extra:
        manifest["extra"] = extra
    archive.save(path, tensors, manifest)


def load_generator(path) -> tuple[MultiTaskGenerator, dict]:
    tensors, man = archive.load(path)
    if man.get("format") != FORMAT:
        raise archive.ArchiveFormatError(f"{path}: not a generator checkpoint (format={man.get('format')!r})")
    if man.get("version") != FORMAT_VERSION:
        raise archive.ArchiveFormatError(f"{path}: unsupported generator version {man.get('version')}")
    cfg = GeneratorConfig.from_dict(man["config"])
    skeleton = init_generator(cfg)
    try:
        params = {name: Tensor(tensors[name]) for name in skeleton.params}
        patterns = [tensors[f"Z/{t}"] for t in range(cfg.M)] if cfg.mode == UNIVERSAL else []
    except KeyError as exc:
        raise archive.ArchiveFormatError(f"{path}: missing tensor {exc}") from None
    return MultiTaskGenerator(cfg, params, patterns), man.get("extra", {})
