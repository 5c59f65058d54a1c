"""Command-line front end.

Every command works inside one run directory with the fixed layout

    config.resolved  datasets/  victims/  generators/  reports/  dumps/

and reads its configuration from ``--config`` (else the run's
``config.resolved``, else defaults), with flag overrides applied on top.
Failures print one JSON line ``{"error": kind, "code": n, "message": ...}``
to stderr and exit with 2 (config), 3 (format or missing artifact) or
4 (training divergence or victims below the clean-accuracy gate).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import archive
from . import config as C
from . import data as D
from . import evaluation as E
from . import generator as G
from . import objectives as O
from . import victims as V

log = logging.getLogger("mta")

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_DIVERGENCE = 0, 2, 3, 4
LAYOUT = ("datasets", "victims", "generators", "reports", "dumps")
RESOLVED = "config.resolved"


class CommandError(Exception):
    def __init__(self, kind: str, code: int, message: str):
        super().__init__(message)
        self.kind, self.code = kind, code


def missing(path: Path) -> CommandError:
    return CommandError("format", EXIT_FORMAT, f"missing artifact {path}")


# -- run directory ------------------------------------------------------------


class Run:
    def __init__(self, root, cfg: C.RunConfig):
        self.root = Path(root)
        self.cfg = cfg

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def prepare(self) -> "Run":
        for sub in LAYOUT:
            self.path(sub).mkdir(parents=True, exist_ok=True)
        self.path(RESOLVED).write_text(self.cfg.to_json())
        return self

    @property
    def dataset_file(self) -> Path:
        return self.path("datasets", "data.nta")

    def victims_file(self, family: str) -> Path:
        return self.path("victims", f"{family}.nta")

    def generator_files(self, method: str) -> list[Path]:
        if method == "gap":
            return [self.path("generators", f"gap_{t}.nta") for t in range(self.cfg.dataset.M)]
        return [self.path("generators", f"{method}.nta")]


def resolve_config(args) -> C.RunConfig:
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise C.ConfigError("--config", f"cannot read {args.config}: {exc.strerror}") from None
        raw = json.loads(text) if text.strip() else {}
    elif args.out and Path(args.out, RESOLVED).exists():
        raw = json.loads(Path(args.out, RESOLVED).read_text())
    else:
        raw = {}
    if not isinstance(raw, dict):
        raise C.ConfigError("", "config must be a JSON object")
    raw = json.loads(json.dumps(raw))
    overrides = {
        ("seed",): args.seed,
        ("generator", "mode"): args.mode,
        ("generator", "eps"): args.eps,
        ("attack", "goal"): args.goal,
        ("attack", "method"): args.method,
        ("out",): args.out,
    }
    for keys, value in overrides.items():
        if value is None:
            continue
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return C.from_dict(raw)


# -- artifact loading -------------------------------------------------------------


def load_data(run: Run) -> D.MultiTaskDataset:
    if not run.dataset_file.exists():
        raise missing(run.dataset_file)
    return D.load_dataset(run.dataset_file)


def load_victims(run: Run, family: str | None = None) -> V.VictimFamily:
    path = run.victims_file(family or run.cfg.victims.family)
    if not path.exists():
        raise missing(path)
    return V.load_family(path)


def load_generators(run: Run, method: str):
    paths = run.generator_files(method)
    for p in paths:
        if not p.exists():
            raise missing(p)
    gens = [G.load_generator(p)[0] for p in paths]
    return gens if method == "gap" else gens[0]


# -- commands ------------------------------------------------------------------------


def cmd_make_data(run: Run) -> str:
    d = run.cfg.dataset
    if d.suite == D.SHARED_LABEL:
        ds = D.make_shared_label_suite(
            run.cfg.seed, M=d.M, C=d.C, n_per_task=d.n, input_shape=(1, d.resolution, d.resolution),
            amplitude=d.amplitude, noise=d.noise, test_fraction=d.test_fraction,
        )
    else:
        ds = D.make_shared_input_suite(run.cfg.seed, n=d.n, resolution=d.resolution, test_fraction=d.test_fraction)
    D.save_dataset(ds, run.dataset_file)
    return f"wrote {run.dataset_file}"


def cmd_train_victims(run: Run) -> str:
    ds = load_data(run)
    v = run.cfg.victims
    kwargs = dict(arch_config={"widths": list(v.widths)}, epochs=v.epochs, lr=v.lr, batch_size=v.batch_size, seed=run.cfg.seed)
    if v.family == "shared_encoder":
        family, metrics = V.train_shared_encoder_family(ds, **kwargs)
    else:
        family, metrics = V.train_independent_family(ds, **kwargs)
    V.save_family(family, run.victims_file(v.family))
    summary = {"family": v.family, "clean_test": metrics}
    run.path("reports", f"victims_{v.family}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return f"wrote {run.victims_file(v.family)}"


def cmd_train_attack(run: Run) -> str:
    method = run.cfg.attack.method
    if method == "fgsm":
        return "fgsm has no trainable state; use evaluate"
    ds = load_data(run)
    family = load_victims(run)
    V.require_competence(family, ds)
    acfg = run.cfg.attack_config()
    gcfg = run.cfg.generator_config(ds.tasks[0].input_shape)
    extra = {"method": method, "goal": acfg.goal, "targets": acfg.targets}
    if method == "mta":
        gen, history = O.train_mta(G.init_generator(gcfg), family, ds, acfg)
        G.save_generator(gen, run.generator_files("mta")[0], extra)
        run.path("reports", "mta_log.csv").write_text(history.to_csv())
    else:
        gens, logs = O.train_gap_baseline(ds, family, acfg, gcfg)
        for t, (gen, history) in enumerate(zip(gens, logs)):
            G.save_generator(gen, run.generator_files("gap")[t], extra)
            run.path("reports", f"gap_log_{t}.csv").write_text(history.to_csv())
    return f"wrote {', '.join(str(p) for p in run.generator_files(method))}"


def write_report(run: Run, report: E.EvalReport, name: str) -> Path:
    csv_path = run.path("reports", f"{name}.csv")
    csv_path.write_text(report.to_csv())
    run.path("reports", f"{name}.md").write_text(report.to_markdown())
    return csv_path


def cmd_evaluate(run: Run) -> str:
    ds = load_data(run)
    family = load_victims(run)
    cfg = run.cfg
    method, split = cfg.attack.method, cfg.eval.split
    targets = cfg.attack.targets if cfg.attack.goal == O.TARGETED else None
    if method == "fgsm":
        report = E.evaluate_fgsm(family, ds, cfg.generator.eps, part=split, seed=cfg.seed)
    else:
        gen = load_generators(run, method)
        report = E.evaluate_attack(gen, family, ds, goal=cfg.attack.goal, targets=targets, method=method,
                                   part=split, seed=cfg.seed)
        if cfg.eval.timing:
            x, _ = ds.split(0, split)
            report.timing["inference_seconds"] = E.measure_inference_time(
                gen, x, repetitions=cfg.eval.timing_repetitions, warmup=cfg.eval.timing_warmup
            )
    if not cfg.eval.dense_metrics:
        keep = {"accuracy", "fooling_ratio", "target_accuracy", "pix_acc"}
        report.clean = [{k: v for k, v in m.items() if k in keep} for m in report.clean]
        report.attacked = [{k: v for k, v in m.items() if k in keep} for m in report.attacked]
    return f"wrote {write_report(run, report, method)}"


def cmd_transfer(run: Run) -> str:
    ds = load_data(run)
    gen = load_generators(run, "mta")
    family_b = load_victims(run, "shared_encoder")
    report = E.transfer_eval(gen, family_b, ds, seed=run.cfg.seed, part=run.cfg.eval.split)
    return f"wrote {write_report(run, report, 'transfer')}"


def cmd_compare(run_dirs: list[str], out: Path) -> str:
    reports = []
    for d in run_dirs:
        rdir = Path(d, "reports")
        if not rdir.is_dir():
            raise missing(rdir)
        for method in C.METHODS:
            p = rdir / f"{method}.csv"
            if p.exists():
                reports.append(E.EvalReport.from_csv(p.read_text()))
    if not reports:
        raise CommandError("format", EXIT_FORMAT, "no evaluation reports found")
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.md").write_text(E.comparison_table(reports))
    return f"wrote {out / 'comparison.md'}"


def to_pnm(v: np.ndarray, eps: float) -> list[tuple[str, bytes]]:
    """Encode one C x H x W perturbation as P6 (C=3) or one P5 per channel.

    [-eps, eps] maps linearly onto [0, 255].
    """
    q = np.clip(np.rint((np.asarray(v) + eps) / (2 * eps) * 255), 0, 255).astype(np.uint8)
    c, h, w = q.shape
    if c == 3:
        return [("ppm", b"P6\n%d %d\n255\n" % (w, h) + q.transpose(1, 2, 0).tobytes())]
    return [("pgm", b"P5\n%d %d\n255\n" % (w, h) + q[k].tobytes()) for k in range(c)]


def cmd_dump_perturbations(run: Run, count: int = 4) -> str:
    method = run.cfg.attack.method
    if method == "fgsm":
        raise CommandError("config", EXIT_CONFIG, "attack.method: fgsm has no generator to dump")
    ds = load_data(run)
    gens = load_generators(run, method)
    gens = gens if isinstance(gens, list) else [gens]
    written = 0
    for t in range(ds.num_tasks):
        gen, j = (gens[t], 0) if len(gens) > 1 else (gens[0], t)
        x, _ = ds.split(t, run.cfg.eval.split)
        with E.T.no_grad():
            v = G.perturbation(gen, j, x[:count]).data
        for i, sample in enumerate(v):
            images = to_pnm(sample, gen.config.eps)
            for k, (ext, payload) in enumerate(images):
                suffix = f"_c{k}" if len(images) > 1 else ""
                run.path("dumps", f"{method}_task{t + 1}_{i}{suffix}.{ext}").write_bytes(payload)
                written += 1
    return f"wrote {written} images to {run.path('dumps')}"


def cmd_run(run: Run) -> str:
    steps = [cmd_make_data, cmd_train_victims, cmd_train_attack, cmd_evaluate]
    return "; ".join(step(run) for step in steps)


COMMANDS = {
    "make-data": cmd_make_data,
    "train-victims": cmd_train_victims,
    "train-attack": cmd_train_attack,
    "evaluate": cmd_evaluate,
    "transfer": cmd_transfer,
    "dump-perturbations": cmd_dump_perturbations,
    "run": cmd_run,
}


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mta", description="Multi-task adversarial perturbation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["compare"]:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="run directory (compare: where to write the table)")
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", choices=[G.UNIVERSAL, G.PER_INSTANCE])
        p.add_argument("--goal", choices=[O.NON_TARGETED, O.TARGETED])
        p.add_argument("--method", choices=list(C.METHODS))
        p.add_argument("--eps", type=float)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "compare":
            p.add_argument("runs", nargs="+", help="run directories to compare")
        if name == "dump-perturbations":
            p.add_argument("--count", type=int, default=4, help="test inputs per task (per-instance mode)")
    return parser


def thread_cap() -> int | None:
    raw = os.environ.get("MTA_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise C.ConfigError("MTA_THREADS", f"must be a positive integer, got {raw!r}")
    return n


def dispatch(args) -> str:
    if args.command == "compare":
        if not args.out:
            raise C.ConfigError("--out", "compare needs an output directory")
        return cmd_compare(args.runs, Path(args.out))
    cfg = resolve_config(args)
    run = Run(cfg.out, cfg).prepare()
    if args.command == "dump-perturbations":
        return cmd_dump_perturbations(run, args.count)
    return COMMANDS[args.command](run)


def fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "code": code, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=thread_cap()):
            message = dispatch(args)
    except C.ConfigError as exc:
        return fail("config", EXIT_CONFIG, str(exc))
    except json.JSONDecodeError as exc:
        return fail("config", EXIT_CONFIG, f"invalid JSON: {exc}")
    except (archive.ArchiveFormatError, FileNotFoundError) as exc:
        return fail("format", EXIT_FORMAT, str(exc))
    except V.TrainingDivergence as exc:
        return fail("divergence", EXIT_DIVERGENCE, str(exc))
    except V.IncompetentVictim as exc:
        return fail("victim", EXIT_DIVERGENCE, str(exc))
    except CommandError as exc:
        return fail(exc.kind, exc.code, str(exc))
    except ValueError as exc:
        return fail("config", EXIT_CONFIG, str(exc))
    print(message)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
