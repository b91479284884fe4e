"""Command-line pipeline: generate, train-inr, encode, train-processor, infer, evaluate.

Every stage writes its artifacts under ``--out`` plus a completion marker in
``<out>/stages``. A stage whose inputs are missing fails with a
``StageDependencyError`` naming the upstream stage. ``run-all`` runs the
stages in order and skips the ones already marked complete.

On failure a single JSON line ``{"error": ..., "message": ...}`` is written
to stderr and the exit status is nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .caseio import read_case, read_manifest, write_case, write_manifest
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config
from .dataset import NormalizationStats, fit_normalization, generate_case, sweep_configs
from .estimators import InfinitySurrogate
from .evaluation import evaluate_model
from .inr import FIELDS, GEOMETRY_FIELDS, PHYSICS_FIELDS
from .processor import CaseCodes

logger = logging.getLogger("infinity")

STAGES = ("generate", "train-inr", "encode", "train-processor", "infer", "evaluate")
EXIT_ERROR = 1
EXIT_DEPENDENCY = 3


class StageDependencyError(RuntimeError):
    def __init__(self, stage: str, missing: str, detail: str = ""):
        super().__init__(f"stage {stage!r} needs stage {missing!r} to run first{': ' + detail if detail else ''}")
        self.stage = stage
        self.missing = missing


class Run:
    """Paths and helpers for one output directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        manifest = Path(cfg.manifest)
        self.manifest = manifest if manifest.is_absolute() else self.out / manifest

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def marker(self, name: str) -> Path:
        return self.out / "stages" / f"{name}.done"

    def done(self, name: str) -> bool:
        return self.marker(name).is_file()

    def mark(self, name: str):
        self.path("stages", f"{name}.done").write_text("ok\n")

    def require(self, stage: str, upstream: str, *files: Path):
        if not self.done(upstream):
            raise StageDependencyError(stage, upstream)
        for f in files:
            if not f.is_file():
                raise StageDependencyError(stage, upstream, f"missing {f}")

    def cases(self, split: str) -> list:
        return [read_case(p) for p, s in read_manifest(self.manifest) if s == split]

    def inr_checkpoint(self, tag: str) -> Path:
        return self.out / "checkpoints" / f"inr_{tag}.infc"

    @property
    def full_checkpoint(self) -> Path:
        return self.out / "checkpoints" / "model.infc"


def surrogate_for(cfg: RunConfig) -> InfinitySurrogate:
    """Estimator whose per-field settings mirror ``cfg``."""
    field_params = {}
    for tag in FIELDS:
        arch = cfg.architecture(tag)
        meta = cfg.meta_config(tag)
        field_params[tag] = dict(
            depth=arch.depth,
            hidden_width=arch.hidden_width,
            latent_dim=arch.latent_dim,
            num_fourier_features=arch.num_fourier_features,
            fourier_scale=arch.fourier_scale,
            activation=arch.activation,
            hyper_scale=cfg.hyper_scale(tag),
            inner_steps=meta.inner_steps,
            inner_lr=meta.inner_lr,
            outer_lr=meta.outer_lr,
            batch_size=meta.batch_size,
            max_iterations=meta.max_iterations,
            tol=meta.tol,
            window=meta.window,
            target_loss=meta.target_loss,
            points_per_case=meta.points_per_case,
            optimizer=meta.optimizer,
        )
    p = cfg.processor
    processor_params = dict(
        hidden_width=p.hidden_width,
        hidden_layers=p.hidden_layers,
        activation=p.activation,
        lr=p.lr,
        iterations=p.iterations,
        batch_size=p.batch_size,
        weight_decay=p.weight_decay,
        standardize=p.standardize,
    )
    return InfinitySurrogate(field_params=field_params, processor_params=processor_params, random_state=cfg.seed)


def surrogate_from_checkpoint(ck: Checkpoint) -> InfinitySurrogate:
    cfg = parse_config(ck.config_text)
    model = surrogate_for(cfg)
    return model.set_trained(ck.inrs, ck.processor, ck.stats, {t: cfg.meta_config(t) for t in FIELDS})


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def cmd_generate(run: Run):
    cfg = run.cfg
    configs = sweep_configs(cfg.n_train + cfg.n_test, cfg.seed, cfg.generator, cfg.sweep)
    entries = []
    for i, gc in enumerate(configs):
        split = "train" if i < cfg.n_train else "test"
        name = f"{split}_{i:04d}"
        try:
            case = generate_case(gc, name)
        except ValueError as exc:
            raise ValueError(f"case {i} ({name}): {exc}") from exc
        path = run.path("cases", f"{name}.infy")
        write_case(path, case)
        # paths relative to the manifest when it lives in the output directory
        entries.append((path.relative_to(run.out) if run.manifest.parent == run.out else path.resolve(), split))
    run.manifest.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(run.manifest, entries)
    run.mark("generate")
    logger.info("wrote %d cases and %s", len(entries), run.manifest)


def _stats(run: Run, train) -> NormalizationStats:
    path = run.out / "checkpoints" / "normalization.infc"
    if path.is_file():
        return load_checkpoint(path).stats
    stats = fit_normalization(train)
    save_checkpoint(run.path("checkpoints", "normalization.infc"), Checkpoint(stats=stats), "f64")
    return stats


def cmd_train_inr(run: Run, tag: str):
    run.require("train-inr", "generate", run.manifest)
    train = run.cases("train")
    model = surrogate_for(run.cfg)
    model.stats_ = _stats(run, train)
    model.fit_field(tag, train)
    save_checkpoint(
        run.path("checkpoints", f"inr_{tag}.infc"),
        Checkpoint(run.cfg.to_text(paths=False), {tag: model.inrs_[tag]}),
        run.cfg.checkpoint_precision,
    )
    model.logs_[tag].to_csv(run.path("logs", f"train_inr_{tag}.csv"))
    run.mark(f"train-inr-{tag}")


def _assemble(run: Run, stage: str) -> Checkpoint:
    ck = Checkpoint(run.cfg.to_text(paths=False))
    for tag in FIELDS:
        run.require(stage, f"train-inr-{tag}", run.inr_checkpoint(tag))
        ck = ck.merge(Checkpoint(inrs=load_checkpoint(run.inr_checkpoint(tag)).inrs))
    ck.stats = load_checkpoint(run.out / "checkpoints" / "normalization.infc").stats
    return ck


def _write_codes(path: Path, codes: list):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "field", "values"])
        for c in codes:
            w.writerow([c.case_id, "velocity", " ".join(repr(float(v)) for v in c.inlet_velocity)])
            for tag, z in (("d", c.z_d), ("n", c.z_n), *((t, c.targets[t]) for t in PHYSICS_FIELDS)):
                w.writerow([c.case_id, tag, " ".join(repr(float(v)) for v in z)])


def _read_codes(path: Path) -> list:
    rows: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["case_id"], {})[row["field"]] = np.array([float(v) for v in row["values"].split()])
    return [
        CaseCodes(cid, r["d"], r["n"], r["velocity"], {t: r[t] for t in PHYSICS_FIELDS}) for cid, r in rows.items()
    ]


def cmd_encode(run: Run):
    ck = _assemble(run, "encode")
    model = surrogate_from_checkpoint(ck)
    codes = model.encode(run.cases("train"))
    _write_codes(run.path("codes", "train_codes.csv"), codes)
    run.mark("encode")


def cmd_train_processor(run: Run):
    codes_path = run.out / "codes" / "train_codes.csv"
    run.require("train-processor", "encode", codes_path)
    ck = _assemble(run, "train-processor")
    model = surrogate_for(run.cfg)
    model.fit_processor(_read_codes(codes_path))
    ck.processor = model.processor_
    save_checkpoint(run.path("checkpoints", "model.infc"), ck, run.cfg.checkpoint_precision)
    with open(run.path("logs", "train_processor.csv"), "w") as fh:
        fh.write("iteration,code_mse\n")
        fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(model.processor_log_.losses))
    run.mark("train-processor")


def _load_full(run: Run, stage: str) -> InfinitySurrogate:
    run.require(stage, "train-processor", run.full_checkpoint)
    return surrogate_from_checkpoint(load_checkpoint(run.full_checkpoint))


def cmd_infer(run: Run, tag: str | None = None):
    """Predicted physics fields per test case; ``d``/``n`` give the geometry reconstruction."""
    model = _load_full(run, "infer")
    for case in run.cases("test"):
        if tag in GEOMETRY_FIELDS:
            pts = case.points_for(tag)
            values = model.reconstruct(case, tag).reshape(len(pts), -1)
            columns = [tag] if values.shape[1] == 1 else [f"{tag}_x", f"{tag}_y"]
        else:
            fields = PHYSICS_FIELDS if tag is None else (tag,)
            pts = case.x_vol
            pred = model.infer_case(case)(pts, fields=fields)
            values = np.column_stack([pred[t] for t in fields])
            columns = list(fields)
        with open(run.path("predictions", f"{case.case_id}.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", *columns])
            for (x, y), row in zip(pts, values):
                w.writerow([repr(float(x)), repr(float(y)), *(repr(float(v)) for v in row)])
    run.mark("infer")


def cmd_evaluate(run: Run):
    model = _load_full(run, "evaluate")
    report = evaluate_model(run.cases("test"), model, model.stats_)
    report.to_csv(run.path("report.csv"))
    report.timing_csv(run.path("timing.csv"))
    text = report.to_text()
    run.path("report.txt").write_text(text + "\n")
    print(text)
    run.mark("evaluate")
    return report


def cmd_run_all(run: Run):
    if not run.done("generate"):
        cmd_generate(run)
    for tag in FIELDS:
        if not run.done(f"train-inr-{tag}"):
            cmd_train_inr(run, tag)
    for name, fn in (("encode", cmd_encode), ("train-processor", cmd_train_processor), ("infer", cmd_infer), ("evaluate", cmd_evaluate)):
        if not run.done(name):
            fn(run)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value run configuration")
    common.add_argument("--seed", type=int, metavar="N", help="override the configured seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="infinity", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write synthetic cases and a manifest")
    p = sub.add_parser("train-inr", parents=[common], help="meta-train the INR of one field (all if omitted)")
    p.add_argument("--field", choices=FIELDS)
    sub.add_parser("encode", parents=[common], help="encode training cases into codes")
    sub.add_parser("train-processor", parents=[common], help="fit the latent processor and write the full checkpoint")
    p = sub.add_parser("infer", parents=[common], help="write per-case prediction CSVs for the test split")
    p.add_argument("--field", choices=FIELDS)
    sub.add_parser("evaluate", parents=[common], help="write the test report")
    sub.add_parser("run-all", parents=[common], help="run every stage not yet complete")
    return parser


def resolve_config(args, environ=None) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = cfg.with_env(environ)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(resolve_config(args))
        cmd = args.command
        if cmd == "generate":
            cmd_generate(run)
        elif cmd == "train-inr":
            for tag in [args.field] if args.field else FIELDS:
                cmd_train_inr(run, tag)
        elif cmd == "encode":
            cmd_encode(run)
        elif cmd == "train-processor":
            cmd_train_processor(run)
        elif cmd == "infer":
            cmd_infer(run, args.field)
        elif cmd == "evaluate":
            cmd_evaluate(run)
        else:
            cmd_run_all(run)
    except StageDependencyError as exc:
        _error_line(exc, stage=exc.stage, missing_stage=exc.missing)
        return EXIT_DEPENDENCY
    except (ConfigError, OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        _error_line(exc)
        return EXIT_ERROR
    return 0


def _error_line(exc: Exception, **extra):
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), **extra}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
