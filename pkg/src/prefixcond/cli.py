"""Command-line entry point: ``prefixcond {train,eval,reproduce,init-config}``.

Exit codes
  0  success
  1  unexpected internal error
  2  bad arguments or configuration
  3  training aborted on a non-finite loss
  4  evaluation suite does not apply to this model
  5  output directory exists (pass --force to overwrite)
  6  unreadable or inconsistent checkpoint

Outputs go to ``--out`` when given, otherwise to a timestamped directory
under ``$PREFIXCOND_OUT_ROOT`` (default ``./runs``). Every output directory
holds exactly one ``manifest.json``.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import shutil
import subprocess
import sys
import time
from dataclasses import asdict, dataclass
from importlib import metadata
from pathlib import Path

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_MISMATCH = 4
EXIT_EXISTS = 5
EXIT_CHECKPOINT = 6

OUT_ROOT_ENV = "PREFIXCOND_OUT_ROOT"
SUITES = ("zeroshot", "prefix-sweep", "linear-probe", "retrieval", "name-shift", "export-features", "export-attention")

log = logging.getLogger("prefixcond")


class OutputExists(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    seed: int | None
    output_dir: str
    version: str
    started: str
    wall_clock_s: float
    status: str = "ok"
    argv: list[str] | None = None

    def write(self, out_dir: Path) -> None:
        (out_dir / "manifest.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True), encoding="utf-8")


def version_stamp() -> str:
    try:
        v = metadata.version("prefixcond")
    except metadata.PackageNotFoundError:
        v = "unknown"
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            v += f"+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return v


def prepare_out_dir(command: str, out: str | None, force: bool) -> Path:
    if out is None:
        root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        path = root / f"{command}-{stamp}"
    else:
        path = Path(out)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise OutputExists(f"output directory {path} is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


class _Run:
    """Context for one command: output directory plus its manifest."""

    def __init__(self, command, args, config_path=None, seed=None):
        self.out = prepare_out_dir(command, args.out, args.force)
        self.command = command
        self.config_path = config_path
        self.seed = seed
        self.started = _dt.datetime.now().isoformat(timespec="seconds")
        self.t0 = time.perf_counter()

    def finish(self, status="ok"):
        RunManifest(
            self.command,
            self.config_path,
            self.seed,
            str(self.out),
            version_stamp(),
            self.started,
            round(time.perf_counter() - self.t0, 3),
            status,
            sys.argv[1:],
        ).write(self.out)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .trainer import ConfigError, TrainConfig, Trainer, TrainingDiverged

    try:
        cfg = TrainConfig.from_json(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = _Run("train", args, str(args.config), cfg.seed)
    (run.out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    trainer = Trainer(cfg)
    try:
        trainer.run(args.max_steps)
    except TrainingDiverged as exc:
        trainer.log.to_jsonl(run.out / "metrics.jsonl")
        run.finish("diverged")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    trainer.log.to_jsonl(run.out / "metrics.jsonl")
    trainer.save(run.out / "model.ckpt")
    run.finish()
    last = trainer.log.records[-1] if trainer.log.records else {}
    print(f"trained {trainer.step} steps; final loss {last.get('loss', float('nan')):.4f}; wrote {run.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _resolve_prefix(value: str, model):
    from .text import Prefix

    if value == "auto":
        return Prefix.CAPTION if model.trained_with_prefix else None
    p = Prefix.parse(None if value == "none" else value)
    if p is not None and not model.trained_with_prefix:
        from .evalsuite import SuiteMismatchError

        raise SuiteMismatchError("model was trained without prefixes; use --prefix none")
    return p


def _eval_suite(args, model, cfg, out: Path):
    import numpy as np

    from . import evalsuite as ev
    from .trainer import build_data

    data = build_data(cfg)
    cat, tm = data.catalog, data.templates
    h = model.meta.get("config_hash", "")
    if args.suite == "zeroshot":
        prefix = _resolve_prefix(args.prefix, model)
        bank = ev.ClassEmbeddingBank.build(model, cat, tm, prefix)
        parts = {"seen": data.label_test, "caption_only": data.zeroshot_test}
        feats = {k: model.image_features(s.pixels) for k, s in parts.items()}
        preds = {k: ev.predict(bank, f) for k, f in feats.items()}
        truth = {k: s.class_ids for k, s in parts.items()}
        allp = np.concatenate(list(preds.values()))
        allt = np.concatenate(list(truth.values()))
        rep = ev.accuracy_report(allp, allt, "top1_acc", h, "label_test+zeroshot_test")
        for k in parts:
            rep.metrics[f"{k}/top1_acc"] = float((preds[k] == truth[k]).mean())
        rep.notes.append(f"bank prefix: {prefix.value if prefix else 'none'}; {len(cat)} candidate classes")
        return rep
    if args.suite == "prefix-sweep":
        metrics, per = {}, {}
        for name, images, ids in (
            ("zeroshot", data.zeroshot_test, None),
            ("shifted", data.shifted_test, cat.seen_ids),
            ("seen", data.label_test, cat.seen_ids),
        ):
            r = ev.test_time_prefix_sweep(model, images, cat, tm, ids)
            metrics.update({f"{name}/{k}": v for k, v in r.metrics.items()})
            per[name] = r.per_class
        return ev.EvalReport(metrics, h, "prefix-sweep")
    if args.suite == "linear-probe":
        tr = model.image_features(data.label_train.pixels, normalize=False)
        te = model.image_features(data.label_test.pixels, normalize=False)
        rep = ev.linear_probe(tr, data.label_train.class_ids, te, data.label_test.class_ids)
        rep.config_hash = h
        return rep
    if args.suite == "retrieval":
        return ev.retrieval_eval(model, data.caption_test, prefix=_resolve_prefix(args.prefix, model))
    if args.suite == "name-shift":
        return ev.class_name_shift_eval(model, cat, data.label_test, tm, cat.seen_ids)
    if args.suite == "export-features":
        from .text import Prefix

        n = args.samples
        if args.prefix == "auto":
            pp = (Prefix.PROMPT, Prefix.CAPTION) if model.trained_with_prefix else (None, None)
        else:
            p = _resolve_prefix(args.prefix, model)
            pp = (p, p)
        r1, f1 = ev.text_feature_rows(model, data.label_test.texts[:n], pp[0], "prompt", data.label_test.class_ids[:n])
        r2, f2 = ev.text_feature_rows(model, data.caption_test.texts[:n], pp[1], "caption", data.caption_test.class_ids[:n])
        feats = np.vstack([f1, f2])
        ev.export_features(r1 + r2, feats, out / "features.csv")
        sil = ev.silhouette(feats, [0] * len(f1) + [1] * len(f2))
        return ev.EvalReport({"source_silhouette": sil, "rows": float(len(feats))}, h, "export-features")
    if args.suite == "export-attention":
        tables = ev.export_attention(model, args.sentence, out / "attention.csv")
        return ev.EvalReport({"tables": float(len(tables))}, h, "export-attention", notes=[args.sentence])
    raise ValueError(args.suite)


def cmd_eval(args) -> int:
    from .evalsuite import SuiteMismatchError
    from .text import TokenizeError
    from .trainer import CheckpointError, load_model

    try:
        model, cfg = load_model(args.checkpoint)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    if args.suite == "prefix-sweep" and not model.trained_with_prefix:
        print("error: prefix-sweep needs a prefix-trained model; use --suite zeroshot --prefix none", file=sys.stderr)
        return EXIT_MISMATCH
    run = _Run("eval", args, None, cfg.seed)
    try:
        report = _eval_suite(args, model, cfg, run.out)
    except SuiteMismatchError as exc:
        run.finish("mismatch")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except TokenizeError as exc:
        run.finish("bad-input")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report.to_json(run.out / "report.json")
    run.finish()
    for k, v in sorted(report.metrics.items()):
        print(f"{k:<32} {v:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# reproduce
# ---------------------------------------------------------------------------


def cmd_reproduce(args) -> int:
    from . import experiments as ex
    from .trainer import ConfigError, TrainConfig, TrainingDiverged

    try:
        base = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seeds < 1:
        print("error: --seeds must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    run = _Run("reproduce", args, args.config, None)
    ckpt_dir = None
    if args.save_checkpoints:
        ckpt_dir = run.out / "checkpoints"
        ckpt_dir.mkdir()

    def progress(r):
        print(f"  {r.variant.name:<28} seed {r.seed}  {r.seconds:6.1f}s", flush=True)

    try:
        table, results = ex.run_experiment(args.experiment, args.seeds, base, args.workers, ckpt_dir, progress)
    except TrainingDiverged as exc:
        run.finish("diverged")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    table.to_csv(run.out / "table.csv")
    text = table.render()
    (run.out / "table.txt").write_text(text + "\n", encoding="utf-8")
    with open(run.out / "runs.jsonl", "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(
                json.dumps(
                    {"variant": r.variant.name, "seed": r.seed, "config_hash": r.config_hash, "seconds": r.seconds, "metrics": r.metrics},
                    sort_keys=True,
                )
                + "\n"
            )
    run.finish()
    print(text)
    return EXIT_OK


def cmd_init_config(args) -> int:
    from .trainer import TrainConfig

    path = Path(args.path)
    if path.exists() and not args.force:
        print(f"error: {path} exists; pass --force to overwrite", file=sys.stderr)
        return EXIT_EXISTS
    path.write_text(json.dumps(TrainConfig().to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="prefixcond", description=__doc__.split("\n\n")[0], formatter_class=argparse.RawDescriptionHelpFormatter
    )
    ap.epilog = __doc__.split("\n\n", 1)[1]
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help="output directory (default: timestamped under $%s)" % OUT_ROOT_ENV)
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = sub.add_parser("train", help="train one model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int, help="stop early after this many steps")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run one evaluation suite on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--suite", required=True, choices=SUITES)
    p.add_argument("--prefix", default="auto", choices=("auto", "prompt", "caption", "none"))
    p.add_argument("--samples", type=int, default=100, help="sentences per source for export-features")
    p.add_argument("--sentence", default="a sculpture of an airplane", help="input for export-attention")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reproduce", help="train and compare the variants of one experiment")
    p.add_argument("--experiment", required=True, choices=("main", "sampling", "prefix", "name-shift", "retrieval"))
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--config", help="base config (default: built-in defaults)")
    p.add_argument("--workers", type=int, default=1, help="parallel training processes")
    p.add_argument("--save-checkpoints", action="store_true")
    common(p)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("init-config", help="write the default training config")
    p.add_argument("path")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_init_config)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except OutputExists as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXISTS
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
