"""Command-line driver: train, generate, evaluate.

Configuration is a JSON file with "dataset", "train", and "evaluate"
sections; flags override the common knobs. Every command writes only under
its --out directory and is fully reproducible from (config, seed): the
manifest records the config hash so runs can be audited later.

Exit codes: 0 success, 2 config error, 3 runtime error, 4 I/O error.
"""

from __future__ import annotations

import os

# Thread caps must be exported before numpy initializes its BLAS. This works
# when the process starts via this module (console script / python -m); if
# numpy was already imported elsewhere the caps are best-effort no-ops.
_threads = os.environ.get("CAPSAN_THREADS")
if _threads:
    for _var in (
        "OPENBLAS_NUM_THREADS",
        "OMP_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
    ):
        os.environ.setdefault(_var, _threads)

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import diffcore as dc
from .checkpoint import canonical_json
from .datasets import (
    ImbalanceSpec,
    LabeledDataset,
    filter_classes,
    induce_imbalance,
    load_idx,
    make_synthetic,
    split,
    write_idx,
)
from .errors import (
    BadCheckpoint,
    BadMagic,
    CapsanError,
    ClassTooSmall,
    ConfigInvalid,
    CountMismatch,
    EmptyMinoritySet,
    SingleClass,
    TruncatedFile,
    UnknownClass,
    UnsupportedClassCount,
)
from .fidlite import load_extractor
from .metrics import (
    MetricsReport,
    battle_ratio,
    classification_report,
    confusion_matrix,
    fid,
    roc_auc,
    sample_set_variability,
)
from .mixture import num_to_generate, sample_latent
from .models import discriminator_forward
from .svgplot import line_plot, write_svg
from .trainer import (
    RunState,
    TrainConfig,
    as_predictor,
    as_sampler,
    generate_class_samples,
    load_run,
    train,
)

SWEEP_KEEP_RATES = (0.4, 0.2, 0.1, 0.05, 0.025)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_IO = 4

_CONFIG_ERRORS = (
    ConfigInvalid,
    UnknownClass,
    UnsupportedClassCount,
    ClassTooSmall,
    EmptyMinoritySet,
    SingleClass,
    ValueError,
)
_IO_ERRORS = (OSError, BadMagic, TruncatedFile, CountMismatch, BadCheckpoint)


def load_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError:
        raise
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigInvalid(f"{path}:{err.lineno}:{err.colno}: {err.msg}") from err
    if not isinstance(cfg, dict):
        raise ConfigInvalid(f"{path}:1:1: top level must be a JSON object")
    return cfg


def build_dataset(section: dict) -> LabeledDataset:
    """Materialize the base dataset named by the config's "dataset" section."""
    if not isinstance(section, dict):
        raise ConfigInvalid('"dataset" section must be an object')
    if "synthetic" in section:
        spec = dict(section["synthetic"])
        ds = make_synthetic(
            num_classes=int(spec.get("num_classes", 2)),
            per_class=int(spec.get("per_class", 100)),
            image_size=int(spec.get("image_size", 16)),
            seed=int(spec.get("seed", 0)),
        )
    elif "idx" in section:
        spec = section["idx"]
        ds = load_idx(spec["images"], spec["labels"])
    else:
        raise ConfigInvalid('"dataset" needs either a "synthetic" or an "idx" entry')
    if "filter_classes" in section:
        ds = filter_classes(ds, [int(c) for c in section["filter_classes"]])
    return ds


def prepare_splits(section: dict, keep_rate_override: float | None = None):
    """Base dataset -> (imbalanced train, balanced test).

    The split happens before imbalance induction so the test side keeps its
    class balance.
    """
    ds = build_dataset(section)
    test_fraction = float(section.get("test_fraction", 0.2))
    train_ds, test_ds = split(ds, test_fraction, seed=int(section.get("split_seed", 0)))
    imb = section.get("imbalance")
    if imb is not None or keep_rate_override is not None:
        imb = dict(imb or {})
        if keep_rate_override is not None:
            imb["keep_rate"] = keep_rate_override
        spec = ImbalanceSpec(
            target_class=int(imb.get("target_class", train_ds.num_classes - 1)),
            keep_rate=float(imb.get("keep_rate", 1.0)),
            seed=int(imb.get("seed", 0)),
        )
        train_ds = induce_imbalance(train_ds, spec)
    return train_ds, test_ds


def train_config_from(section: dict, args) -> TrainConfig:
    cfg = TrainConfig.from_dict(dict(section or {}))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "phi", None) is not None:
        cfg.phi = args.phi
    if getattr(args, "pi", None) is not None:
        cfg.pi = args.pi
    if getattr(args, "timing", False):
        cfg.clock = lambda: time.perf_counter() * 1000.0
    cfg.validate()
    return cfg


def write_manifest(out: Path, command: str, config: dict, seed, artifacts) -> None:
    digest = hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()
    payload = {
        "command": command,
        "config_sha256": digest,
        "seed": seed,
        "version": f"capsan-{__version__}",
        "artifacts": sorted(str(a) for a in artifacts),
    }
    (out / "manifest.json").write_text(canonical_json(payload) + "\n", encoding="utf-8")


def write_pgm(path, image: np.ndarray) -> None:
    """Plain-text (P2) grayscale PGM from one [H x W] or [C x H x W] image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    gray = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.int64)
    lines = ["P2", f"{gray.shape[1]} {gray.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in gray]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def report_for_predictions(y_true, y_pred, num_classes: int,
                           num_slots: int | None = None) -> MetricsReport:
    cm = confusion_matrix(y_true, y_pred, num_classes, num_slots=num_slots)
    return classification_report(cm)


def write_report_files(out: Path, report: MetricsReport) -> list[str]:
    """Write report.json (canonical) and report.csv; returns file names."""
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    rows = [("ba", report.ba), ("g_mean", report.g_mean), ("f_measure", report.f_measure)]
    rows += [(f"recall_{i}", v) for i, v in enumerate(report.recall)]
    rows += [(f"precision_{i}", v) for i, v in enumerate(report.precision)]
    for key in ("auc", "fid", "ssim_variability"):
        value = getattr(report, key)
        if value is not None:
            rows.append((key, value))
    if report.battle is not None:
        for key in sorted(report.battle):
            value = report.battle[key]
            if isinstance(value, (int, float)) or value is None:
                rows.append((f"battle_{key}", value))
    lines = ["metric,value"] + [f"{k},{repr(float(v)) if v is not None else ''}" for k, v in rows]
    (out / "report.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return ["report.json", "report.csv"]


def _collect_lengths(D, images: np.ndarray, batch_size: int) -> np.ndarray:
    out = []
    with dc.no_grad():
        for start in range(0, images.shape[0], batch_size):
            res = discriminator_forward(D, images[start:start + batch_size])
            out.append(res.lengths.data)
    return np.concatenate(out, axis=0)


def _loss_curve_svg(log_path: Path) -> str | None:
    if not log_path.exists():
        return None
    import csv

    with open(log_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return None
    iters = [int(r["iteration"]) for r in rows]
    return line_plot(
        [
            ("disc_loss", iters, [float(r["disc_loss"]) for r in rows]),
            ("gen_loss", iters, [float(r["gen_loss"]) for r in rows]),
            ("fm_term", iters, [float(r["fm_term"]) for r in rows]),
        ],
        title="training losses",
        xlabel="iteration",
        ylabel="loss",
    )


def cmd_train(args) -> int:
    config = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = prepare_splits(
        config.get("dataset", {}), keep_rate_override=args.keep_rate
    )
    cfg = train_config_from(config.get("train", {}), args)

    write_idx(train_ds, out / "train.images.idx", out / "train.labels.idx")
    write_idx(test_ds, out / "test.images.idx", out / "test.labels.idx")
    result = train(train_ds, cfg, out_dir=out)

    artifacts = [
        "checkpoint.capsan", "train_log.csv", "manifest.json",
        "train.images.idx", "train.labels.idx", "test.images.idx", "test.labels.idx",
    ]
    write_manifest(out, "train", config, cfg.seed, artifacts)
    print(f"trained {cfg.iterations} iterations "
          f"({len(result.records)} recorded, early_stop={result.stopped_early})")
    print(f"minority class {result.minority_class}: "
          f"emitted {len(result.generated)} generated samples")
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.auto and args.count is not None:
        raise ConfigInvalid("--count and --auto are mutually exclusive")
    if not args.auto and args.count is None:
        raise ConfigInvalid("need either --count N or --auto")
    state = load_run(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    class_id = args.class_id if args.class_id is not None else state.minority_class
    if not 0 <= class_id < state.num_classes:
        raise UnknownClass(
            f"class {class_id} outside [0, {state.num_classes}) for this checkpoint"
        )
    if args.auto:
        phi = args.phi if args.phi is not None else state.train_config.phi
        count = num_to_generate(state.stats, state.train_config.dist_plus, phi)
    else:
        count = int(args.count)
    if count < 0:
        raise ConfigInvalid(f"count must be nonnegative, got {count}")

    rng = np.random.default_rng(args.seed)
    generated = generate_class_samples(
        state.generator, state.gaussian_for(class_id), class_id, count, rng,
        state.train_config.batch_size, state.num_classes,
    )
    write_idx(generated, out / "generated.images.idx", out / "generated.labels.idx")
    pgm_dir = out / "pgm"
    pgm_dir.mkdir(exist_ok=True)
    for i in range(len(generated)):
        write_pgm(pgm_dir / f"sample_{i:05d}.pgm", generated.images[i])
    artifacts = ["generated.images.idx", "generated.labels.idx", "manifest.json"]
    artifacts += [f"pgm/sample_{i:05d}.pgm" for i in range(len(generated))]
    write_manifest(
        out, "generate",
        {"checkpoint": str(args.checkpoint), "class": class_id, "count": count},
        args.seed, artifacts,
    )
    print(f"wrote {count} class-{class_id} samples to {out}")
    return EXIT_OK


def _evaluate_state(state: RunState, test_ds: LabeledDataset, out: Path,
                    args, eval_section: dict) -> tuple[MetricsReport, list[str]]:
    batch = state.train_config.batch_size
    lengths = _collect_lengths(state.discriminator, test_ds.images, batch)
    preds = np.argmax(lengths, axis=-1)
    report = report_for_predictions(
        test_ds.labels, preds, test_ds.num_classes, num_slots=lengths.shape[1]
    )

    artifacts = []
    roc_class = int(eval_section.get("roc_class", state.minority_class))
    points, auc = roc_auc(lengths[:, roc_class], test_ds.labels == roc_class)
    fpr = [p[0] for p in points]
    tpr = [p[1] for p in points]
    write_svg(out / "roc.svg", line_plot(
        [(f"class {roc_class} (AUC {auc:.4f})", fpr, tpr), ("chance", [0, 1], [0, 1])],
        title="ROC", xlabel="false positive rate", ylabel="true positive rate",
        y_range=(0.0, 1.0),
    ))
    artifacts.append("roc.svg")

    per_class = int(eval_section.get("samples_per_class", 32))
    rng = np.random.default_rng(args.seed)
    ssim_score = None
    fid_score = None
    if eval_section.get("ssim", True) or eval_section.get("fid", True):
        sets = [
            generate_class_samples(
                state.generator, state.gaussian_for(c), c, per_class, rng,
                batch, state.num_classes,
            )
            for c in range(state.num_classes)
        ]
        gen_images = np.concatenate([s.images for s in sets], axis=0)
        gen_labels = np.concatenate([s.labels for s in sets])
        if eval_section.get("ssim", True):
            ssim_score = sample_set_variability(gen_images, gen_labels)
        if eval_section.get("fid", True):
            extractor = load_extractor()
            real_min = test_ds.images[test_ds.labels == state.minority_class]
            fake_min = gen_images[gen_labels == state.minority_class]
            fid_score = fid(extractor.features(real_min), extractor.features(fake_min))

    battle = None
    if args.battle:
        other = load_run(args.battle)
        if other.train_config.latent_dim != state.train_config.latent_dim:
            raise ConfigInvalid("battle requires checkpoints with equal latent_dim")

        def sampler_for(st: RunState):
            g = st.gaussian_for(st.minority_class)
            base = as_sampler(st.generator, st.minority_class, batch)
            return lambda eps: base(g.mu + np.sqrt(g.sigma_diag) * eps)

        eps = np.random.default_rng(args.seed + 1).standard_normal(
            (per_class, state.train_config.latent_dim)
        )
        result = battle_ratio(
            as_predictor(state.discriminator, batch), sampler_for(state),
            as_predictor(other.discriminator, batch), sampler_for(other),
            test_ds.images, eps, fake_slot=state.num_classes,
        )
        battle = {
            "r_generated": result.r_generated,
            "r_real": result.r_real,
            "accuracies": {k: float(v) for k, v in result.accuracies.items()},
        }

    report = dataclasses.replace(
        report, auc=auc, ssim_variability=ssim_score, fid=fid_score, battle=battle
    )
    artifacts += write_report_files(out, report)

    log_path = Path(args.train_log) if args.train_log else (
        Path(args.checkpoint).parent / "train_log.csv"
    )
    curve = _loss_curve_svg(log_path)
    if curve is not None:
        write_svg(out / "loss_curves.svg", curve)
        artifacts.append("loss_curves.svg")
    return report, artifacts


def _run_sweep(config: dict, args, out: Path) -> list[str]:
    """Retrain at each keep rate and report metrics on the shared test set."""
    rows = []
    for rate in SWEEP_KEEP_RATES:
        train_ds, test_ds = prepare_splits(config.get("dataset", {}), keep_rate_override=rate)
        cfg = train_config_from(config.get("train", {}), args)
        run_dir = out / f"keep_{rate}"
        run_dir.mkdir(parents=True, exist_ok=True)
        result = train(train_ds, cfg, out_dir=run_dir)
        lengths = _collect_lengths(result.discriminator, test_ds.images, cfg.batch_size)
        preds = np.argmax(lengths, axis=-1)
        report = report_for_predictions(
            test_ds.labels, preds, test_ds.num_classes, num_slots=lengths.shape[1]
        )
        _, auc = roc_auc(
            lengths[:, result.minority_class],
            test_ds.labels == result.minority_class,
        )
        rows.append((rate, report.ba, report.g_mean, report.f_measure, auc))

    lines = ["keep_rate,ba,g_mean,f_measure,auc"]
    lines += [",".join(repr(float(v)) for v in row) for row in rows]
    (out / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    ordered = sorted(rows)
    xs = [r[0] for r in ordered]
    write_svg(out / "sweep.svg", line_plot(
        [
            ("balanced accuracy", xs, [r[1] for r in ordered]),
            ("G-mean", xs, [r[2] for r in ordered]),
            ("macro F", xs, [r[3] for r in ordered]),
        ],
        title="metrics vs imbalance keep rate",
        xlabel="keep rate", ylabel="score", y_range=(0.0, 1.0),
    ))
    return ["sweep.csv", "sweep.svg"]


def cmd_evaluate(args) -> int:
    config = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.sweep:
        artifacts = _run_sweep(config, args, out) + ["manifest.json"]
        write_manifest(out, "evaluate-sweep", config, args.seed, artifacts)
        print(f"sweep over keep rates {SWEEP_KEEP_RATES} done; artifacts in {out}")
        return EXIT_OK

    if not args.checkpoint:
        raise ConfigInvalid("evaluate needs --checkpoint (or --sweep)")
    state = load_run(args.checkpoint)
    _, test_ds = prepare_splits(config.get("dataset", {}))
    if tuple(test_ds.images.shape[1:]) != tuple(state.image_shape):
        raise ConfigInvalid(
            f"test images {test_ds.images.shape[1:]} do not match the "
            f"checkpoint's {state.image_shape}"
        )
    report, artifacts = _evaluate_state(state, test_ds, out, args, config.get("evaluate", {}))
    artifacts = artifacts + ["manifest.json"]
    write_manifest(out, "evaluate", config, args.seed, artifacts)
    print(f"BA {report.ba:.4f}  G-mean {report.g_mean:.4f}  "
          f"F {report.f_measure:.4f}  AUC {report.auc:.4f}")
    print(f"artifacts in {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capsan",
        description="Capsule-discriminator adversarial oversampling toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train on a (possibly imbalanced) dataset")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--keep-rate", type=float, default=None,
                         help="override dataset.imbalance.keep_rate")
    p_train.add_argument("--phi", type=float, default=None)
    p_train.add_argument("--pi", type=float, default=None)
    p_train.add_argument("--timing", action="store_true",
                         help="record real wall times (log bytes stop being reproducible)")
    p_train.set_defaults(func=cmd_train)

    p_gen = sub.add_parser("generate", help="sample a trained generator")
    p_gen.add_argument("--checkpoint", required=True)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--class", dest="class_id", type=int, default=None)
    p_gen.add_argument("--count", type=int, default=None)
    p_gen.add_argument("--auto", action="store_true",
                       help="use the stored class-count gap times phi")
    p_gen.add_argument("--phi", type=float, default=None)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.set_defaults(func=cmd_generate)

    p_eval = sub.add_parser("evaluate", help="report metrics on the held-out set")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--sweep", action="store_true",
                        help="retrain over the standard keep-rate ladder")
    p_eval.add_argument("--battle", default=None,
                        help="second checkpoint for cross-evaluation ratios")
    p_eval.add_argument("--train-log", default=None,
                        help="training CSV for the loss-curve plot")
    p_eval.add_argument("--phi", type=float, default=None)
    p_eval.add_argument("--pi", type=float, default=None)
    p_eval.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _IO_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except _CONFIG_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except CapsanError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as err:  # last resort; still a controlled exit
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
