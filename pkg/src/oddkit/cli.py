"""Command-line entry point: ``oddkit {prepare,train,score,eval}``.

Settings come from an INI-style config file (one section per stage) and are
overridden by command-line flags. The merged configuration is written next to
every run's outputs as ``effective_config.ini``.

Exit codes: 0 success, 2 invalid configuration or input, 3 training failure,
4 missing artifact (checkpoint, patch store).
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import coco, evaluation, models, scoring, trainer
from .errors import ConfigurationError, ExtractionError, OddkitError, TrainingError, ValidationError

log = logging.getLogger("oddkit")

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN, EXIT_MISSING = 0, 2, 3, 4

DEFAULTS = {
    "run": {"seed": "0", "out": "runs/default", "deterministic": "true"},
    "data": {"annotations": "", "images": "", "patches": "", "patch_size": "32", "categories": "",
             "normal_categories": "", "min_mask_area": "16", "split_fraction": "0.85"},
    "model": {"kind": "MemCAE", "latent_dim": "32", "memory_slots": "500", "shrink_lambda": "",
              "shrink_epsilon": "1e-12", "entropy_alpha": "0.0002"},
    "train": {"steps": "1000", "batch_size": "32", "learning_rate": "0.001", "adam_beta1": "0.9",
              "adam_beta2": "0.999", "adam_epsilon": "1e-8", "validate_every": "100",
              "checkpoint_every": "0", "train_on": "normal"},
    "augment": {"enabled": "true", "max_rotation_deg": "5.0", "max_shift_frac": "0.01",
                "max_brightness_frac": "0.10", "zoom_min": "1.0", "zoom_max": "1.25",
                "horizontal_flip": "true", "flip_prob": "0.5"},
    "score": {"gamma": "0.9", "alpha": "", "topk": "5"},
    "eval": {"normal_categories": "", "budget": "5000"},
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- configuration

def load_config(path: str | None, overrides: dict[str, str]) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser(interpolation=None)
    cfg.read_dict(DEFAULTS)
    if path:
        if not Path(path).is_file():
            raise CliError(f"config file not found: {path}", EXIT_CONFIG)
        cfg.read(path)
    for dotted, value in overrides.items():
        section, _, key = dotted.partition(".")
        if not key:
            raise CliError(f"override {dotted!r} must look like section.key", EXIT_CONFIG)
        if not cfg.has_section(section):
            cfg.add_section(section)
        cfg.set(section, key, value)
    return cfg


def write_effective(cfg: configparser.ConfigParser, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "effective_config.ini"
    with open(path, "w") as fh:
        cfg.write(fh)
    return path


def _getfloat_opt(cfg, section, key):
    raw = cfg.get(section, key).strip()
    return None if raw == "" else float(raw)


def _names(cfg, section, key) -> list[str]:
    return [s.strip() for s in cfg.get(section, key).split(",") if s.strip()]


def descriptor_from(cfg) -> models.ArchitectureDescriptor:
    return models.ArchitectureDescriptor(
        kind=cfg.get("model", "kind"),
        patch_size=cfg.getint("data", "patch_size"),
        latent_dim=cfg.getint("model", "latent_dim"),
        memory_slots=cfg.getint("model", "memory_slots"),
        shrink_lambda=_getfloat_opt(cfg, "model", "shrink_lambda"),
        shrink_epsilon=cfg.getfloat("model", "shrink_epsilon"),
        entropy_alpha=cfg.getfloat("model", "entropy_alpha"),
    )


def train_config_from(cfg) -> trainer.TrainConfig:
    t = cfg["train"]
    return trainer.TrainConfig(
        steps=t.getint("steps"), batch_size=t.getint("batch_size"), learning_rate=t.getfloat("learning_rate"),
        adam_beta1=t.getfloat("adam_beta1"), adam_beta2=t.getfloat("adam_beta2"),
        adam_epsilon=t.getfloat("adam_epsilon"), seed=cfg.getint("run", "seed"),
        validate_every=t.getint("validate_every"), checkpoint_every=t.getint("checkpoint_every"),
        deterministic=cfg.getboolean("run", "deterministic"),
    )


def policy_from(cfg) -> coco.AugmentationPolicy | None:
    a = cfg["augment"]
    if not a.getboolean("enabled"):
        return None
    return coco.AugmentationPolicy(
        max_rotation_deg=a.getfloat("max_rotation_deg"), max_shift_frac=a.getfloat("max_shift_frac"),
        max_brightness_frac=a.getfloat("max_brightness_frac"),
        zoom_range=(a.getfloat("zoom_min"), a.getfloat("zoom_max")),
        horizontal_flip=a.getboolean("horizontal_flip"), seed=cfg.getint("run", "seed"),
        flip_prob=a.getfloat("flip_prob"),
    )


def _out_dir(cfg) -> Path:
    return Path(cfg.get("run", "out"))


def _patch_dir(cfg) -> Path:
    raw = cfg.get("data", "patches").strip()
    return Path(raw) if raw else _out_dir(cfg) / "patches"


def _load_patches(cfg) -> list[coco.ObjectPatch]:
    path = _patch_dir(cfg)
    if not (path / coco.MANIFEST_NAME).is_file():
        raise CliError(f"patch store not found: {path} (run 'prepare' first)", EXIT_MISSING)
    patches = coco.load_patch_store(path)
    if not patches:
        raise CliError(f"patch store {path} is empty", EXIT_CONFIG)
    return patches


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ODDKIT_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------- subcommands

def cmd_prepare(cfg) -> int:
    ann_path = Path(cfg.get("data", "annotations"))
    if not ann_path.is_file():
        raise CliError(f"annotation file not found: {ann_path}", EXIT_CONFIG)
    image_dir = Path(cfg.get("data", "images") or ann_path.parent)
    index = coco.load_coco(ann_path.read_bytes())
    keep = {index.category_id(n) for n in _names(cfg, "data", "categories")}
    normal = {index.category_id(n) for n in _names(cfg, "data", "normal_categories")}
    size = cfg.getint("data", "patch_size")
    min_area = cfg.getint("data", "min_mask_area")

    patches, skipped = [], 0
    by_image: dict[int, list[coco.AnnotationRecord]] = {}
    for rec in index.records:
        if not keep or rec.category_id in keep:
            by_image.setdefault(rec.image_id, []).append(rec)
    for image_id in sorted(by_image):
        info = index.images[image_id]
        img_path = image_dir / info.file_name
        if not img_path.is_file():
            raise CliError(f"image file not found: {img_path}", EXIT_CONFIG)
        image = coco.load_image(img_path)
        for rec in by_image[image_id]:
            label = coco.UNLABELED if not normal else (coco.NORMAL if rec.category_id in normal else coco.ANOMALY)
            try:
                patches.append(coco.extract_patch(image, rec, size, label=label, min_area=min_area))
            except ExtractionError as exc:
                skipped += 1
                log.info("skipping: %s", exc)

    out = _patch_dir(cfg)
    coco.save_patch_store(patches, out)
    write_effective(cfg, _out_dir(cfg))
    counts = Counter(p.category_id for p in patches)
    for cid in sorted(counts):
        print(f"{index.categories.get(cid, cid)}\t{counts[cid]}")
    print(f"{len(patches)} patches written to {out} ({skipped} skipped)")
    return EXIT_OK


def cmd_train(cfg, resume: str | None = None) -> int:
    patches = _load_patches(cfg)
    if cfg.get("train", "train_on") == "normal":
        patches = [p for p in patches if p.label != coco.ANOMALY]
    split = coco.make_split(patches, cfg.getfloat("data", "split_fraction"), cfg.getint("run", "seed"))
    tcfg = train_config_from(cfg)
    out = _out_dir(cfg)
    write_effective(cfg, out)
    if resume:
        if not Path(resume).is_file():
            raise CliError(f"checkpoint not found: {resume}", EXIT_MISSING)
        model, state, _ = trainer.load_checkpoint(resume)
        metric_log = trainer.MetricLog.read_csv(out / "metrics.csv") if (out / "metrics.csv").is_file() else None
    else:
        model, state, metric_log = models.build(descriptor_from(cfg), cfg.getint("run", "seed")), None, None
    try:
        result = trainer.train(model, split, policy_from(cfg), tcfg, out, state, metric_log)
    except TrainingError as exc:
        raise CliError(str(exc), EXIT_TRAIN) from None
    result.log.write_plot_data(out / "loss_curve.dat")
    last = result.log.records[-1]
    print(f"{model.kind}: {len(result.log)} steps, final train loss {last.train_loss:.6g}, "
          f"val recon {last.val_recon if last.val_recon is not None else float('nan'):.6g}")
    print(f"checkpoint: {result.checkpoints[-1]}")
    return EXIT_OK


def _load_checkpoint(path: str) -> models.ModelBundle:
    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}", EXIT_MISSING)
    model, _, _ = models.load_bundle(path)
    return model


def cmd_score(cfg, checkpoint: str) -> int:
    model = _load_checkpoint(checkpoint)
    patches = _load_patches(cfg)
    gamma = cfg.getfloat("score", "gamma")
    report = scoring.detect(model, patches, gamma, _getfloat_opt(cfg, "score", "alpha"), Path(checkpoint).stem)
    out = _out_dir(cfg)
    write_effective(cfg, out)
    scoring.write_report_csv(report, out / "scores.csv")

    k = min(cfg.getint("score", "topk"), len(patches))
    top, bottom = scoring.rank_extremes(report, k)
    by_id = {p.patch_id: p for p in patches}
    for name, group in (("most_anomalous", top), ("most_normal", bottom)):
        folder = out / name
        folder.mkdir(parents=True, exist_ok=True)
        for old in folder.glob("*.png"):
            old.unlink()
        for rank, s in enumerate(group, start=1):
            scoring.contact_sheet([by_id[s.patch_id].pixels], folder / f"{rank:02d}_{s.normalized_score:.6f}_{s.patch_id}.png")
        if group:
            scoring.contact_sheet([by_id[s.patch_id].pixels for s in group], out / f"{name}.png")
    print(f"{len(report.flagged)} of {len(report.samples)} patches flagged at gamma={gamma}")
    for s in top:
        print(f"  anomalous  {s.patch_id}  raw={s.raw_error:.6g}  score={s.normalized_score:.4f}")
    for s in bottom:
        print(f"  normal     {s.patch_id}  raw={s.raw_error:.6g}  score={s.normalized_score:.4f}")
    return EXIT_OK


def cmd_eval(cfg, checkpoints: list[str]) -> int:
    if not checkpoints:
        raise CliError("eval needs at least one checkpoint", EXIT_CONFIG)
    bundles = [_load_checkpoint(c) for c in checkpoints]
    patches = _load_patches(cfg)
    normal = {p.category_id for p in patches if p.label == coco.NORMAL}
    normal |= {int(c) for c in _names(cfg, "eval", "normal_categories")}
    eval_set = evaluation.build_eval_set(patches, normal, cfg.getint("eval", "budget"), cfg.getint("run", "seed"))
    # "final.odk" files are named after their run directory
    names = [Path(c).parent.name if Path(c).stem == "final" else Path(c).stem for c in checkpoints]
    alpha = _getfloat_opt(cfg, "score", "alpha")
    threads = 1 if cfg.getboolean("run", "deterministic") else _threads()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda nb: evaluation.compare_models([nb[1]], eval_set, [nb[0]], alpha),
                                  zip(names, bundles)))
        rows = [r for part in parts for r in part]
    else:
        rows = evaluation.compare_models(bundles, eval_set, names, alpha)
    out = _out_dir(cfg)
    write_effective(cfg, out)
    table = evaluation.format_table(rows, evaluation.REFERENCE_AUC)
    header = (f"# evaluation set: {len(eval_set.samples)} samples, anomaly ratio {eval_set.anomaly_ratio:.4f}, "
              f"seed {eval_set.seed}\n# reference column: published single-class AUC x 100 (not reproduced here)\n")
    (out / "auc_table.txt").write_text(header + table + "\n")
    evaluation.write_table_csv(rows, out / "auc_table.csv")
    for i, r in enumerate(rows, start=1):
        evaluation.write_roc_csv(r.roc, out / f"roc_{i:02d}_{r.model_id}.csv")
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--deterministic", action="store_true", default=None,
                        help="serial execution and reproducible outputs")
    common.add_argument("--gamma", type=float, help="normalized-score threshold")
    common.add_argument("--alpha", type=float, help="entropy weight used in MemCAE scores")
    common.add_argument("--topk", type=int, help="number of extreme patches to export")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config value")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="oddkit", description="Masked-object anomaly detection with autoencoders.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="extract masked object patches")
    p = sub.add_parser("train", parents=[common], help="train an autoencoder")
    p.add_argument("--resume", help="continue from a training checkpoint")
    p = sub.add_parser("score", parents=[common], help="score patches and rank extremes")
    p.add_argument("checkpoint")
    p = sub.add_parser("eval", parents=[common], help="compare models by ROC AUC")
    p.add_argument("checkpoints", nargs="+")
    return parser


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"--set expects SECTION.KEY=VALUE, got {item!r}", EXIT_CONFIG)
        out[key.strip()] = value.strip()
    flags = {"run.seed": args.seed, "score.gamma": args.gamma, "score.alpha": args.alpha,
             "score.topk": args.topk, "run.out": args.out}
    out.update({k: str(v) for k, v in flags.items() if v is not None})
    if args.deterministic:
        out["run.deterministic"] = "true"
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.resume)
        if args.command == "score":
            return cmd_score(cfg, args.checkpoint)
        return cmd_eval(cfg, args.checkpoints)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (ValidationError, ConfigurationError, OddkitError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
