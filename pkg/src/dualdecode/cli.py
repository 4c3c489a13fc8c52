"""Command-line entry point: ``dualdecode {synth,pretrain,train,eval,attribute,baselines}``.

Each command writes a fresh run directory under ``--out`` holding the
config echo, CSV logs, outputs and ``summary.json``. File contents are a
function of config and seed only; the wall clock appears solely in the run
directory's name.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .attribution import aggregate_fingerprint, write_fingerprint
from .autograd.io import load_tensor
from .baselines import (
    LeastSquaresSubjectClassifier,
    LinearSoftmaxSubjectClassifier,
    SphericalKMeans,
    align_clusters,
)
from .config import RunConfig, load_config
from .decoder import HISTORY_FIELDS, DualDecoder
from .exceptions import CheckpointError, ConfigError, DataError, DualDecodeError, NumericalError
from .mae import MaskedAutoencoder
from .metrics import EvalReport, accuracy, evaluate, matthews_corrcoef, roc_auc
from .preprocess import Preprocessor
from .synth import generate_dataset, read_dataset_dir, write_dataset

logger = logging.getLogger("dualdecode")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def make_run_dir(out: str | Path, command: str) -> Path:
    """New ``<out>/<command>-<timestamp>[-k]`` directory; existing runs are never reused."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = out / f"{command}-{stamp}"
    run, k = base, 1
    while True:
        try:
            run.mkdir()
            return run
        except FileExistsError:
            k += 1
            run = Path(f"{base}-{k}")


def _dataset_root(path: str | Path) -> Path:
    p = Path(path)
    for cand in (p, p / "dataset"):
        if (cand / "meta.json").exists():
            return cand
    raise FileNotFoundError(f"no dataset (meta.json) found at {p}")


def _checkpoint_root(path: str | Path, marker: str) -> Path:
    p = Path(path)
    for cand in (p, p / "checkpoint"):
        if (cand / marker).exists():
            return cand
    raise FileNotFoundError(f"checkpoint file {marker} not found under {p}")


def _prepare(dataset: Path, pre: Preprocessor | None = None, patch_size: int = 16,
             target_length=None):
    train, test, vision, meta = read_dataset_dir(dataset)
    if not train:
        raise DataError(f"dataset {dataset} has no training records")
    if pre is None:
        pre = Preprocessor(patch_size, target_length).fit(train)
    return pre, pre.transform(train, vision), pre.transform(test, vision) if test else None, meta


# ------------------------------------------------------------------ commands

def cmd_synth(cfg: RunConfig, run: Path, args) -> dict:
    ds = generate_dataset(cfg.generator_config())
    write_dataset(run / "dataset", ds)
    summary = {"num_subjects": ds.config.num_subjects, "num_classes": ds.config.num_classes,
               "train_records": len(ds.train), "test_records": len(ds.test),
               "lengths": list(ds.ground_truth.lengths), "dataset": "dataset"}
    print(f"synth: {summary['num_subjects']} subjects, {summary['num_classes']} classes, "
          f"{summary['train_records']} train / {summary['test_records']} test records")
    return summary


def _mae_from(cfg: RunConfig) -> MaskedAutoencoder:
    s = cfg.section("stage1")
    return MaskedAutoencoder(patch_size=cfg["preprocess.patch_size"], random_state=cfg.seed, **s)


def cmd_pretrain(cfg: RunConfig, run: Path, args) -> dict:
    dataset = _dataset_root(args.dataset)
    pre, tr, _, _ = _prepare(dataset, None, cfg["preprocess.patch_size"], cfg["preprocess.target_length"])
    mae = _mae_from(cfg).fit(tr.X)
    ckpt = run / "checkpoint"
    ckpt.mkdir()
    pre.save(ckpt)
    mae.save(ckpt)
    _write_csv(run / "stage1_log.csv", ["epoch", "train_loss", "eval_loss"], mae.history_)
    first, last = mae.history_[0][2], mae.history_[-1][2]
    print(f"pretrain: masked MSE {first:.4f} -> {last:.4f} over {len(mae.history_) - 1} epochs")
    return {"initial_eval_mse": first, "final_eval_mse": last, "checkpoint": "checkpoint"}


def cmd_train(cfg: RunConfig, run: Path, args) -> dict:
    dataset = _dataset_root(args.dataset)
    stage1 = _checkpoint_root(args.stage1, "encoder.json")
    pre = Preprocessor.load(stage1)
    mae = MaskedAutoencoder.load(stage1)
    _, tr, te, _ = _prepare(dataset, pre)
    s = cfg.section("stage2")
    retract = s.pop("retract_basis")
    dd = DualDecoder(mae, random_state=cfg.seed, **s)
    eval_set = None if te is None else (te.X, te.subjects, te.labels, te.vision)
    dd.fit(tr.X, tr.subjects, tr.labels, tr.vision, eval_set=eval_set)
    orth_before = dd.basis_.orthonormality_error()
    if retract:
        dd.retract_basis()
    ckpt = run / "checkpoint"
    ckpt.mkdir()
    pre.save(ckpt)
    dd.save(ckpt)
    _write_csv(run / "stage2_log.csv", HISTORY_FIELDS,
               ([h[k] for k in HISTORY_FIELDS] for h in dd.history_))
    last = dd.history_[-1]
    print(f"train: val ACC {last['val_ACC']:.4f}, val mAP {last['val_mAP']:.4f}, "
          f"|BB^T - I|_F {orth_before:.3e}")
    return {"orthonormality_error": orth_before,
            "orthonormality_error_final": dd.basis_.orthonormality_error(),
            "retracted": bool(retract), "final_epoch": last, "checkpoint": "checkpoint"}


def _load_model(path) -> tuple[Preprocessor, DualDecoder, Path]:
    root = _checkpoint_root(path, "stage2.json")
    return Preprocessor.load(root), DualDecoder.load(root), root


def cmd_eval(cfg: RunConfig, run: Path, args) -> dict:
    pre, dd, _ = _load_model(args.checkpoint)
    _, _, te, _ = _prepare(_dataset_root(args.dataset), pre)
    if te is None:
        raise DataError("dataset has no test records to evaluate")
    subj, obj = dd.decision_function(te.X, te.vision)
    prob = 1.0 / (1.0 + np.exp(-obj))
    rep = evaluate(te.subjects, subj.argmax(axis=1), dd.config_.num_subjects, prob, te.labels,
                   threshold=cfg["eval.threshold"])
    if cfg["eval.auc_average"] != "macro":
        rep.AUC = roc_auc(prob, te.labels, average=cfg["eval.auc_average"])[0]
    rep.to_json(run / "report.json")
    rep.per_class_csv(run / "per_class_ap.csv")
    print(f"eval: ACC {rep.ACC:.4f} MCC {rep.MCC:.4f} mAP {rep.mAP:.4f} AUC {rep.AUC:.4f} "
          f"Hamming {rep.Hamming:.4f}")
    return {"report": "report.json", "ACC": rep.ACC, "MCC": rep.MCC, "mAP": rep.mAP,
            "AUC": rep.AUC, "Hamming": rep.Hamming, "auc_average": cfg["eval.auc_average"]}


def cmd_attribute(cfg: RunConfig, run: Path, args) -> dict:
    pre, dd, _ = _load_model(args.checkpoint)
    _, _, te, _ = _prepare(_dataset_root(args.dataset), pre)
    if te is None:
        raise DataError("dataset has no test records to attribute")
    a = cfg.section("attribute")
    class_id = a["class_id"] if args.class_id is None else args.class_id
    subject_id = a["subject_id"] if args.subject_id is None else args.subject_id
    if subject_id not in pre.lengths_:
        raise DataError(f"subject {subject_id} is not present in the dataset")
    if not 0 <= class_id < dd.config_.num_classes:
        raise ConfigError(f"class id {class_id} outside [0, {dd.config_.num_classes})")
    plan = pre.plan_for_subject(subject_id)
    amap = aggregate_fingerprint(dd, te, class_id, subject_id, plan, a["statistic"],
                                 a["residual"], a["threshold"])
    roi = None
    if args.roi_labels is not None:
        roi_path = Path(args.roi_labels)
        if not roi_path.exists():
            raise FileNotFoundError(f"ROI label file not found: {roi_path}")
        roi = load_tensor(roi_path).astype(np.int64)
        if roi.shape != (plan.source_length,):
            raise DataError(f"ROI labels have shape {roi.shape}, expected ({plan.source_length},)")
    meta = write_fingerprint(run, amap, roi, a["threshold"], a["residual"])
    if amap.is_empty:
        print(f"attribute: EMPTY - no true positives for class {class_id}, subject {subject_id}")
    else:
        print(f"attribute: class {class_id}, subject {subject_id}, {amap.sample_count} samples")
    return {**meta, "fingerprint": "fingerprint.csv"}


def cmd_baselines(cfg: RunConfig, run: Path, args) -> dict:
    b = cfg.section("baselines")
    _, tr, te, meta = _prepare(_dataset_root(args.dataset), None, cfg["preprocess.patch_size"],
                               cfg["preprocess.target_length"])
    if te is None:
        raise DataError("dataset has no test records")
    K = int(meta["num_subjects"])
    reports: dict[str, dict] = {}
    for metric in ("euclidean", "cosine"):
        km = SphericalKMeans(K, metric=metric, n_init=b["kmeans_restarts"],
                             max_iter=b["kmeans_max_iter"], tol=b["kmeans_tol"],
                             random_state=cfg.seed).fit(te.X)
        aligned = align_clusters(te.subjects, km.labels_, K)
        reports[f"kmeans_{metric}"] = {"ACC": accuracy(te.subjects, aligned),
                                       "MCC": matthews_corrcoef(aligned, te.subjects, K)}
    for name, est in (("least_squares", LeastSquaresSubjectClassifier(b["ridge"])),
                      ("cross_entropy", LinearSoftmaxSubjectClassifier(
                          b["linear_epochs"], b["linear_lr"], random_state=cfg.seed))):
        pred = est.fit(tr.X, tr.subjects).predict(te.X)
        rep = EvalReport(ACC=accuracy(te.subjects, pred), MCC=matthews_corrcoef(pred, te.subjects, K))
        reports[name] = {"ACC": rep.ACC, "MCC": rep.MCC}
    _write_json(run / "baselines.json", reports)
    _write_csv(run / "baselines.csv", ["baseline", "ACC", "MCC"],
               ([k, v["ACC"], v["MCC"]] for k, v in reports.items()))
    print("baselines: " + ", ".join(f"{k} ACC {v['ACC']:.3f}" for k, v in reports.items()))
    return {"baselines": reports}


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "attribute": cmd_attribute,
    "baselines": cmd_baselines,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualdecode", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat section.key = value config file")
        p.add_argument("--seed", type=int, help="global seed (overrides run.seed)")
        p.add_argument("--out", default="runs", help="parent directory for run directories")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("pretrain", "train", "eval", "attribute", "baselines"):
            p.add_argument("--dataset", required=True, help="dataset directory (from synth)")
        if name == "train":
            p.add_argument("--stage1", required=True, help="pretrain run or checkpoint directory")
        if name in ("eval", "attribute"):
            p.add_argument("--checkpoint", required=True, help="train run or checkpoint directory")
        if name == "attribute":
            p.add_argument("--class-id", type=int)
            p.add_argument("--subject-id", type=int)
            p.add_argument("--roi-labels", help="MKT1 integer vector of ROI labels per voxel")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (UsageError, ConfigError)):
        return EXIT_CONFIG
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, (DataError, CheckpointError, FileNotFoundError, DualDecodeError)):
        return EXIT_DATA
    raise exc


def main(argv: list[str] | None = None) -> int:
    run = None
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s %(levelname)s %(message)s")
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be a non-negative integer")
            cfg.set("run.seed", args.seed)
        run = make_run_dir(args.out, args.command)
        (run / "config.txt").write_text(cfg.source_text, encoding="utf-8")
        (run / "resolved_config.txt").write_text(cfg.dumps(), encoding="utf-8")
        summary = COMMANDS[args.command](cfg, run, args)
        _write_json(run / "summary.json", {"command": args.command, "seed": cfg.seed,
                                           "status": "ok", "exit_code": EXIT_OK, **summary})
        print(f"run directory: {run}")
        return EXIT_OK
    except Exception as exc:  # mapped to documented exit codes below
        code = _exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        if run is not None:
            _write_json(run / "summary.json", {"status": "error", "exit_code": code,
                                               "message": str(exc)})
        return code


if __name__ == "__main__":
    sys.exit(main())
