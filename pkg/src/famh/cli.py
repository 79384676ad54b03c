"""Command-line entry point: ``famh <subcommand> [--config c.json] [--set key=value ...]``.

Directory layout (all configurable under ``paths``)::

    raw_dir/   <id>.famh or <id>.csv, optional <id>.labels.csv     (synth writes here)
    data_dir/  calibrated 30 Hz <id>.famh, <id>.labels.csv,
               index.json, exclusions.json                         (preprocess)
    out_dir/   pretrain.famc, pretrain_log.csv, finetune.famc,
               finetune_metrics.json, metrics.json, confusion.csv,
               embeddings.csv, pca.csv

Every JSON output carries a ``config_digest`` field and every CSV output starts
with a ``# config_digest: <hex>`` comment line.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from famh import atomic
from famh.config import RunConfig, load_config
from famh.errors import ConfigError, DataError, FamhError, MissingRecording
from famh.ingest.batching import RecordingStore
from famh.ingest.recording import (
    LabelTrack,
    Recording30,
    intervals_to_track,
    load_labels_csv,
    load_recording_bin,
    load_recording_csv,
    save_labels_csv,
    save_recording_bin,
    track_to_intervals,
)
from famh.ingest.synthetic import desk_config, generate_synthetic, activity_classes_config
from famh.metrics import export_embeddings, metrics_dict, pca_project
from famh.model import MaskedAutoencoder
from famh.preprocess import preprocess_recording
from famh.training.checkpoint import load_checkpoint, load_into_model, save_checkpoint
from famh.training.loops import (
    LOG_COLUMNS,
    FinetuneSettings,
    PretrainSettings,
    collect_features,
    finetune,
    pretrain,
    pretrain_params,
    probe_metrics,
    split_ids,
    subset_ids,
)

log = logging.getLogger("famh")

LABEL_SUFFIX = ".labels.csv"


# -- small file helpers -------------------------------------------------------

def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def write_json(path: Path, doc: dict, cfg: RunConfig) -> None:
    doc = {"config_digest": cfg.digest_hex, **doc}
    atomic.write_text(path, json.dumps(_json_safe(doc), indent=2) + "\n")


def write_csv(path: Path, header: list[str], rows, cfg: RunConfig, comments: tuple[str, ...] = ()) -> None:
    buf = io.StringIO()
    buf.write(f"# config_digest: {cfg.digest_hex}\n")
    for line in comments:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    atomic.write_text(path, buf.getvalue())


def read_csv_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _raw_files(raw_dir: Path) -> dict[str, Path]:
    if not raw_dir.is_dir():
        raise MissingRecording(f"input directory {raw_dir} does not exist")
    found: dict[str, Path] = {}
    for p in sorted(raw_dir.iterdir()):
        if p.name.endswith(LABEL_SUFFIX) or p.name.startswith("."):
            continue
        if p.suffix in (".famh", ".csv"):
            rid = p.name[: -len(p.suffix)]
            if rid in found:
                raise DataError(f"recording {rid} present in more than one format")
            found[rid] = p
    return found


def load_store(data_dir: Path) -> tuple[RecordingStore, dict]:
    index_path = data_dir / "index.json"
    if not index_path.exists():
        raise MissingRecording(f"{index_path} not found; run preprocess first")
    index = json.loads(index_path.read_text())
    store = RecordingStore()
    for rid, entry in sorted(index["recordings"].items()):
        raw = load_recording_bin(data_dir / f"{rid}.famh", rid)
        segments = [tuple(s) for s in entry["wear_segments"]]
        store.add(Recording30(rid, raw.samples, segments, raw.sample_rate_hz))
    return store, index


def load_labels(data_dir: Path, store: RecordingStore, class_names) -> dict[str, LabelTrack]:
    labels = {}
    for rid in store:
        path = data_dir / f"{rid}{LABEL_SUFFIX}"
        if path.exists():
            rec = store[rid]
            labels[rid] = intervals_to_track(load_labels_csv(path), len(rec.samples),
                                             rec.sample_rate_hz, class_names)
    return labels


def build_model(cfg: RunConfig) -> MaskedAutoencoder:
    return MaskedAutoencoder(cfg.model, seed=cfg.seeds.init)


def _check_digest(ckpt, cfg: RunConfig, path) -> None:
    if ckpt.digest != cfg.digest:
        log.warning("%s was written under config %016x, current config is %s",
                    path, ckpt.digest, cfg.digest_hex)


def finetune_split(cfg: RunConfig, labelled: list[str]) -> tuple[list[str], list[str]]:
    train, val = split_ids(labelled, cfg.finetune.val_fraction, cfg.seeds.split)
    return subset_ids(train, cfg.finetune.data_fraction, cfg.seeds.split), val


# -- subcommands ----------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> None:
    out = Path(args.out or cfg.paths.raw_dir)
    s = cfg.synth
    make = desk_config if s.preset == "desk" else activity_classes_config
    manifest = {}
    for i in range(s.n_recordings):
        rid = f"syn{i:03d}"
        raw, track = generate_synthetic(make(cfg.seeds.synth * 100003 + i), s.duration_h * 3600.0,
                                        s.rate_hz, rid)
        with atomic.atomic_path(out / f"{rid}.famh") as tmp:
            save_recording_bin(raw, tmp)
        with atomic.atomic_path(out / f"{rid}{LABEL_SUFFIX}") as tmp:
            save_labels_csv(track_to_intervals(track, s.rate_hz), tmp)
        manifest[rid] = {"samples": len(raw.samples), "sample_rate_hz": s.rate_hz}
        log.info("synth %s: %d samples", rid, len(raw.samples))
    write_json(out / "manifest.json", {"preset": s.preset, "class_names": list(cfg.class_names),
                                       "recordings": manifest}, cfg)


def cmd_preprocess(cfg: RunConfig, args) -> None:
    src = Path(args.input or cfg.paths.raw_dir)
    out = Path(args.out or cfg.paths.data_dir)
    files = _raw_files(src)
    if not files:
        raise MissingRecording(f"no recordings found in {src}")
    index, excluded = {}, {}
    for rid, path in files.items():
        raw = load_recording_csv(path, rid) if path.suffix == ".csv" else load_recording_bin(path, rid)
        outcome = preprocess_recording(raw, cfg.preprocess)
        if outcome.recording is None:
            excluded[rid] = {"reason": outcome.excluded, "detail": outcome.detail}
            continue
        rec, cal = outcome.recording, outcome.calibration
        with atomic.atomic_path(out / f"{rid}.famh") as tmp:
            save_recording_bin(rec, tmp)
        labels = src / f"{rid}{LABEL_SUFFIX}"
        if labels.exists():
            with atomic.atomic_path(out / f"{rid}{LABEL_SUFFIX}") as tmp:
                save_labels_csv(load_labels_csv(labels), tmp)
        index[rid] = {
            "samples": len(rec.samples),
            "wear_segments": [list(s) for s in rec.wear_segments],
            "calibration": {"gain": cal.gain.tolist(), "offset": cal.offset.tolist(),
                            "iterations": cal.iterations, "residual": cal.residual},
        }
        log.info("preprocess %s: %d segments", rid, len(rec.wear_segments))
    counts = {"calibration_failed": 0, "insufficient_wear": 0}
    for e in excluded.values():
        counts[e["reason"]] += 1
    write_json(out / "exclusions.json", {"counts": counts, "recordings": excluded}, cfg)
    write_json(out / "index.json", {"sample_rate_hz": cfg.preprocess.target_rate_hz, "recordings": index}, cfg)
    if not index:
        raise DataError(f"all {len(files)} recordings were excluded")


def cmd_pretrain(cfg: RunConfig, args) -> None:
    out = Path(cfg.paths.out_dir)
    store, _ = load_store(Path(cfg.paths.data_dir))
    ids = sorted(store)
    train, val = split_ids(ids, cfg.pretrain.val_fraction, cfg.seeds.split)
    train = subset_ids(train, cfg.pretrain.data_fraction, cfg.seeds.split)
    model = build_model(cfg)
    settings = PretrainSettings(
        geom=cfg.windows, spectral=cfg.spectral, weights=cfg.loss, schedule=cfg.schedule,
        epochs=cfg.pretrain.epochs, mask_seed=cfg.seeds.mask, window_seed=cfg.seeds.window,
        workers=cfg.workers, val_batch=cfg.pretrain.val_batch,
    )
    ckpt_path = out / "pretrain.famc"
    log_path = out / "pretrain_log.csv"
    resume = None
    rows: list[list] = []
    if args.resume:
        resume = load_checkpoint(args.resume)
        _check_digest(resume, cfg, args.resume)
        done = int(resume.meta("epoch", 0))
        if log_path.exists():
            rows = [[int(r["epoch"])] + [float(r[c]) for c in LOG_COLUMNS[1:]]
                    for r in read_csv_rows(log_path) if int(r["epoch"]) <= done]
    params = pretrain_params(model)

    def save(path, epoch, step, adam):
        state = dict(adam.state_tensors())
        state["meta.epoch"] = torch.tensor(float(epoch))
        state["meta.step"] = torch.tensor(float(step))
        save_checkpoint(path, params, state, cfg.digest)

    def on_epoch(epoch, step, adam, row):
        rows.append([row[c] for c in LOG_COLUMNS])
        save(ckpt_path, epoch, step, adam)
        write_csv(log_path, list(LOG_COLUMNS), rows, cfg)

    def on_abort(epoch, step, adam):
        save(out / "pretrain_abort.famc", epoch, step, adam)
        log.error("non-finite gradient; state written to %s", out / "pretrain_abort.famc")

    pretrain(model, store, train, val, settings, resume, on_epoch, on_abort)
    if not rows:
        write_csv(log_path, list(LOG_COLUMNS), rows, cfg)


def _model_from_checkpoint(cfg: RunConfig, path) -> MaskedAutoencoder:
    ckpt = load_checkpoint(path)
    _check_digest(ckpt, cfg, path)
    model = build_model(cfg)
    load_into_model(model, ckpt.params, strict=False)
    return model


def _labelled(cfg: RunConfig):
    data_dir = Path(cfg.paths.data_dir)
    store, _ = load_store(data_dir)
    labels = load_labels(data_dir, store, cfg.class_names)
    if not labels:
        raise DataError(f"no label files in {data_dir}")
    return store, labels


def cmd_finetune(cfg: RunConfig, args) -> None:
    out = Path(cfg.paths.out_dir)
    model = _model_from_checkpoint(cfg, args.checkpoint or out / "pretrain.famc")
    store, labels = _labelled(cfg)
    train, val = finetune_split(cfg, sorted(labels))
    settings = FinetuneSettings(geom=cfg.windows, epochs=cfg.finetune.epochs, lr=cfg.finetune.lr,
                                batch_windows=cfg.finetune.batch_windows, seed=cfg.seeds.split)
    result = finetune(model, store, labels, train, val, settings)
    save_checkpoint(out / "finetune.famc", dict(model.named_parameters()), {}, cfg.digest)
    write_json(out / "finetune_metrics.json", {
        "train_ids": train, "val_ids": val,
        "class_names": list(cfg.class_names),
        "class_weights": result.class_weights,
        "epochs": result.log,
    }, cfg)


def cmd_evaluate(cfg: RunConfig, args) -> None:
    out = Path(cfg.paths.out_dir)
    model = _model_from_checkpoint(cfg, args.checkpoint or out / "finetune.famc")
    store, labels = _labelled(cfg)
    train, val = finetune_split(cfg, sorted(labels))
    ids = {"val": val, "train": train, "all": sorted(labels)}[args.split]
    feats, y = collect_features(model, store, labels, ids, cfg.windows, overlapping=False)
    m = probe_metrics(model, feats, y)
    if m["confusion"].sum() == 0:
        raise DataError("no labelled patches in the evaluation split")
    doc = metrics_dict(m["confusion"])
    write_json(out / "metrics.json", {**doc, "split": args.split, "ids": ids,
                                      "class_names": list(cfg.class_names)}, cfg)
    names = list(cfg.class_names)
    write_csv(out / "confusion.csv", ["true\\pred"] + names,
              [[names[i]] + row for i, row in enumerate(doc["confusion"])], cfg)
    print(json.dumps({"balanced_accuracy": doc["balanced_accuracy"], "kappa": doc["kappa"]}))


def cmd_embed(cfg: RunConfig, args) -> None:
    out = Path(cfg.paths.out_dir)
    path = args.checkpoint
    if path is None:
        path = out / "finetune.famc"
        if not path.exists():
            path = out / "pretrain.famc"
    model = _model_from_checkpoint(cfg, path)
    data_dir = Path(cfg.paths.data_dir)
    store, _ = load_store(data_dir)
    labels = load_labels(data_dir, store, cfg.class_names)
    emb = export_embeddings(model, store, labels, sorted(store), cfg.windows)
    names = list(cfg.class_names) + ["missing"]
    d = emb.vectors.shape[1]
    write_csv(out / "embeddings.csv", ["label"] + [f"e{i}" for i in range(d)],
              ([names[l]] + v.tolist() for v, l in zip(emb.vectors, emb.labels)), cfg)
    proj, ratios = pca_project(emb.vectors, args.components)
    write_csv(out / "pca.csv", ["label"] + [f"pc{i + 1}" for i in range(proj.shape[1])],
              ([names[l]] + v.tolist() for v, l in zip(proj, emb.labels)), cfg,
              comments=("explained_variance_ratio: " + " ".join(repr(float(r)) for r in ratios),))


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "embed": cmd_embed,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="famh", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (value parsed as JSON when possible)")
    common.add_argument("--workers", type=int, help="prefetch threads for batch assembly")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic recordings and labels")
    p.add_argument("--out", help="output directory (default paths.raw_dir)")
    p = sub.add_parser("preprocess", parents=[common], help="filter, resample, calibrate, find wear")
    p.add_argument("--in", dest="input", help="raw directory (default paths.raw_dir)")
    p.add_argument("--out", help="output directory (default paths.data_dir)")
    p = sub.add_parser("pretrain", parents=[common], help="masked reconstruction pretraining")
    p.add_argument("--epochs", type=int, help="shorthand for --set pretrain.epochs=N")
    p.add_argument("--resume", help="checkpoint to continue from")
    for name, text in (("finetune", "train the linear probe"), ("evaluate", "probe metrics"),
                       ("embed", "export embeddings and PCA")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="model checkpoint")
        if name == "evaluate":
            p.add_argument("--split", choices=("val", "train", "all"), default="val")
        if name == "embed":
            p.add_argument("--components", type=int, default=2)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("FAMH_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"FAMH_LOG must be one of error, info, debug; got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        overrides = list(args.set)
        if args.workers is not None:
            overrides.append(f"workers={args.workers}")
        if getattr(args, "epochs", None) is not None:
            overrides.append(f"pretrain.epochs={args.epochs}")
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command](cfg, args)
    except FamhError as exc:
        print(f"famh {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"famh {args.command}: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
