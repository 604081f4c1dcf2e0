"""``polyrec`` command line: synth, ingest, train, eval, recommend, export.

Settings come from built-in defaults, then an optional TOML file (``--config``),
then flags. Every command works inside one workdir::

    <workdir>/dataset/   validated manifest, embeddings, split.csv, stats.json
    <workdir>/models/    checkpoint, training history, validation metrics
    <workdir>/exports/   metrics, recommendations, embedding exports

All randomness derives from ``seed``: split seed+1, init seed+2, shuffling and
dropout seed+3, synthesis seed+4.
"""
import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import fusion, ranking, retrieval
from .embio import write_embeddings

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("polyrec")

ARCH_FLAGS = {"early": "early", "gated": "gated_late", "mmoe": "mmoe"}


class CLIError(Exception):
    pass


@dataclass
class RunConfig:
    manifest: str | None = None
    lang: str | None = None
    graph: str | None = None
    workdir: str = "work"
    arch: str = "mmoe"
    modality: str = "both"
    seed: int = 0
    k_retrieve: int = retrieval.DEFAULT_K
    k_final: int = ranking.DEFAULT_K_FINAL
    properties: tuple = ds.TASKS
    train: fusion.TrainConfig = field(default_factory=fusion.TrainConfig)

    @property
    def architecture(self):
        return ARCH_FLAGS[self.arch]

    def path(self, *parts):
        return Path(self.workdir, *parts)


def load_run_config(path):
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    cfg = RunConfig()
    train_raw = raw.pop("train", {})
    raw.pop("synth", None)
    known = {f.name for f in fields(RunConfig)} - {"train"}
    for key, value in raw.items():
        if key not in known:
            raise CLIError(f"{path}: unknown config key {key!r}")
        setattr(cfg, key, tuple(value) if key == "properties" else value)
    train_known = {f.name for f in fields(fusion.TrainConfig)}
    for key, value in train_raw.items():
        if key not in train_known:
            raise CLIError(f"{path}: unknown [train] key {key!r}")
        setattr(cfg.train, key, value)
    return cfg


def synth_section(path):
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh).get("synth", {})


def _floats(text, n=3):
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    if len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _props(text):
    return tuple(p.strip() for p in text.split(",") if p.strip())


def resolve_config(args):
    cfg = load_run_config(args.config) if args.config else RunConfig()
    for name in ("manifest", "lang", "graph", "workdir", "arch", "modality", "seed",
                 "k_retrieve", "k_final", "properties"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    for name in ("epochs", "lr", "batch_size", "weight_decay", "dropout"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg.train, name, value)
    if cfg.arch not in ARCH_FLAGS:
        raise CLIError(f"unknown architecture {cfg.arch!r}; choose from {sorted(ARCH_FLAGS)}")
    if cfg.modality not in fusion.MODALITIES:
        raise CLIError(f"unknown modality {cfg.modality!r}; choose from {fusion.MODALITIES}")
    return cfg


# --- bundle I/O ------------------------------------------------------------

def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise CLIError(f"{what} not found: {path}")
    return path


def load_bundle(cfg):
    """Dataset with embeddings, split assignment and task stats from the workdir."""
    d = cfg.path("dataset")
    data = ds.load_manifest(_require(d / "manifest.jsonl", "ingested manifest (run `polyrec ingest`)"))
    data = ds.attach_embeddings(data, _require(d / "lang.prec", "language embeddings"),
                                _require(d / "graph.prec", "graph embeddings"))
    assignment = ds.read_split_csv(_require(d / "split.csv", "split file"), data, seed=cfg.seed + 1)
    stats = ds.TaskStats.from_dict(json.loads(_require(d / "stats.json", "task stats").read_text()))
    return data, assignment, stats


def checkpoint_path(cfg, args):
    return Path(args.checkpoint) if getattr(args, "checkpoint", None) else cfg.path("models", "model.pwts")


def load_checked_model(cfg, args, data):
    path = _require(checkpoint_path(cfg, args), "checkpoint")
    model = fusion.load_model(path)
    if getattr(args, "arch", None) and ARCH_FLAGS[args.arch] != model.architecture:
        raise CLIError(f"{path}: checkpoint holds a {model.architecture} model, not {ARCH_FLAGS[args.arch]}")
    if getattr(args, "modality", None) and args.modality != model.modality:
        raise CLIError(f"{path}: checkpoint modality is {model.modality}, not {args.modality}")
    if (data.lang.shape[1], data.graph.shape[1]) != (model.lang_dim, model.graph_dim):
        raise CLIError(f"{path}: checkpoint expects embedding dims ({model.lang_dim}, {model.graph_dim})")
    if model.stats is None:
        raise CLIError(f"{path}: checkpoint carries no task statistics")
    return model


def _fmt_r2(v):
    return "undefined" if math.isnan(v) else f"{v:.6f}"


def write_metrics_csv(path, r2, counts):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "r2", "n_labels"])
        for t, v, n in zip(ds.TASKS, r2, counts):
            w.writerow([t, "undefined" if math.isnan(v) else repr(float(v)), n])


# --- commands ----------------------------------------------------------------

def cmd_synth(cfg, args):
    opts = synth_section(args.config)
    n = args.n if args.n is not None else opts.get("n", 12441)
    missing = args.missing or tuple(opts.get("missing", (0.0, 0.708, 0.728)))
    offsets = args.offsets or tuple(opts.get("offsets", (10.0, 10.0, 10.0)))
    shared = args.shared if args.shared is not None else opts.get("shared", 0.7)
    lang_share = args.lang_share if args.lang_share is not None else opts.get("lang_share", 0.5)
    r2 = args.r2 if args.r2 is not None else opts.get("r2", 0.95)
    seed = cfg.seed + 4
    weights = ds.factor_weights([seed, 1], shared=shared, lang_share=lang_share)
    noise = args.noise if args.noise is not None else opts.get("noise", ds.noise_for_r2(weights, r2))
    spec = ds.SyntheticSpec(n, noise, missing, weights, seed=seed, offsets=offsets)
    data = ds.generate_synthetic(spec).dataset
    out = Path(args.out) if args.out else cfg.path("synth")
    out.mkdir(parents=True, exist_ok=True)
    ds.write_manifest(out / "manifest.jsonl", data)
    write_embeddings(out / "lang.prec", data.ids, data.lang)
    write_embeddings(out / "graph.prec", data.ids, data.graph)
    np.save(out / "ground_truth.npy", weights)
    meta = {"n_records": n, "noise_std": noise, "missing_rate": list(missing),
            "offsets": list(offsets), "shared": shared, "lang_share": lang_share, "seed": seed}
    (out / "synth.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    counts = data.label_counts()
    print(f"wrote {n} synthetic records to {out}")
    print("present labels: " + ", ".join(f"{t}={c}" for t, c in zip(ds.TASKS, counts)))
    return 0


def cmd_ingest(cfg, args):
    for name in ("manifest", "lang", "graph"):
        if getattr(cfg, name) is None:
            raise CLIError(f"ingest needs --{name} (or '{name}' in the config file)")
    data = ds.load_manifest(_require(cfg.manifest, "manifest"))
    data = ds.attach_embeddings(data, _require(cfg.lang, "language embedding file"),
                                _require(cfg.graph, "graph embedding file"))
    assignment = ds.split_dataset(data, seed=cfg.seed + 1)
    stats = ds.compute_task_stats(data, assignment)
    d = cfg.path("dataset")
    d.mkdir(parents=True, exist_ok=True)
    ds.write_manifest(d / "manifest.jsonl", data)
    write_embeddings(d / "lang.prec", data.ids, data.lang)
    write_embeddings(d / "graph.prec", data.ids, data.graph)
    ds.write_split_csv(d / "split.csv", data, assignment)
    (d / "stats.json").write_text(json.dumps(stats.to_dict(), indent=2) + "\n")
    counts = data.label_counts()
    n_train, n_val, n_test = assignment.counts()
    print(f"records: {len(data)}")
    print("labels: " + ", ".join(f"{t}={c}" for t, c in zip(ds.TASKS, counts)))
    print(f"split: train={n_train} val={n_val} test={n_test}")
    return 0


def cmd_train(cfg, args):
    data, assignment, stats = load_bundle(cfg)
    model = fusion.build_model(cfg.architecture, cfg.modality, seed=cfg.seed + 2)
    tcfg = fusion.TrainConfig(**{f.name: getattr(cfg.train, f.name) for f in fields(fusion.TrainConfig)})
    tcfg.seed = cfg.seed + 3
    best, history = fusion.train(model, data, assignment, tcfg, stats)
    ckpt = checkpoint_path(cfg, args)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    fusion.save_model(ckpt, best)
    fusion.write_history_csv(ckpt.with_name("history.csv"), history)
    r2 = fusion.evaluate_r2(best, data, assignment, "val")
    write_metrics_csv(ckpt.with_name("val_metrics.csv"), r2,
                      data.label_counts(assignment.indices("val")))
    best_epoch = min(history, key=lambda r: r.val_loss)
    print(f"trained {best.architecture} ({best.modality}) for {len(history)} epochs; "
          f"best val loss {best_epoch.val_loss:.6f} at epoch {best_epoch.epoch}")
    print("val R2: " + ", ".join(f"{t}={_fmt_r2(v)}" for t, v in zip(ds.TASKS, r2)))
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_eval(cfg, args):
    data, assignment, _ = load_bundle(cfg)
    model = load_checked_model(cfg, args, data)
    r2 = fusion.evaluate_r2(model, data, assignment, args.split)
    counts = data.label_counts(assignment.indices(args.split))
    out = cfg.path("exports")
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / f"metrics_{args.split}.csv", r2, counts)
    print(f"{'task':<6}{'r2':>12}{'n_labels':>10}")
    for t, v, n in zip(ds.TASKS, r2, counts):
        print(f"{t:<6}{_fmt_r2(v):>12}{n:>10}")
    return 0


def cmd_recommend(cfg, args):
    data, _, _ = load_bundle(cfg)
    model = load_checked_model(cfg, args, data)
    if args.query not in data:
        raise CLIError(f"unknown query id {args.query!r}")
    index = retrieval.build_index(data)
    ranked = ranking.recommend(index, model, data, args.query, cfg.k_retrieve, cfg.k_final,
                               cfg.properties)
    out = Path(args.out) if args.out else cfg.path("exports", f"recommend_{args.query}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    ranking.write_recommendations_csv(out, ranked)
    ranking.write_recommendations_json(out.with_suffix(".json"), ranked, args.query)
    print(f"{'rank':>4}  {'id':<16}{'sim':>9}{'tg':>10}{'tm':>10}{'eg':>8}{'tapd':>9}{'R':>8}")
    for r, c in enumerate(ranked[:10], start=1):
        tg, tm, eg = c.predictions
        print(f"{r:>4}  {c.id:<16}{c.similarity:>9.4f}{tg:>10.2f}{tm:>10.2f}{eg:>8.3f}"
              f"{c.tapd:>9.4f}{c.relevance:>8.3f}")
    print(f"{len(ranked)} candidates written to {out}")
    return 0


def cmd_export(cfg, args):
    data, _, _ = load_bundle(cfg)
    model = load_checked_model(cfg, args, data)
    x = fusion.dataset_input(model, data)
    preds = fusion.predict(model, data)
    cols = []
    if model.modality in ("lang", "both"):
        cols += [f"lang_{j}" for j in range(model.lang_dim)]
    if model.modality in ("graph", "both"):
        cols += [f"graph_{j}" for j in range(model.graph_dim)]
    out = Path(args.out) if args.out else cfg.path("exports", "embeddings.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *cols, "tg_pred", "tm_pred", "eg_pred"])
        for rid, row, p in zip(data.ids, x, preds):
            w.writerow([rid, *(f"{v:.9g}" for v in row), *(repr(float(v)) for v in p)])
    print(f"wrote {len(data)} rows x {len(cols) + 4} columns to {out}")
    return 0


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval,
            "recommend": cmd_recommend, "export": cmd_export}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config")
    common.add_argument("--workdir")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    model_opts = argparse.ArgumentParser(add_help=False)
    model_opts.add_argument("--arch", choices=sorted(ARCH_FLAGS))
    model_opts.add_argument("--modality", choices=fusion.MODALITIES)
    model_opts.add_argument("--checkpoint")

    p = argparse.ArgumentParser(prog="polyrec", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    s.add_argument("--out")
    s.add_argument("--n", type=int)
    s.add_argument("--noise", type=float)
    s.add_argument("--r2", type=float, help="target Bayes-optimal R2 when --noise is absent")
    s.add_argument("--missing", type=_floats, help="per-task missing rates, e.g. 0,0.708,0.728")
    s.add_argument("--offsets", type=_floats)
    s.add_argument("--shared", type=float, help="energy share of the direction common to all tasks")
    s.add_argument("--lang-share", type=float, help="energy share on the language block")

    s = sub.add_parser("ingest", parents=[common], help="validate inputs, split, compute stats")
    s.add_argument("--manifest")
    s.add_argument("--lang")
    s.add_argument("--graph")

    s = sub.add_parser("train", parents=[common, model_opts], help="train a fusion model")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--dropout", type=float)

    s = sub.add_parser("eval", parents=[common, model_opts], help="per-task R2 on a split")
    s.add_argument("--split", choices=ds.SPLITS, default="test")

    s = sub.add_parser("recommend", parents=[common, model_opts], help="retrieve and rank")
    s.add_argument("--query", required=True)
    s.add_argument("--k-retrieve", type=int)
    s.add_argument("--k-final", type=int)
    s.add_argument("--properties", type=_props, help="comma-separated subset of tg,tm,eg")
    s.add_argument("--out")

    s = sub.add_parser("export", parents=[common, model_opts], help="fused inputs + predictions CSV")
    s.add_argument("--out")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (CLIError, ValueError, OSError) as exc:  # every library error class is a ValueError
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
