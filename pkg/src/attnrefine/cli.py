"""Command-line driver: data generation, training arms, evaluation, ablation suites and reports.

Exit codes: 0 on success, 1 for configuration or usage errors, 2 for runtime failures.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config, write_config
from .data import SyntheticConfig, dataset_hash, generate_synthetic, load_dataset, save_dataset
from .metrics import evaluate, format_table, upsample_nearest, predict
from .model import load_checkpoint, params_hash, save_checkpoint
from .training import ARMS, finetune_model, pretrain_backbone, pretrain_config, pretrain_corpus, train_arm
from .viz import render_overlay, save_overlay, select_overlays

log = logging.getLogger("attnrefine")

ENV_OUT = "ATTNREFINE_OUT"
SUITES = ("arms", "disease_count", "init_mode", "epochs", "w_fp")
REPORT_COLUMNS = (
    "run", "arm", "seed", "init_mode", "epochs", "w_fp", "n_findings",
    "test_auc", "test_f1", "test_mcc", "test_max_dice", "test_hit_rate",
    "val_max_dice", "config_hash", "params_hash",
)
HEADLINE = ("max_dice", "auc", "f1", "mcc", "hit_rate")


def default_root() -> Path:
    return Path(os.environ.get(ENV_OUT, "runs"))


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def content_hash(config: dict) -> str:
    """SHA-256 over the package sources and the config snapshot."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    h.update(json.dumps(config, sort_keys=True).encode())
    return h.hexdigest()


def run_manifest(command: str, cfg: RunConfig, seed: int | None, started: str, outputs: list[str],
                 **extra) -> dict:
    snapshot = cfg.to_dict()
    m = {
        "kind": "run",
        "command": command,
        "version": __version__,
        "config": snapshot,
        "seed": seed,
        "content_hash": content_hash(snapshot),
        "started": started,
        "finished": _now(),
        "outputs": sorted(outputs),
    }
    m.update(extra)
    return m


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- training ------------------------------------------------------------

def make_backbone(run_cfg: RunConfig, train_split, synthetic: SyntheticConfig | None):
    """Warm-start weights for ``run_cfg``; None when pretraining is disabled.

    Synthetic datasets get a fresh disjoint corpus from their own generator config.
    Other datasets fall back to their training split.
    """
    cfg = run_cfg.train
    if not cfg.pretrains:
        return None
    if synthetic is not None:
        corpus = pretrain_corpus(synthetic, cfg)
    else:
        log.warning("dataset is not synthetic; warm start uses the training split")
        corpus = train_split
    log.info("warm start: %d samples, %d epochs", len(corpus), cfg.pretrain_epochs)
    return pretrain_backbone(corpus, cfg)


def _check_image_size(splits: dict, run_cfg: RunConfig) -> None:
    size = splits["train"].samples[0].image.shape
    want = run_cfg.train.model.image_size
    if size != (want, want):
        raise ConfigError(f"model.image_size={want} does not match dataset images of shape {size}")


def train_run(splits: dict, run_cfg: RunConfig, out: Path, synthetic: SyntheticConfig | None = None,
              backbone: dict | None = None, command: str = "train") -> dict:
    """Train one arm into ``out`` and return the summary written there.

    Writes ``history.jsonl``, ``summary.json``, ``config.yaml``, checkpoints and ``manifest.json``.
    """
    started = _now()
    cfg = run_cfg.train
    if "train" not in splits:
        raise ValueError("dataset has no train split")
    _check_image_size(splits, run_cfg)
    train, val, test = splits["train"], splits.get("val"), splits.get("test")
    out.mkdir(parents=True, exist_ok=True)
    if backbone is None:
        backbone = make_backbone(run_cfg, train, synthetic)
    model = finetune_model(train.catalog, cfg, backbone)
    chash = cfg.config_hash()

    with open(out / "history.jsonl", "w") as hist:
        def on_epoch(rec):
            hist.write(json.dumps(rec, sort_keys=True) + "\n")
            val_txt = f" val max_dice={rec['val']['max_dice']:.4f} auc={rec['val']['auc']:.4f}" if "val" in rec else ""
            log.info("epoch %d [%s] cls=%.4f seg=%.4f%s", rec["epoch"] + 1, rec["finding"],
                     rec.get("cls_loss", float("nan")), rec.get("seg_loss", float("nan")), val_txt)

        state = train_arm(train, cfg, val, model=model, on_epoch=on_epoch)

    final = state.model
    hashes = {"final": save_checkpoint(final, out / "checkpoint.pt", cfg.seed, chash,
                                       {"arm": cfg.arm, "epoch": state.epoch})}
    best_models = {}
    for crit in ("max_dice", "auc"):
        m = copy.deepcopy(final)
        if crit in state.best:
            m.load_state_dict(state.best[crit]["state_dict"])
        best_models[crit] = m
        hashes[f"best_{crit}"] = save_checkpoint(
            m, out / f"best_{crit}.pt", cfg.seed, chash,
            {"arm": cfg.arm, "epoch": state.best.get(crit, {}).get("epoch", state.epoch), "criterion": crit},
        )

    summary = {
        "arm": cfg.arm,
        "seed": cfg.seed,
        "config_hash": chash,
        "catalog": list(train.catalog),
        "init_mode": cfg.init_mode,
        "epochs": cfg.epochs,
        "w_fp": cfg.loss.w_fp,
        "data_hash": dataset_hash([splits[k] for k in sorted(splits)]),
        "pretrain": {"samples": cfg.pretrain_samples, "epochs": cfg.pretrain_epochs} if backbone else None,
        "final_losses": {k: state.history[-1].get(k) for k in ("cls_loss", "seg_loss")},
        "val_final": next((r["val"] for r in reversed(state.history) if "val" in r), None),
        "best": {crit: {"epoch": b["epoch"], "score": b["score"]} for crit, b in state.best.items()},
        "checkpoints": {"final": "checkpoint.pt", "best_max_dice": "best_max_dice.pt", "best_auc": "best_auc.pt"},
        "params_hash": hashes,
        "test": None,
    }
    if test is not None and len(test):
        by_dice = evaluate(best_models["max_dice"], test, chash)
        by_auc = evaluate(best_models["auc"], test, chash)
        summary["test"] = {
            # grounding metrics from the max-Dice checkpoint, classification from the AUC checkpoint
            "headline": {"max_dice": by_dice.macro["max_dice"], "hit_rate": by_dice.macro["hit_rate"],
                         "auc": by_auc.macro["auc"], "f1": by_auc.macro["f1"], "mcc": by_auc.macro["mcc"]},
            "best_max_dice": by_dice.to_dict(),
            "best_auc": by_auc.to_dict(),
        }
    _write_json(out / "summary.json", summary)
    write_config(run_cfg, out / "config.yaml")
    outputs = ["history.jsonl", "summary.json", "config.yaml", "checkpoint.pt", "best_max_dice.pt", "best_auc.pt"]
    _write_json(out / "manifest.json", run_manifest(command, run_cfg, cfg.seed, started, outputs))
    return summary


# -- commands ------------------------------------------------------------

def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "arm", None):
        overrides.append(f"train.arm={args.arm}")
    return load_config(args.config, overrides, args.seed)


def _dataset_info(root: Path):
    splits = load_dataset(root)
    manifest = json.loads((root / "manifest.json").read_text())
    synth = manifest.get("synthetic_config")
    return splits, (SyntheticConfig.from_dict(synth) if synth else None)


def cmd_generate_data(args) -> int:
    started = _now()
    cfg = _config(args)
    out = Path(args.out) if args.out else default_root() / "data" / f"seed{cfg.data.seed}"
    splits = generate_synthetic(cfg.data)
    outputs = ["images/", "masks/", "manifest.json"]
    extra = run_manifest("generate-data", cfg, cfg.data.seed, started, outputs)
    extra.pop("kind")
    extra["synthetic_config"] = cfg.data.to_dict()
    manifest = save_dataset(out, splits, extra)
    print(f"wrote {sum(len(s) for s in splits)} samples to {out} (data_hash {manifest['data_hash'][:12]})")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    splits, synth = _dataset_info(Path(args.data))
    out = Path(args.out) if args.out else default_root() / "train" / f"{cfg.train.arm}_seed{cfg.train.seed}"
    summary = train_run(splits, cfg, out, synth)
    head = (summary["test"] or {}).get("headline") or summary["val_final"] or {}
    print(f"{cfg.train.arm} seed {cfg.train.seed}: " + ", ".join(
        f"{k}={v:.4f}" for k, v in head.items() if v is not None) + f" -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    started = _now()
    cfg = _config(args)
    model, blob = load_checkpoint(args.checkpoint)
    splits, _ = _dataset_info(Path(args.data))
    if args.split not in splits:
        raise ValueError(f"dataset has no {args.split!r} split (has {sorted(splits)})")
    ds = splits[args.split]
    out = Path(args.out) if args.out else default_root() / "eval" / Path(args.checkpoint).stem
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(model, ds, blob.get("config_hash"))
    report.meta = {"checkpoint_params_hash": blob["params_hash"], "split": args.split}
    _write_json(out / "metrics.json", report.to_dict())
    label = blob.get("extra", {}).get("arm", Path(args.checkpoint).stem)
    rows = [{"method": label, "dataset": args.split, **report.macro}]
    rows += [{"method": f"  {name}", "dataset": args.split, **vals} for name, vals in report.per_finding.items()]
    table = format_table(rows, ("method", "dataset", "auc", "f1", "mcc", "max_dice", "hit_rate"))
    (out / "metrics.txt").write_text(table + "\n")

    pairs = [(s.id, name) for s in ds.samples for k, name in enumerate(ds.catalog) if s.labels[k]]
    chosen = select_overlays(pairs, cfg.eval.n_overlays, cfg.eval.overlay_seed)
    if chosen:
        ids = sorted({sid for sid, _ in chosen})
        images = np.stack([ds[sid].image for sid in ids])
        _, maps = predict(model, images)
        maps = upsample_nearest(maps, model.config.patch_size)
        for sid, name in chosen:
            i, k = ids.index(sid), ds.catalog.index(name)
            panel = render_overlay(ds[sid].image, maps[i, k], ds[sid].masks[name])
            save_overlay(out / "overlays" / f"{sid}__{name.replace('/', '_')}.png", panel)
    outputs = ["metrics.json", "metrics.txt"] + (["overlays/"] if chosen else [])
    _write_json(out / "manifest.json", run_manifest(
        "evaluate", cfg, None, started, outputs, checkpoint=str(args.checkpoint), dataset=str(args.data),
        overlays=[f"{sid}/{name}" for sid, name in chosen]))
    print(table)
    return 0


def suite_cells(suite: str, cfg: RunConfig) -> list[tuple[str, RunConfig]]:
    """Rows of an ablation suite as (label, config) pairs."""
    t = cfg.train
    if suite == "arms":
        return [(arm, replace(cfg, train=replace(t, arm=arm))) for arm in
                ("dwarf", "gain", "cls_only", "direct_attention", "dwarf_expert_teacher")]
    if suite == "disease_count":
        n = len(cfg.data.findings)
        if n < 2:
            raise ConfigError("suite disease_count needs data.findings with at least 2 entries")
        return [(f"{k} findings", replace(cfg, data=replace(cfg.data, findings=cfg.data.findings[:k])))
                for k in range(2, n + 1)]
    if suite == "init_mode":
        return [(m, replace(cfg, train=replace(t, init_mode=m))) for m in ("iei", "random")]
    if suite == "epochs":
        return [(f"{e} epochs", replace(cfg, train=replace(t, epochs=e))) for e in (t.epochs, 2 * t.epochs)]
    if suite == "w_fp":
        return [(f"w_fp={w:g}", replace(cfg, train=replace(t, loss=replace(t.loss, w_fp=w)))) for w in (1.0, 2.0, 4.0)]
    raise ConfigError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")


def _mean_std(vals) -> str:
    vals = [v for v in vals if v is not None]
    if not vals:
        return "-"
    return f"{100 * np.mean(vals):.2f}±{100 * np.std(vals):.2f}"


def cmd_ablate(args) -> int:
    started = _now()
    base = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    cells = suite_cells(args.suite, base)
    out = Path(args.out) if args.out else default_root() / "ablate" / args.suite
    out.mkdir(parents=True, exist_ok=True)
    data_cache: dict[str, tuple] = {}
    backbone_cache: dict[str, dict] = {}
    rows, run_dirs = [], []
    for label, cell in cells:
        summaries = []
        for seed in seeds:
            cfg = cell.with_seed(seed)
            dkey = json.dumps(cfg.data.to_dict(), sort_keys=True)
            if dkey not in data_cache:
                data_cache[dkey] = dict(zip(("train", "val", "test"), generate_synthetic(cfg.data)))
            splits = data_cache[dkey]
            bkey = dkey + json.dumps(pretrain_config(cfg.train).to_dict(), sort_keys=True)
            if cfg.train.pretrains and bkey not in backbone_cache:
                backbone_cache[bkey] = make_backbone(cfg, splits["train"], cfg.data)
            run_dir = out / label.replace(" ", "_").replace("=", "") / f"seed{seed}"
            log.info("suite %s: %s, seed %d", args.suite, label, seed)
            summaries.append(train_run(splits, cfg, run_dir, cfg.data, backbone_cache.get(bkey), command="ablate"))
            run_dirs.append(str(run_dir.relative_to(out)))
        heads = [(s["test"] or {}).get("headline", {}) for s in summaries]
        rows.append({"setting": label, **{k: _mean_std([h.get(k) for h in heads]) for k in HEADLINE}})

    cols = ("setting",) + HEADLINE
    widths = [max(len(c), *(len(r[c]) for r in rows)) for c in cols]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths)), "  ".join("-" * w for w in widths)]
    lines += ["  ".join(r[c].ljust(w) for c, w in zip(cols, widths)) for r in rows]
    table = f"suite {args.suite}, test metrics in % (mean±std over seeds {args.seeds})\n" + "\n".join(lines)
    (out / "table.txt").write_text(table + "\n")
    _write_json(out / "ablation.json", {"suite": args.suite, "seeds": seeds, "rows": rows, "runs": run_dirs})
    _write_json(out / "manifest.json", run_manifest(
        "ablate", base, None, started, ["table.txt", "ablation.json"] + run_dirs, suite=args.suite, seeds=seeds))
    print(table)
    return 0


def _find_runs(paths) -> list[Path]:
    runs = []
    for p in map(Path, paths):
        if (p / "summary.json").exists():
            runs.append(p)
            continue
        nested = sorted(q.parent for q in p.rglob("summary.json")) if p.is_dir() else []
        if not nested:
            raise FileNotFoundError(f"{p}: no summary.json found")
        runs.extend(nested)
    return runs


def report_rows(paths) -> list[dict]:
    """One row per run, sorted by (arm, seed); all runs must share a finding catalog."""
    rows, catalog = [], None
    for run in _find_runs(paths):
        s = json.loads((run / "summary.json").read_text())
        if catalog is None:
            catalog = s["catalog"]
        elif s["catalog"] != catalog:
            raise ValueError(f"conflicting catalogs: {catalog} vs {s['catalog']} in {run}")
        head = (s.get("test") or {}).get("headline", {})
        rows.append({
            "run": str(run), "arm": s["arm"], "seed": s["seed"], "init_mode": s["init_mode"],
            "epochs": s["epochs"], "w_fp": s["w_fp"], "n_findings": len(s["catalog"]),
            **{f"test_{k}": head.get(k) for k in HEADLINE},
            "val_max_dice": (s.get("val_final") or {}).get("max_dice"),
            "config_hash": s["config_hash"], "params_hash": s["params_hash"]["final"],
        })
    rows.sort(key=lambda r: (r["arm"], r["seed"], r["run"]))
    return rows


def cmd_report(args) -> int:
    started = _now()
    rows = report_rows(args.runs)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(buf.getvalue())
        table = format_table(rows, ("arm", "seed", "test_auc", "test_f1", "test_mcc", "test_max_dice"))
        (out / "report.txt").write_text(table + "\n")
        _write_json(out / "manifest.json", run_manifest(
            "report", load_config(), None, started, ["report.csv", "report.txt"], runs=[r["run"] for r in rows]))
    sys.stdout.write(buf.getvalue())
    return 0


# -- entry point ---------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config file with data/train/loss/model/eval sections")
    common.add_argument("--seed", type=int, help="seed for data generation and training")
    common.add_argument("--out", help=f"output directory (default under ${ENV_OUT} or ./runs)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="attnrefine", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", parents=[common], help="write a synthetic dataset")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", parents=[common], help="train one arm on a dataset directory")
    t.add_argument("--data", required=True, help="dataset directory from generate-data")
    t.add_argument("--arm", choices=ARMS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="metrics and overlays for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", parents=[common], help="run an ablation suite over several seeds")
    a.add_argument("suite", choices=SUITES)
    a.add_argument("--seeds", default="0,1,2")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", parents=[common], help="merge run summaries into one CSV table")
    r.add_argument("runs", nargs="+", help="run directories (or directories containing runs)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # usage errors (code 1) and --help/--version (code 0)
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
