"""Command-line entry point: gen, extract, train, eval, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

from .config import GridConfig, RunConfig
from .errors import ATFLRecError
from .evaluation import evaluate, run_ablation, run_key, run_single, write_tables
from .model import VARIANTS, load_checkpoint
from .pipeline import default_results_root, extract_features, load_dataset, make_samples
from .svg import write_chart
from .synth import generate_world, write_world
from .text import Vocabulary
from .train import TrainHistory

log = logging.getLogger("atflrec")

DATASET_FILES = ("items.jsonl", "interactions.jsonl", "world.json")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg


def _csv_list(cast):
    def parse(text):
        try:
            return tuple(cast(v) for v in text.split(",") if v)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc

    return parse


def _pool_pair(text):
    pairs = []
    for chunk in text.split(","):
        parts = chunk.split(":")
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"pool pair {chunk!r} must look like intra:cross, e.g. max:sum")
        pairs.append(tuple(parts))
    return tuple(pairs)


# ---------------------------------------------------------------------------
def cmd_gen(args) -> int:
    cfg = _config(args)
    spec = cfg.world if args.seed is None else replace(cfg.world, seed=args.seed)
    out = Path(args.out) if args.out else default_results_root() / "data"
    if out.exists() and any(out.iterdir()):
        if not args.force:
            print(f"error: {out} exists and is not empty (use --force to overwrite)", file=sys.stderr)
            return 1
        for sub in ("audio", "features"):
            shutil.rmtree(out / sub, ignore_errors=True)
    stats = write_world(generate_world(spec), out)
    print(f"wrote dataset to {out}")
    for k, v in stats.items():
        print(f"  {k}: {v:.4f}" if isinstance(v, float) else f"  {k}: {v}")
    return 0


def cmd_extract(args) -> int:
    cfg = _config(args)
    fb = cfg.fbank if args.n_mels is None else replace(cfg.fbank, n_mels=args.n_mels)
    ds = load_dataset(args.dataset)
    _, stats = extract_features(ds, fb, jobs=args.jobs, force=args.force)
    print(f"features {fb.fingerprint()} (n_mels={fb.n_mels}): {stats['computed']} computed, {stats['cached']} cached")
    print(f"  {stats['dir']}")
    return 0


def _write_loss_curve(run_dir: Path) -> None:
    hist = TrainHistory.read_csv(run_dir / "history.csv")
    if not hist.steps:
        return
    it = [s[0] for s in hist.steps]
    write_chart(
        run_dir / "loss.svg",
        {"train loss": (it, [s[2] for s in hist.steps])},
        title="Training loss",
        xlabel="optimizer step",
        ylabel="BCE",
    )


def cmd_train(args) -> int:
    cfg = _config(args)
    train_cfg = cfg.train
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if args.k is not None:
        train_cfg = replace(train_cfg, k_shot=args.k)
    variant = cfg.variant if args.variant is None else replace(cfg.variant, variant=args.variant)
    cfg = replace(cfg, train=train_cfg, variant=variant, grid=None)
    ds = load_dataset(args.dataset)
    key = run_key(cfg, ds.digest())
    out = Path(args.out) if args.out else default_results_root() / "runs" / key
    report_path, meta_path = out / "report.json", out / "config.json"
    if report_path.exists() and meta_path.exists():
        same = json.loads(meta_path.read_text()).get("run_id") == key
        if same and not args.force:
            verb = "already finished; nothing to resume" if args.resume else "is up to date"
            print(f"run {key} {verb} ({out})")
            return 0
        if not same and not args.force:
            print(f"error: {out} holds a different run (use --force to overwrite)", file=sys.stderr)
            return 1
    report = run_single(cfg, ds, out, jobs=args.jobs)
    _write_loss_curve(out)
    print(f"run {key}: {report.variant} K={report.k} seed={report.seed} test AUC {report.auc:.4f} ({report.wall_time:.1f}s)")
    print(f"  {out / 'checkpoint.atfl'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    run_dir = ckpt if ckpt.is_dir() else ckpt.parent
    if ckpt.is_dir():
        ckpt = ckpt / "checkpoint.atfl"
    model = load_checkpoint(ckpt)
    meta_path = run_dir / "config.json"
    cfg = RunConfig.from_dict(json.loads(meta_path.read_text())["config"]) if meta_path.exists() else RunConfig()
    fb = replace(cfg.fbank, n_mels=model.cfg.n_mels)
    ds = load_dataset(args.dataset)
    feats = extract_features(ds, fb, jobs=args.jobs)[0] if model.cfg.variant.uses_audio else None
    vocab_path = run_dir / "vocab.txt"
    vocab = Vocabulary.load(vocab_path) if vocab_path.exists() else None
    _, samples = make_samples(ds, feats, model.cfg.encoder.vocab_size, vocab)
    report = evaluate(model, samples[args.split], run_id=run_dir.name, k=cfg.train.k_shot, seed=cfg.train.seed)
    out = Path(args.out) if args.out else run_dir / f"eval_{args.split}.json"
    out.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"AUC {report.auc:.4f} split={args.split} n_pos={report.n_pos} n_neg={report.n_neg} report={out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    grid = cfg.grid or GridConfig()
    overrides = {
        "variants": args.variants,
        "pools": args.pools,
        "n_mels": args.n_mels,
        "seeds": args.seeds,
        "k_shots": args.k_shots,
    }
    grid = replace(grid, **{k: v for k, v in overrides.items() if v is not None})
    cfg = replace(cfg, grid=grid)
    out = Path(args.out) if args.out else default_results_root() / "ablate" / cfg.short_id
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    ds = load_dataset(args.dataset)
    reports, tables = run_ablation(cfg, ds, out, jobs=args.jobs)
    if len(grid.k_shots) > 1:
        series = {}
        for v in grid.variants:
            pts = sorted(
                (k, sum(r.auc for r in reports if r.variant == v and r.k == k) / max(1, sum(1 for r in reports if r.variant == v and r.k == k)))
                for k in grid.k_shots
            )
            series[v] = ([p[0] for p in pts], [p[1] for p in pts])
        write_chart(out / "auc_vs_k.svg", series, title="Test AUC vs K", xlabel="K", ylabel="AUC", markers=True)
    write_tables(tables, out)
    for name, text in tables.items():
        if name.endswith(".md") and name != "summary.md":
            print(text)
    print(f"{len(reports)} reports; tables in {out}")
    return 0


# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atflrec", description="Audio+text LoRA recommendation experiments")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True):
        sp.add_argument("--config", help="run configuration JSON (defaults when omitted)")
        if dataset:
            sp.add_argument("dataset", help="dataset directory written by 'gen'")

    g = sub.add_parser("gen", help="generate the synthetic dataset")
    common(g, dataset=False)
    g.add_argument("--seed", type=int, help="world seed (overrides the config)")
    g.add_argument("--out", help="output directory (default: $ATFLREC_RESULTS_DIR/data)")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("extract", help="compute FBK1 features for every item")
    common(e)
    e.add_argument("--n-mels", type=int, help="override the number of mel filters")
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--force", action="store_true", help="recompute cached features")
    e.set_defaults(func=cmd_extract)

    t = sub.add_parser("train", help="fine-tune one variant and evaluate it on the test split")
    common(t)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--seed", type=int, help="training seed (overrides the config)")
    t.add_argument("--k", type=int, help="number of training shots")
    t.add_argument("--out", help="run directory (default: $ATFLREC_RESULTS_DIR/runs/<run id>)")
    t.add_argument("--resume", action="store_true", help="skip if the run already finished")
    t.add_argument("--force", action="store_true", help="retrain even if the run finished")
    t.add_argument("--jobs", type=int, default=1)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="evaluate a checkpoint")
    v.add_argument("checkpoint", help="checkpoint file or run directory")
    v.add_argument("dataset")
    v.add_argument("--split", default="test", choices=["train", "val", "test"])
    v.add_argument("--out", help="report path (default: beside the checkpoint)")
    v.add_argument("--jobs", type=int, default=1)
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate a grid of configurations")
    common(a)
    a.add_argument("--variants", type=_csv_list(str), help=f"comma list from {', '.join(VARIANTS)}")
    a.add_argument("--pools", type=_pool_pair, help="comma list of intra:cross pairs, e.g. max:sum,max:max")
    a.add_argument("--n-mels", type=_csv_list(int), help="comma list, e.g. 40,80,128")
    a.add_argument("--seeds", type=_csv_list(int), help="comma list of training seeds")
    a.add_argument("--k-shots", type=_csv_list(int), help="comma list of K values")
    a.add_argument("--out", help="results directory (default: $ATFLREC_RESULTS_DIR/ablate/<config id>)")
    a.add_argument("--resume", action="store_true", help="accepted for symmetry; finished cells are always reused")
    a.add_argument("--jobs", type=int, default=1)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ATFLRecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
