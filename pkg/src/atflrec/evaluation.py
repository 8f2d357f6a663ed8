"""AUC evaluation, single-run execution and the resumable ablation harness."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from itertools import groupby
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .data import kshot_sample
from .metrics import auc
from .model import ATFLRec, load_checkpoint, save_checkpoint, score_samples
from .pipeline import Dataset, extract_features, load_dataset, make_samples
from .train import train

log = logging.getLogger(__name__)

AXES = ("variant", "intra_audio_pool", "cross_modal_pool", "n_mels", "k")


@dataclass
class EvalReport:
    run_id: str
    variant: str
    intra_audio_pool: str
    cross_modal_pool: str
    n_mels: int
    k: int
    seed: int
    auc: float
    n_pos: int
    n_neg: int
    wall_time: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def evaluate(model, samples: Sequence, run_id: str = "", k: int = 0, seed: int = 0) -> EvalReport:
    """Eval-mode scores on ``samples`` and their AUC; ``model`` may be a checkpoint path."""
    start = time.perf_counter()
    if not isinstance(model, ATFLRec):
        model = load_checkpoint(model)
    labels = np.array([s.label for s in samples])
    value = auc(score_samples(model, samples), labels)
    v = model.cfg.variant
    return EvalReport(
        run_id=run_id,
        variant=v.variant,
        intra_audio_pool=v.intra_audio_pool,
        cross_modal_pool=v.cross_modal_pool,
        n_mels=model.cfg.n_mels,
        k=k,
        seed=seed,
        auc=value,
        n_pos=int(labels.sum()),
        n_neg=int(labels.size - labels.sum()),
        wall_time=time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# One training run
# ---------------------------------------------------------------------------
def run_key(cfg: RunConfig, dataset_digest: str) -> str:
    """Cell identity: the full config plus the dataset contents."""
    return hashlib.sha256((cfg.canonical() + dataset_digest).encode()).hexdigest()[:16]


def run_single(cfg: RunConfig, dataset: Dataset, out_dir, features=None, jobs: int = 1) -> EvalReport:
    """Train one config on the dataset and evaluate on its test split.

    Writes config.json, vocab.txt, checkpoint.atfl, history.csv, epochs.csv
    and report.json into ``out_dir``; report.json is written last and marks
    the run complete.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    uses_audio = cfg.variant.uses_audio
    if uses_audio and features is None:
        features, _ = extract_features(dataset, cfg.fbank, jobs=jobs)
    vocab, samples = make_samples(dataset, features if uses_audio else None, cfg.encoder.vocab_size)
    train_set = kshot_sample(samples["train"], cfg.train.k_shot, cfg.train.seed)
    model = ATFLRec(cfg.model_config(), seed=cfg.train.seed)
    result = train(model, train_set, samples["val"], cfg.train)

    run_id = run_key(cfg, dataset.digest())
    meta = {"fingerprint": cfg.fingerprint(), "run_id": run_id, "dataset": str(dataset.root), "config": cfg.to_dict()}
    (out / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    vocab.save(out / "vocab.txt")
    save_checkpoint(result.model, out / "checkpoint.atfl")
    result.history.write_csv(out / "history.csv")
    result.history.write_epochs_csv(out / "epochs.csv")
    report = evaluate(result.model, samples["test"], run_id, cfg.train.k_shot, cfg.train.seed)
    report.wall_time = time.perf_counter() - start
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    log.info("run %s: %s AUC %.4f (%.1fs)", run_id, cfg.variant.variant, report.auc, report.wall_time)
    return report


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------
def _cell_worker(args) -> dict:
    cfg_dict, root, out_dir = args
    cfg = RunConfig.from_dict(cfg_dict)
    return run_single(cfg, load_dataset(root), out_dir).to_dict()


def run_ablation(cfg: RunConfig, dataset: Dataset, results_dir, jobs: int = 1) -> tuple[list[EvalReport], dict]:
    """Train and evaluate every grid cell; completed cells are reused.

    A cell lives in ``results_dir/cells/<run id>``; it counts as done only
    once its report.json exists, so an interrupted cell is simply rerun.
    Returns the reports (grid order) and the rendered tables.
    """
    results = Path(results_dir)
    cells = cfg.cells()
    digest = dataset.digest()
    todo, reports = [], {}
    for cell in cells:
        key = run_key(cell, digest)
        report_path = results / "cells" / key / "report.json"
        if report_path.exists():
            reports[key] = EvalReport.from_dict(json.loads(report_path.read_text()))
        else:
            todo.append((key, cell))
    log.info("ablation: %d cells, %d cached, %d to run", len(cells), len(reports), len(todo))
    if jobs > 1 and len(todo) > 1:
        # extract up front so the workers only ever read the feature cache
        for fb in {c.fbank for _, c in todo if c.variant.uses_audio}:
            extract_features(dataset, fb, jobs=jobs)
        args = [(c.to_dict(), str(dataset.root), results / "cells" / key) for key, c in todo]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for (key, _), rep in zip(todo, pool.map(_cell_worker, args)):
                reports[key] = EvalReport.from_dict(rep)
    else:
        feats_cache: dict[str, dict] = {}
        for key, cell in todo:
            feats = None
            if cell.variant.uses_audio:
                fp = cell.fbank.fingerprint()
                if fp not in feats_cache:
                    feats_cache.clear()
                    feats_cache[fp] = extract_features(dataset, cell.fbank)[0]
                feats = feats_cache[fp]
            reports[key] = run_single(cell, dataset, results / "cells" / key, features=feats)
    ordered = [reports[run_key(c, digest)] for c in cells]
    tables = render_tables(ordered, cfg)
    write_tables(tables, results)
    return ordered, tables


def _key(r: EvalReport) -> tuple:
    return (r.variant, r.intra_audio_pool, r.cross_modal_pool, r.n_mels, r.k)


def summarize(reports: Sequence[EvalReport]) -> list[dict]:
    """Mean and sample std of AUC over seeds, one row per non-seed configuration."""
    rows = []
    order = {k: i for i, k in enumerate(dict.fromkeys(_key(r) for r in reports))}
    for key, grp in groupby(sorted(reports, key=lambda r: order[_key(r)]), key=_key):
        grp = list(grp)
        a = np.array([r.auc for r in grp])
        rows.append(
            dict(
                zip(AXES, key),
                mean=float(a.mean()),
                std=float(a.std(ddof=1)) if a.size > 1 else 0.0,
                n=int(a.size),
                seeds=" ".join(str(r.seed) for r in sorted(grp, key=lambda r: r.seed)),
            )
        )
    return rows


def _fmt(row: dict) -> str:
    return f"{row['mean']:.4f} ± {row['std']:.4f}"


def _varying(rows: list[dict]) -> list[str]:
    return [a for a in AXES if len({r[a] for r in rows}) > 1]


def _md_table(header: list[str], body: list[list]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in body]
    return "\n".join(lines) + "\n"


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(AXES) + ["mean", "std", "n", "seeds"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "mean": repr(r["mean"]), "std": repr(r["std"])})
    return buf.getvalue()


def _axis_table(rows: list[dict], axis: str, title: str) -> str:
    others = [a for a in _varying(rows) if a != axis]
    header = [axis] + others + ["AUC (mean ± std)", "n seeds"]
    body = [[r[axis]] + [r[o] for o in others] + [_fmt(r), r["n"]] for r in rows]
    return f"## {title}\n\n" + _md_table(header, body)


def _pool_matrix(rows: list[dict]) -> str:
    """Within-audio pooling as rows, cross-modal pooling as columns."""
    others = [a for a in _varying(rows) if a not in ("intra_audio_pool", "cross_modal_pool")]
    out = ["## Feature fusion (rows: within-audio pooling, columns: audio-text pooling)\n"]
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[o] for o in others), []).append(r)
    for gkey, grp in groups.items():
        if others:
            out.append("### " + ", ".join(f"{o}={v}" for o, v in zip(others, gkey)) + "\n")
        intra = list(dict.fromkeys(r["intra_audio_pool"] for r in grp))
        cross = list(dict.fromkeys(r["cross_modal_pool"] for r in grp))
        cell = {(r["intra_audio_pool"], r["cross_modal_pool"]): _fmt(r) for r in grp}
        body = [[i] + [cell.get((i, c), "") for c in cross] for i in intra]
        out.append(_md_table(["within-audio \\ audio-text"] + cross, body))
    return "\n".join(out)


def render_tables(reports: Sequence[EvalReport], cfg: RunConfig | None = None) -> dict[str, str]:
    """File name -> content for the summary and every varying grid axis."""
    rows = summarize(reports)
    header = list(AXES) + ["AUC (mean ± std)", "n seeds"]
    tables = {
        "summary.csv": _csv(rows),
        "summary.md": "## All configurations\n\n" + _md_table(header, [[r[a] for a in AXES] + [_fmt(r), r["n"]] for r in rows]),
    }
    varying = _varying(rows)
    if "variant" in varying:
        tables["table_variants.md"] = _axis_table(rows, "variant", "Fine-tuning topology")
    if "intra_audio_pool" in varying or "cross_modal_pool" in varying:
        tables["table_pooling.md"] = _pool_matrix(rows)
    if "n_mels" in varying:
        tables["table_fbank.md"] = _axis_table(rows, "n_mels", "Number of mel filters")
    if "k" in varying:
        tables["table_kshot.md"] = _axis_table(rows, "k", "Training shots")
    if cfg is not None:
        note = f"\nconfig fingerprint: {cfg.fingerprint()}\n"
        tables = {k: v + note if k.endswith(".md") else v for k, v in tables.items()}
    return tables


def write_tables(tables: dict[str, str], results_dir) -> None:
    out = Path(results_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in tables.items():
        (out / name).write_text(text)
