"""Full task-sequence runs, run comparison and saliency-progression export."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ExperimentConfig
from .evaluation import (AccuracyMatrix, PointingStats, acc_bwt, evaluate_split, pg_metrics,
                         precision_recall, saliency_progression)
from .memory import DualBuffer, all_entries, save_buffer, update
from .model import build_classifier, expand_head, load_checkpoint, save_checkpoint
from .rng import numpy_rng, substream_seed, torch_generator
from .saliency import compute_saliency, memory_cost
from .scenario import build_scenario
from .strategies import RegularizerState, TrainRngs, consolidate, saliency_l1, train_task

log = logging.getLogger(__name__)


class TaskFailure(RuntimeError):
    def __init__(self, task: int, cause: BaseException):
        super().__init__(f"task {task} failed: {cause!r}")
        self.task = task


@dataclass
class RunResult:
    out_dir: Path | None
    R: AccuracyMatrix
    R_pg: AccuracyMatrix | None
    stats: dict
    summary: dict
    model: torch.nn.Module
    buffer: DualBuffer
    reports: list


def _mean_defined(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def buffer_drift(model, buffer: DualBuffer, xai) -> float | None:
    """Mean L1 between the model's current explanations and the buffer's references."""
    if not buffer.entries:
        return None
    batch = all_entries(buffer)
    g = torch.Generator().manual_seed(0)
    maps = compute_saliency(model, batch.images, model.head_index(batch.labels), xai, generator=g)
    return float(saliency_l1(maps.detach(), batch.saliencies.to(maps.dtype)))


def run_experiment(cfg: ExperimentConfig, out_dir=None, write: bool = True) -> RunResult:
    """Train the task sequence: train -> update buffer -> snapshot regularizer -> evaluate.

    With ``write`` the run directory receives the config copy, R.csv,
    summary.json, predictions.csv, train_log.jsonl, buffer.ckpt, per-task
    checkpoints (when archived) and manifest.json.
    """
    seed = cfg.seed
    out = Path(out_dir) if out_dir is not None else cfg.resolved_output_dir()
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(cfg.to_yaml())
        if cfg.archive_checkpoints:
            (out / "checkpoints").mkdir(exist_ok=True)

    spec = replace(cfg.scenario, seed=substream_seed(seed, "scenario"))
    tasks = build_scenario(spec, require_masks=cfg.pointing_game)
    model = build_classifier(cfg.model, spec.image_size, substream_seed(seed, "init"))
    buffer = DualBuffer(cfg.buffer_capacity)
    regs = RegularizerState()
    rngs = TrainRngs(shuffle=torch_generator(seed, "training"), replay=numpy_rng(seed, "replay"),
                     noise=torch_generator(seed, "smoothgrad"))
    buffer_rng = numpy_rng(seed, "buffer")
    fisher_rng = numpy_rng(seed, "fisher")
    saliency_seed = substream_seed(seed, "buffer-saliency")
    xai = cfg.saliency
    T = len(tasks)
    R = AccuracyMatrix(T)
    R_pg = AccuracyMatrix(T) if cfg.pointing_game else None
    stats: dict[tuple[int, int], PointingStats] = {}
    predictions = []
    reports = []
    log_lines = []

    for task in tasks:
        k = task.task_id
        try:
            expand_head(model, task.class_ids)
            rep = train_task(model, task, buffer, cfg.train, xai, regs, rngs)
            reports.extend(rep)
            log_lines.extend(json.dumps(asdict(r), sort_keys=True) for r in rep)
            per_class = None
            if cfg.buffer_per_class is not None and spec.few_shot:
                per_class = cfg.buffer_per_class.base if k == 1 else cfg.buffer_per_class.novel
            update(buffer, model, task, xai, buffer_rng, per_class=per_class, saliency_seed=saliency_seed)
            consolidate(model, task, cfg.train, regs, fisher_rng)

            acc_row, pg_row = [], []
            for prev in tasks[:k]:
                i = prev.task_id
                gen = torch_generator(seed, f"eval:{k}:{i}")
                ev = evaluate_split(model, prev.test, xai if cfg.pointing_game else None, gen)
                acc_row.append(ev.accuracy)
                if ev.hits is not None:
                    stats[(k, i)] = ev.stats
                    pg_row.append(stats[(k, i)].hit_rate)
                for j, (y, p) in enumerate(zip(ev.labels, ev.predictions)):
                    hit = "" if ev.hits is None else int(ev.hits[j])
                    predictions.append((k, i, j, int(y), int(p), hit))
            R.set_row(k, acc_row)
            if R_pg is not None:
                R_pg.set_row(k, pg_row)
            if write and cfg.archive_checkpoints:
                save_checkpoint(model, out / "checkpoints" / f"model_task{k:02d}.ckpt")
            log.info("task %d/%d done: accuracies %s", k, T, ["%.3f" % a for a in acc_row])
        except Exception as exc:
            raise TaskFailure(k, exc) from exc

    acc, bwt = acc_bwt(R)
    summary = {
        "name": cfg.name,
        "seed": seed,
        "num_tasks": T,
        "ACC": acc,
        "BWT": bwt,
        "final_rrr_loss": buffer_drift(model, buffer, xai),
        "buffer_counts": {str(t): c for t, c in buffer.per_task_counts().items()},
        "saliency_bytes_per_map": memory_cost(xai, cfg.model, spec.image_size),
    }
    if R_pg is not None:
        pg_acc, pg_bwt = pg_metrics(R_pg)
        diag = [precision_recall(stats[(i, i)]) for i in range(1, T + 1)]
        final = [precision_recall(stats[(T, i)]) for i in range(1, T + 1)]
        summary.update({
            "PG-ACC": pg_acc,
            "PG-BWT": pg_bwt,
            "Pr_ii": [p for p, _ in diag], "Re_ii": [r for _, r in diag],
            "Pr_Ti": [p for p, _ in final], "Re_Ti": [r for _, r in final],
            "Pr_ii_mean": _mean_defined(p for p, _ in diag),
            "Re_ii_mean": _mean_defined(r for _, r in diag),
            "Pr_Ti_mean": _mean_defined(p for p, _ in final),
            "Re_Ti_mean": _mean_defined(r for _, r in final),
        })

    if write:
        (out / "R.csv").write_text(format_r_csv(R, R_pg))
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "i", "index", "label", "prediction", "hit"])
        w.writerows(predictions)
        (out / "predictions.csv").write_text(buf.getvalue())
        (out / "train_log.jsonl").write_text("\n".join(log_lines) + "\n")
        save_buffer(buffer, out / "buffer.ckpt")
        write_manifest(out, cfg)
    return RunResult(out if write else None, R, R_pg, stats, summary, model, buffer, reports)


def format_r_csv(R: AccuracyMatrix, R_pg: AccuracyMatrix | None) -> str:
    lines = ["k,i,accuracy,pg_hit_rate"]
    for k in range(1, R.T + 1):
        for i in range(1, k + 1):
            pg = "" if R_pg is None else f"{R_pg[k, i]:.6f}"
            lines.append(f"{k},{i},{R[k, i]:.6f},{pg}")
    return "\n".join(lines) + "\n"


def read_r_csv(path) -> AccuracyMatrix:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    T = max(int(r["k"]) for r in rows)
    R = AccuracyMatrix(T)
    for r in rows:
        R.values[int(r["k"]) - 1, int(r["i"]) - 1] = float(r["accuracy"])
    return R


def write_manifest(out: Path, cfg: ExperimentConfig, extra_files=()) -> None:
    path = out / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    files = sorted({str(p.relative_to(out)) for p in out.rglob("*")
                    if p.is_file() and p.name != "manifest.json"} | set(extra_files))
    manifest.update({
        "package_version": __version__,
        "schema_version": cfg.schema_version,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "files": files,
    })
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def mean_accuracy_curve(R: AccuracyMatrix) -> list[float]:
    """Mean accuracy over all tasks seen so far, after each task."""
    return [float(np.mean(R.values[k, :k + 1])) for k in range(R.T)]


def _run_dirs(path: Path) -> list[Path]:
    if (path / "R.csv").is_file():
        return [path]
    subs = sorted(p for p in path.iterdir() if p.is_dir() and (p / "R.csv").is_file())
    if not subs:
        raise FileNotFoundError(f"{path} is neither a run directory nor a directory of runs")
    return subs


def compare(arms, out_dir) -> Path:
    """Per-task mean-accuracy curves of several runs (or seed groups) as CSV + PNG.

    Each argument is one arm: a run directory or a directory whose
    subdirectories are seeds of the same configuration. Arms after the
    first get a difference column against the first.
    """
    arms = [Path(a) for a in arms]
    if len(arms) < 2:
        raise ValueError("compare needs at least two run directories")
    labels, curves = [], []
    for a in arms:
        runs = [mean_accuracy_curve(read_r_csv(d / "R.csv")) for d in _run_dirs(a)]
        lengths = {len(c) for c in runs}
        if len(lengths) != 1:
            raise ValueError(f"{a}: runs have different task counts {sorted(lengths)}")
        label = a.name or str(a)
        while label in labels:
            label += "'"
        labels.append(label)
        curves.append(np.array(runs))
    Ts = {c.shape[1] for c in curves}
    if len(Ts) != 1:
        raise ValueError(f"runs have mismatched task counts: {sorted(Ts)}")
    T = Ts.pop()

    means = [c.mean(axis=0) for c in curves]
    stds = [c.std(axis=0, ddof=1) if len(c) > 1 else None for c in curves]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["task"]
    for lab, c in zip(labels, curves):
        header += [f"{lab}_mean", f"{lab}_std", f"{lab}_n"]
    header += [f"diff_{lab}_vs_{labels[0]}" for lab in labels[1:]]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for k in range(T):
        row = [k + 1]
        for m, s, c in zip(means, stds, curves):
            row += [f"{m[k]:.6f}", "" if s is None else f"{s[k]:.6f}", len(c)]
        row += [f"{m[k] - means[0][k]:+.6f}" for m in means[1:]]
        w.writerow(row)
    (out / "compare.csv").write_text(buf.getvalue())

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(1, T + 1)
    for lab, m, s in zip(labels, means, stds):
        ax.errorbar(x, m * 100, yerr=None if s is None else s * 100, marker="o", capsize=3, label=lab)
    ax.set_xlabel("task")
    ax.set_ylabel("accuracy on seen classes (%)")
    ax.set_xticks(x)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "compare.png", metadata={"Software": None})
    plt.close(fig)
    return out / "compare.csv"


def visualize(run_dir, sample: tuple[int, int], checkpoints) -> tuple[Path, list[dict]]:
    """Saliency progression of test sample ``(task, index)`` across archived checkpoints."""
    from .config import load_config

    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.yaml")
    ckpt_dir = run_dir / "checkpoints"
    models = {}
    for k in checkpoints:
        path = ckpt_dir / f"model_task{int(k):02d}.ckpt"
        if not path.is_file():
            raise FileNotFoundError(
                f"checkpoint for task {k} not found in {ckpt_dir}; "
                f"re-run with archive_checkpoints: true")
        models[int(k)] = load_checkpoint(path)
    t, idx = sample
    spec = replace(cfg.scenario, seed=substream_seed(cfg.seed, "scenario"))
    tasks = build_scenario(spec)
    if not 1 <= t <= len(tasks) or not 0 <= idx < len(tasks[t - 1].test):
        raise IndexError(f"sample {t}:{idx} does not exist")
    image, label, mask = tasks[t - 1].test[idx]
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))
    vis = run_dir / "visualizations"
    vis.mkdir(exist_ok=True)
    stem = f"progression_t{t}_i{idx}"
    png = vis / f"{stem}.png"
    records = saliency_progression(x, label, models, cfg.saliency, png, mask=mask,
                                   title=f"{cfg.name}: task {t} sample {idx}")
    (vis / f"{stem}.json").write_text(json.dumps(records, indent=2) + "\n")
    write_manifest(run_dir, cfg)
    return png, records
