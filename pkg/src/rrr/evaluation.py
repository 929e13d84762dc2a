"""Accuracy matrices, forgetting metrics and the pointing game."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .saliency import SaliencyMap, SaliencySpec, compute_saliency

PEAK_RTOL = 1e-6


class AccuracyMatrix:
    """Lower-triangular T x T matrix; ``R[k][i]`` is defined for i <= k (1-based)."""

    def __init__(self, num_tasks: int):
        self.T = num_tasks
        self.values = np.full((num_tasks, num_tasks), np.nan)

    def set_row(self, k: int, row) -> None:
        row = np.asarray(row, dtype=float)
        if len(row) != k:
            raise ValueError(f"row {k} needs {k} entries, got {len(row)}")
        if np.any((row < 0) | (row > 1)):
            raise ValueError("accuracies must lie in [0, 1]")
        self.values[k - 1, :k] = row

    def __getitem__(self, ki):
        k, i = ki
        if i > k:
            raise IndexError("R[k][i] is only defined for i <= k")
        return self.values[k - 1, i - 1]

    @property
    def complete(self) -> bool:
        return not np.isnan(self.values[np.tril_indices(self.T)]).any()

    def rows(self) -> list[list[float]]:
        return [list(self.values[k, :k + 1]) for k in range(self.T)]


def _as_rows(R) -> list[list[float]]:
    if isinstance(R, AccuracyMatrix):
        return R.rows()
    return [list(r) for r in R]


def acc_bwt(R) -> tuple[float, float]:
    """Average final-row value and backward transfer of a lower-triangular matrix.

    Accepts an ``AccuracyMatrix`` or row lists where row k has at least k
    entries. BWT is 0 for a single task.
    """
    rows = _as_rows(R)
    T = len(rows)
    if T == 0:
        raise ValueError("empty matrix")
    for k, row in enumerate(rows, start=1):
        if len(row) < k or any(v is None or np.isnan(v) for v in row[:k]):
            raise ValueError(f"matrix is not populated through row {k}")
    final = rows[-1][:T]
    acc = float(np.mean(final))
    if T == 1:
        return acc, 0.0
    bwt = float(np.mean([final[i] - rows[i][i] for i in range(T - 1)]))
    return acc, bwt


# the pointing-game summary reduces a hit-rate matrix exactly like accuracies
pg_metrics = acc_bwt


@torch.no_grad()
def predict(model, images: torch.Tensor, chunk: int = 512) -> np.ndarray:
    """Predicted global class ids (argmax over every class seen)."""
    out = []
    for i in range(0, len(images), chunk):
        logits, _ = model(images[i:i + chunk])
        out.append(logits.argmax(dim=1))
    pos = torch.cat(out).numpy()
    return np.asarray(model.classes_seen)[pos]


def evaluate(model, test_sets) -> list[float]:
    """Row of the accuracy matrix: accuracy on each given test split."""
    row = []
    for i, split in enumerate(test_sets, start=1):
        if split is None or len(split) == 0:
            raise ValueError(f"missing test set for task {i}")
        preds = predict(model, split.image_tensor(model.dtype))
        row.append(float(np.mean(preds == split.labels)))
    return row


def pointing_hits(maps: torch.Tensor, masks) -> np.ndarray:
    """Hit flags for N x u x v maps against N x H x W masks.

    Maps are bilinearly upsampled to the mask size; a sample is a hit when
    any location attaining the map's maximum lies inside the mask. Values
    within a relative 1e-6 of the maximum count as attaining it, so float
    rounding in the upsampling cannot flip a decision under rescaling.
    All-zero maps are misses.
    """
    masks = torch.from_numpy(np.array(masks, dtype=bool))
    maps = maps.detach()
    H, W = masks.shape[-2:]
    u, v = maps.shape[-2:]
    if H < u or W < v:
        raise ValueError(f"mask {H}x{W} is smaller than saliency map {u}x{v}")
    if (u, v) != (H, W):
        maps = F.interpolate(maps[:, None], size=(H, W), mode="bilinear", align_corners=False)[:, 0]
    if maps.shape != masks.shape:
        raise ValueError(f"resolution mismatch: {tuple(maps.shape)} vs {tuple(masks.shape)}")
    flat = maps.reshape(len(maps), -1)
    peak = flat.max(dim=1, keepdim=True).values
    at_peak = flat >= peak * (1 - PEAK_RTOL)
    inside = (at_peak & masks.reshape(len(masks), -1)).any(dim=1)
    return (inside & (peak[:, 0] > 0)).numpy()


def pointing_hit(saliency: SaliencyMap | torch.Tensor, mask) -> bool:
    values = saliency.values if isinstance(saliency, SaliencyMap) else saliency
    mask = np.asarray(mask, dtype=bool)
    if not mask.any() or mask.all():
        raise ValueError("pointing game needs a mask with both object and background pixels")
    return bool(pointing_hits(values[None], mask[None])[0])


@dataclass
class PointingStats:
    hits: int = 0
    misses: int = 0
    tp: int = 0   # correct prediction, hit
    fp: int = 0   # correct prediction, miss
    fn: int = 0   # wrong prediction, hit
    tn: int = 0   # wrong prediction, miss

    @classmethod
    def from_outcomes(cls, correct, hit) -> "PointingStats":
        c = np.asarray(correct, dtype=bool)
        h = np.asarray(hit, dtype=bool)
        return cls(hits=int(h.sum()), misses=int((~h).sum()), tp=int((c & h).sum()),
                   fp=int((c & ~h).sum()), fn=int((~c & h).sum()), tn=int((~c & ~h).sum()))

    @property
    def count(self) -> int:
        return self.hits + self.misses

    @property
    def hit_rate(self) -> float:
        return self.hits / self.count if self.count else float("nan")


def precision_recall(stats: PointingStats) -> tuple[float | None, float | None]:
    """tp/(tp+fp) and tp/(tp+fn); ``None`` marks an empty denominator."""
    pr = stats.tp / (stats.tp + stats.fp) if stats.tp + stats.fp > 0 else None
    re = stats.tp / (stats.tp + stats.fn) if stats.tp + stats.fn > 0 else None
    return pr, re


@dataclass
class TaskEvaluation:
    labels: np.ndarray
    predictions: np.ndarray
    hits: np.ndarray | None

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.predictions == self.labels))

    @property
    def stats(self) -> PointingStats | None:
        if self.hits is None:
            return None
        return PointingStats.from_outcomes(self.predictions == self.labels, self.hits)


def evaluate_split(model, split, xai: SaliencySpec | None = None,
                   generator: torch.Generator | None = None, chunk: int = 256) -> TaskEvaluation:
    """Predictions and (with masks and ``xai``) pointing-game hits, in split order.

    Saliencies target the ground-truth class of every sample.
    """
    images = split.image_tensor(model.dtype)
    preds = predict(model, images)
    hits = None
    if xai is not None and split.has_masks:
        targets = model.head_index(split.labels)
        parts = []
        for i in range(0, len(images), chunk):
            maps = compute_saliency(model, images[i:i + chunk], targets[i:i + chunk], xai, generator)
            parts.append(pointing_hits(maps, split.masks[i:i + chunk]))
        hits = np.concatenate(parts)
    return TaskEvaluation(split.labels.copy(), preds, hits)


def saliency_progression(image: torch.Tensor, label: int, checkpoints: dict, xai: SaliencySpec,
                         out_path=None, mask=None, title: str | None = None) -> list[dict]:
    """Saliency of one image under a sequence of archived models.

    ``checkpoints`` maps a task index to the model saved after that task.
    Writes a 2-row PNG grid (overlay with the verdict, raw map) when
    ``out_path`` is given and returns one record per panel.
    """
    records = []
    panels = []
    x = image[None] if image.ndim == 3 else image
    for k in sorted(checkpoints):
        model = checkpoints[k]
        if model is None:
            raise FileNotFoundError(f"missing checkpoint for task {k}")
        x_k = x.to(model.dtype)
        pred = int(predict(model, x_k)[0])
        if label in model.classes_seen:
            g = torch.Generator().manual_seed(0)
            m = compute_saliency(model, x_k, model.head_index([label]), xai, generator=g)[0].detach()
        else:
            m = torch.zeros(model.spec.layer_output_size(model.spec.target, model.input_size))
        up = F.interpolate(m[None, None].float(), size=tuple(x.shape[-2:]), mode="bilinear",
                           align_corners=False)[0, 0]
        verdict = "correct" if pred == label else "incorrect"
        rec = {"checkpoint": k, "label": int(label), "prediction": pred, "correct": pred == label,
               "annotation": verdict}
        if mask is not None:
            rec["hit"] = bool(pointing_hits(m[None], np.asarray(mask)[None])[0])
        records.append(rec)
        panels.append((k, up.numpy(), verdict))
    if out_path is not None:
        _write_progression(x[0].float().numpy().transpose(1, 2, 0), panels, out_path, title)
    return records


def _write_progression(img: np.ndarray, panels, out_path, title) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(panels)
    fig, axes = plt.subplots(2, n, figsize=(2.4 * n, 4.8), squeeze=False)
    for j, (k, up, verdict) in enumerate(panels):
        ax = axes[0, j]
        ax.imshow(np.clip(img, 0, 1))
        ax.imshow(up, cmap="jet", alpha=0.5, vmin=0, vmax=max(float(up.max()), 1e-12))
        ax.set_title(f"task {k}: {verdict}", fontsize=9, color="green" if verdict == "correct" else "red")
        peak = np.unravel_index(np.argmax(up), up.shape)
        ax.plot(peak[1], peak[0], "r+", markersize=10)
        axes[1, j].imshow(up, cmap="gray")
        for a in axes[:, j]:
            a.set_xticks([])
            a.set_yticks([])
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, format="png", metadata={"Software": None})
    plt.close(fig)
