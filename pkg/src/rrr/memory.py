"""Dual replay memory: raw samples plus index-aligned frozen reference saliencies."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import container
from .errors import EmptyBufferError
from .rng import substream_seed
from .saliency import SaliencyMap, SaliencySpec, compute_saliency

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BufferEntry:
    image: torch.Tensor          # C x H x W
    task_id: int
    label: int                   # global class id
    saliency: SaliencyMap        # reference map, frozen when the task finished
    source_index: int = -1       # position in the task's training split
    noise_seed: int | None = None


@dataclass
class DualBuffer:
    capacity: int
    entries: list[BufferEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def replay(self) -> list[tuple[torch.Tensor, int, int]]:
        """The raw-sample memory: (image, task_id, label) per entry."""
        return [(e.image, e.task_id, e.label) for e in self.entries]

    @property
    def references(self) -> list[SaliencyMap]:
        """The explanation memory, index-aligned with ``replay``."""
        return [e.saliency for e in self.entries]

    @property
    def method(self) -> str | None:
        return self.entries[0].saliency.method if self.entries else None

    def per_task_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for e in self.entries:
            counts[e.task_id] = counts.get(e.task_id, 0) + 1
        return dict(sorted(counts.items()))


def task_quotas(capacity: int, num_tasks: int) -> dict[int, int]:
    """floor(m/k) slots per task; the remainder goes to the earliest tasks."""
    base, rem = divmod(capacity, num_tasks)
    return {t: base + (1 if t <= rem else 0) for t in range(1, num_tasks + 1)}


def balanced_choice(labels, n: int, rng: np.random.Generator) -> np.ndarray:
    """Pick ``n`` indices without replacement, per-class counts within one of each other.

    Classes with too few samples give their unused share to the others.
    Returned indices are sorted.
    """
    labels = np.asarray(labels)
    n = min(n, len(labels))
    classes = np.unique(labels)
    avail = {c: np.flatnonzero(labels == c) for c in classes}
    alloc = {c: 0 for c in classes}
    order = list(rng.permutation(classes))
    left = n
    while left > 0:
        open_classes = [c for c in order if alloc[c] < len(avail[c])]
        share, extra = divmod(left, len(open_classes))
        for j, c in enumerate(open_classes):
            give = min(share + (1 if j < extra else 0), len(avail[c]) - alloc[c])
            alloc[c] += give
            left -= give
    picked = [rng.choice(avail[c], size=alloc[c], replace=False) for c in classes if alloc[c]]
    return np.sort(np.concatenate(picked)) if picked else np.empty(0, dtype=np.int64)


def reference_saliencies(model, images: torch.Tensor, labels, xai: SaliencySpec,
                         noise_seeds=None, chunk: int = 256) -> torch.Tensor:
    """Detached maps for buffer samples, targeting each sample's ground-truth class."""
    targets = model.head_index(labels)
    if xai.method == "smoothgrad":
        maps = []
        for img, t, s in zip(images, targets, noise_seeds):
            g = torch.Generator().manual_seed(int(s))
            maps.append(compute_saliency(model, img[None], t.view(1), xai, generator=g).detach())
        return torch.cat(maps)
    out = [compute_saliency(model, images[i:i + chunk], targets[i:i + chunk], xai).detach()
           for i in range(0, len(images), chunk)]
    return torch.cat(out)


def update(buffer: DualBuffer, model, task_data, xai: SaliencySpec, rng: np.random.Generator,
           per_class: int | None = None, saliency_seed: int = 0) -> DualBuffer:
    """Admit samples of the task just finished and rebalance the memory.

    Standard mode equalizes the buffer to floor(m/k) samples per seen task:
    older tasks are class-balanced down-sampled and the new task contributes
    its own quota. With ``per_class`` set (few-shot protocol) a fixed number
    of samples per class of the new task is added and nothing is evicted.
    Reference saliencies come from ``model`` as it is now.
    """
    k = task_data.task_id
    if buffer.capacity == 0:
        return buffer
    if buffer.entries and buffer.method != xai.method:
        raise ValueError(f"buffer holds {buffer.method} maps, cannot add {xai.method} maps")
    train = task_data.train
    labels = train.labels

    if per_class is not None:
        idx = []
        for c in task_data.class_ids:
            pool = np.flatnonzero(labels == c)
            if len(pool) < per_class:
                log.warning("task %d class %d: only %d samples for a per-class quota of %d",
                            k, c, len(pool), per_class)
            idx.extend(rng.choice(pool, size=min(per_class, len(pool)), replace=False))
        idx = np.sort(np.asarray(idx, dtype=np.int64))
        if len(buffer) + len(idx) > buffer.capacity:
            raise ValueError(
                f"per-class quota overflows capacity: {len(buffer)} + {len(idx)} > {buffer.capacity}")
        kept = list(buffer.entries)
    else:
        seen = sorted(set(buffer.per_task_counts()) | {k})
        quotas = task_quotas(buffer.capacity, len(seen))
        quota_of = {t: quotas[j + 1] for j, t in enumerate(seen)}
        kept = []
        for t in seen:
            if t == k:
                continue
            mine = [e for e in buffer.entries if e.task_id == t]
            if len(mine) > quota_of[t]:
                keep = balanced_choice([e.label for e in mine], quota_of[t], rng)
                mine = [mine[i] for i in keep]
            kept.extend(mine)
        want = quota_of[k]
        if len(train) < want:
            log.warning("task %d has %d training samples, fewer than its quota %d; storing all",
                        k, len(train), want)
        idx = balanced_choice(labels, want, rng)

    images = train.image_tensor(model.dtype)[torch.from_numpy(idx)] if len(idx) else None
    new_entries = []
    if len(idx):
        seeds = [substream_seed(saliency_seed, f"{k}:{i}") for i in idx]
        maps = reference_saliencies(model, images, labels[idx], xai, seeds)
        for j, i in enumerate(idx):
            new_entries.append(BufferEntry(
                image=images[j].clone(), task_id=k, label=int(labels[i]),
                saliency=SaliencyMap(maps[j].clone(), xai.method, k), source_index=int(i),
                noise_seed=seeds[j] if xai.method == "smoothgrad" else None))
    buffer.entries = kept + new_entries
    return buffer


@dataclass
class ReplayBatch:
    images: torch.Tensor
    labels: torch.Tensor
    saliencies: torch.Tensor
    task_ids: torch.Tensor
    method: str
    indices: np.ndarray


def sample_batch(buffer: DualBuffer, batch_size: int, rng: np.random.Generator) -> ReplayBatch:
    """Uniform draw with replacement; larger-than-buffer batches are fine."""
    if not buffer.entries:
        raise EmptyBufferError("cannot sample from an empty buffer")
    idx = rng.integers(0, len(buffer.entries), size=batch_size)
    es = [buffer.entries[i] for i in idx]
    return ReplayBatch(
        images=torch.stack([e.image for e in es]),
        labels=torch.tensor([e.label for e in es], dtype=torch.long),
        saliencies=torch.stack([e.saliency.values for e in es]),
        task_ids=torch.tensor([e.task_id for e in es], dtype=torch.long),
        method=buffer.method,
        indices=idx,
    )


def all_entries(buffer: DualBuffer) -> ReplayBatch:
    if not buffer.entries:
        raise EmptyBufferError("buffer is empty")
    es = buffer.entries
    return ReplayBatch(
        images=torch.stack([e.image for e in es]),
        labels=torch.tensor([e.label for e in es], dtype=torch.long),
        saliencies=torch.stack([e.saliency.values for e in es]),
        task_ids=torch.tensor([e.task_id for e in es], dtype=torch.long),
        method=buffer.method,
        indices=np.arange(len(es)),
    )


def save_buffer(buffer: DualBuffer, path) -> None:
    arrays = {}
    meta_entries = []
    for i, e in enumerate(buffer.entries):
        arrays[f"image/{i:06d}"] = e.image.numpy()
        arrays[f"saliency/{i:06d}"] = e.saliency.values.numpy()
        meta_entries.append({
            "label": e.label, "task_id": e.task_id, "source_index": e.source_index,
            "method": e.saliency.method, "producing_task": e.saliency.producing_task,
            "resolution": list(e.saliency.resolution), "noise_seed": e.noise_seed,
        })
    container.save(path, arrays, {"kind": "dual_buffer", "capacity": buffer.capacity,
                                  "count": len(buffer.entries), "entries": meta_entries})


def load_buffer(path) -> DualBuffer:
    arrays, meta = container.load(path)
    if meta.get("kind") != "dual_buffer":
        raise ValueError(f"{path} is not a buffer checkpoint")
    entries = []
    for i, m in enumerate(meta["entries"]):
        sal = torch.from_numpy(arrays[f"saliency/{i:06d}"])
        if list(sal.shape) != m["resolution"]:
            raise ValueError(f"{path}: entry {i} saliency shape mismatch")
        entries.append(BufferEntry(
            image=torch.from_numpy(arrays[f"image/{i:06d}"]), task_id=m["task_id"], label=m["label"],
            saliency=SaliencyMap(sal, m["method"], m["producing_task"]),
            source_index=m["source_index"], noise_seed=m["noise_seed"]))
    return DualBuffer(meta["capacity"], entries)
