"""Gradient-based explanations: vanilla backprop, SmoothGrad and Grad-CAM.

Batched functions (``*_batch``, ``compute_saliency``) return N x u x v
tensors and can keep the autograd graph so that a loss on the maps is
differentiable in the model parameters. The single-image functions wrap
them into ``SaliencyMap`` records.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import torch
from torch.nn import functional as F

from .errors import ConfigError

METHODS = ("vanilla_bp", "smoothgrad", "grad_cam")


@dataclass(frozen=True)
class SaliencySpec:
    method: Literal["vanilla_bp", "smoothgrad", "grad_cam"] = "grad_cam"
    smoothgrad_n: int = 40
    smoothgrad_sigma: float = 0.15
    target_layer: str | None = None
    normalize: bool = True

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown saliency method {self.method!r}; expected one of {METHODS}")
        if self.smoothgrad_n < 1:
            raise ConfigError("smoothgrad_n must be >= 1")
        if self.smoothgrad_sigma < 0:
            raise ConfigError("smoothgrad_sigma must be >= 0")


@dataclass(frozen=True)
class SaliencyMap:
    values: torch.Tensor
    method: str
    producing_task: int = 0

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.values.shape)


def normalize_maps(maps: torch.Tensor) -> torch.Tensor:
    """Per-map min-max scaling of non-negative N x u x v maps to [0, 1].

    All-zero maps stay zero; constant positive maps become all ones.
    Differentiable wherever the min and max are unique.
    """
    flat = maps.reshape(maps.shape[0], -1)
    mx = flat.max(dim=1).values
    mn = flat.min(dim=1).values
    span = mx - mn
    ok = span > 0
    safe = torch.where(ok, span, torch.ones_like(span))
    scaled = (flat - mn[:, None]) / safe[:, None]
    flat_case = (mx > 0).to(maps.dtype)[:, None].expand_as(flat)
    return torch.where(ok[:, None], scaled, flat_case).reshape(maps.shape)


def _logits(model, x: torch.Tensor) -> torch.Tensor:
    out = model(x)
    return out[0] if isinstance(out, tuple) else out


def _check_targets(logits: torch.Tensor, targets: torch.Tensor) -> None:
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= logits.shape[1]):
        raise ValueError(f"class index out of range for a {logits.shape[1]}-way head: "
                         f"{targets.tolist()}")


def _class_scores(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    _check_targets(logits, targets)
    return logits.gather(1, targets.view(-1, 1)).sum()


def mean_of_samples(g: torch.Tensor) -> torch.Tensor:
    """Mean over dim 0, computed as g[0] + sum(g - g[0]) / n.

    The shifted form returns g[0] bit-exactly when all samples are equal,
    so constant-gradient models give identical maps for every (n, sigma).
    """
    return g[0] + (g - g[0]).sum(dim=0) / g.shape[0]


def smooth_gradient(fn, x: torch.Tensor, n: int, noise_std, generator: torch.Generator | None = None,
                    create_graph: bool = False) -> torch.Tensor:
    """Average of d fn / d x over ``n`` Gaussian-perturbed copies of ``x``.

    ``fn`` maps a batch shaped like ``x`` to per-sample scalars that are
    summed before differentiation; ``noise_std`` broadcasts against ``x``.
    A zero ``noise_std`` evaluates the gradient at ``x`` itself.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    base = x.detach()
    copies = base.unsqueeze(0).expand(n, *base.shape)
    std = torch.as_tensor(noise_std, dtype=base.dtype)
    if bool((std > 0).any()):
        noise = torch.randn(copies.shape, generator=generator, dtype=base.dtype)
        copies = copies + noise * std
    xs = copies.reshape(n * base.shape[0], *base.shape[1:]).clone().requires_grad_(True)
    out = fn(xs)
    (g,) = torch.autograd.grad(out.sum(), xs, create_graph=create_graph)
    return mean_of_samples(g.reshape(n, *base.shape))


def _collapse(grads: torch.Tensor, normalize: bool) -> torch.Tensor:
    # N x C x H x W -> N x H x W, max over channels of |gradient|
    maps = grads.abs().amax(dim=1)
    return normalize_maps(maps) if normalize else maps


def vanilla_bp_batch(model, images: torch.Tensor, targets: torch.Tensor,
                     create_graph: bool = False, normalize: bool = True) -> torch.Tensor:
    x = images.detach().clone().requires_grad_(True)
    score = _class_scores(_logits(model, x), targets)
    (g,) = torch.autograd.grad(score, x, create_graph=create_graph)
    return _collapse(g, normalize)


def smoothgrad_batch(model, images: torch.Tensor, targets: torch.Tensor, n: int = 40,
                     sigma: float = 0.15, generator: torch.Generator | None = None,
                     create_graph: bool = False, normalize: bool = True) -> torch.Tensor:
    """SmoothGrad maps; noise std is ``sigma`` times each image's (max - min) range."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = images.detach()
    rng = (x.amax(dim=(1, 2, 3)) - x.amin(dim=(1, 2, 3))).view(-1, 1, 1, 1)
    reps = targets.repeat(n)

    def score(batch):
        logits = _logits(model, batch)
        _check_targets(logits, reps)
        return logits.gather(1, reps.view(-1, 1))

    g = smooth_gradient(score, x, n, sigma * rng, generator, create_graph)
    return _collapse(g, normalize)


def grad_cam_from_maps(activations: torch.Tensor, gradients: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Grad-CAM weights and rectified maps from N x K x u x v activations and their gradients.

    Returns ``(alpha, cam)`` with alpha N x K (spatial mean of the
    gradients) and cam = ReLU(sum_k alpha_k A^k), N x u x v.
    """
    alpha = gradients.mean(dim=(2, 3))
    cam = F.relu((alpha[:, :, None, None] * activations).sum(dim=1))
    return alpha, cam


def grad_cam_batch(model, images: torch.Tensor, targets: torch.Tensor, target_layer: str | None = None,
                   create_graph: bool = False, normalize: bool = True, return_alpha: bool = False):
    if target_layer is not None:
        logits, acts = model(images, layer=target_layer)
    else:
        logits, acts = model(images)
    if acts is None:
        raise ValueError("model exposes no target-layer activations")
    score = _class_scores(logits, targets)
    (g,) = torch.autograd.grad(score, acts, create_graph=create_graph, allow_unused=True)
    if g is None:
        g = torch.zeros_like(acts)
    alpha, cam = grad_cam_from_maps(acts, g)
    if normalize:
        cam = normalize_maps(cam)
    return (cam, alpha) if return_alpha else cam


def compute_saliency(model, images: torch.Tensor, targets: torch.Tensor, spec: SaliencySpec,
                     generator: torch.Generator | None = None, create_graph: bool = False) -> torch.Tensor:
    """Maps for a batch under ``spec``; ``targets`` are logit positions, not class ids."""
    if spec.method == "vanilla_bp":
        return vanilla_bp_batch(model, images, targets, create_graph, spec.normalize)
    if spec.method == "smoothgrad":
        return smoothgrad_batch(model, images, targets, spec.smoothgrad_n, spec.smoothgrad_sigma,
                                generator, create_graph, spec.normalize)
    if spec.method == "grad_cam":
        return grad_cam_batch(model, images, targets, spec.target_layer, create_graph, spec.normalize)
    raise ConfigError(f"unknown saliency method {spec.method!r}")


def _single(image: torch.Tensor) -> torch.Tensor:
    return image.unsqueeze(0) if image.ndim == 3 else image


def _wrap(maps: torch.Tensor, method: str, producing_task: int) -> SaliencyMap:
    return SaliencyMap(maps[0].detach(), method, producing_task)


def vanilla_bp(model, image: torch.Tensor, class_idx: int, normalize: bool = True,
               producing_task: int = 0) -> SaliencyMap:
    t = torch.tensor([class_idx])
    return _wrap(vanilla_bp_batch(model, _single(image), t, normalize=normalize), "vanilla_bp", producing_task)


def smoothgrad(model, image: torch.Tensor, class_idx: int, n: int = 40, sigma: float = 0.15,
               generator: torch.Generator | None = None, normalize: bool = True,
               producing_task: int = 0) -> SaliencyMap:
    t = torch.tensor([class_idx])
    maps = smoothgrad_batch(model, _single(image), t, n, sigma, generator, normalize=normalize)
    return _wrap(maps, "smoothgrad", producing_task)


def grad_cam(model, image: torch.Tensor, class_idx: int, target_layer: str | None = None,
             normalize: bool = True, producing_task: int = 0) -> SaliencyMap:
    t = torch.tensor([class_idx])
    maps = grad_cam_batch(model, _single(image), t, target_layer, normalize=normalize)
    return _wrap(maps, "grad_cam", producing_task)


def upsample(smap: SaliencyMap | torch.Tensor, to: tuple[int, int]):
    """Bilinear upsampling (half-pixel centers) of a u x v map to H x W."""
    values = smap.values if isinstance(smap, SaliencyMap) else smap
    u, v = values.shape
    H, W = to
    if H < u or W < v:
        raise ValueError(f"cannot upsample a {u}x{v} map to the smaller size {H}x{W}")
    if (H, W) == (u, v):
        out = values
    else:
        out = F.interpolate(values[None, None], size=(H, W), mode="bilinear", align_corners=False)[0, 0]
    if isinstance(smap, SaliencyMap):
        return SaliencyMap(out, smap.method, smap.producing_task)
    return out


def memory_cost(spec: SaliencySpec, model_spec, input_size: tuple[int, int], bytes_per_value: int = 4) -> int:
    """Bytes needed to store one saliency map."""
    H, W = input_size
    if spec.method in ("vanilla_bp", "smoothgrad"):
        return H * W * bytes_per_value
    layer = spec.target_layer or model_spec.target
    u, v = model_spec.layer_output_size(layer, input_size)
    return u * v * bytes_per_value
