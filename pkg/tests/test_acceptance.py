"""Acceptance suite: one test per criterion, named ``test_criterion_NN_<name>``.

The terminal summary (see conftest) prints one PASS/FAIL line per criterion.
Every oracle here is computed independently of the code under test:
analytic formulas, finite differences or explicit loops.
"""
import copy
import json
import time

import numpy as np
import pytest
import torch
import yaml
from torch.nn import functional as F

from rrr.cli import main
from rrr.config import ExperimentConfig
from rrr.evaluation import (PointingStats, acc_bwt, evaluate_split, pg_metrics, pointing_hits,
                            precision_recall)
from rrr.experiment import run_experiment
from rrr.memory import DualBuffer, all_entries, update
from rrr.model import ClassifierSpec, build_classifier, expand_head
from rrr.saliency import (SaliencySpec, compute_saliency, grad_cam, grad_cam_batch, memory_cost,
                          normalize_maps, smoothgrad, smoothgrad_batch, vanilla_bp)
from rrr.scenario import ScenarioSpec, build_scenario
from rrr.strategies import (EwcAnchor, RegularizerState, TrainConfig, TrainRngs, ewc_penalty, lwf_distill,
                            rrr_loss, task_loss, train_task)

from conftest import TINY_SPEC, make_task, tiny_model

DT = torch.float64


# --- 1 ----------------------------------------------------------------------

def _rest_of_network(model, A, layer, c):
    """Class score as a function of the activations of ``layer`` (forward continued by hand)."""
    names = model.spec.layer_names
    x = A
    for name, conv in zip(names[names.index(layer) + 1:], model.convs[names.index(layer) + 1:]):
        x = F.relu(conv(x))
    return float(model.head(x.mean(dim=(2, 3)))[0, c])


def _brute_force_grad_cam(model, x, c, layer):
    """Grad-CAM by explicit loops: dy/dA by central differences, then the weighted sum."""
    with torch.no_grad():
        _, A = model(x, layer=layer)
        K, u, v = A.shape[1:]
        eps = 1e-6
        dA = np.zeros((K, u, v))
        for k in range(K):
            for i in range(u):
                for j in range(v):
                    plus, minus = A.clone(), A.clone()
                    plus[0, k, i, j] += eps
                    minus[0, k, i, j] -= eps
                    dA[k, i, j] = (_rest_of_network(model, plus, layer, c)
                                   - _rest_of_network(model, minus, layer, c)) / (2 * eps)
        a = A[0].numpy()
        alpha = np.array([sum(dA[k, i, j] for i in range(u) for j in range(v)) / (u * v) for k in range(K)])
        cam = np.zeros((u, v))
        for i in range(u):
            for j in range(v):
                cam[i, j] = max(0.0, sum(alpha[k] * a[k, i, j] for k in range(K)))
    return alpha, cam


def test_criterion_01_grad_cam_oracle():
    t0 = time.time()
    spec = ClassifierSpec(conv_blocks=((4, 3, 1), (5, 3, 2), (6, 3, 1)), dtype="float64")
    g = np.random.default_rng(101)
    for case in range(20):
        model = tiny_model(seed=case, n_classes=4, spec=spec)
        x = torch.from_numpy(g.uniform(size=(1, 3, 8, 8)))
        c = int(g.integers(0, 4))
        layer = ("conv2", "conv3")[case % 2]
        cam, alpha = grad_cam_batch(model, x, torch.tensor([c]), target_layer=layer, normalize=False,
                                    return_alpha=True)
        o_alpha, o_cam = _brute_force_grad_cam(model, x, c, layer)
        np.testing.assert_allclose(alpha[0].detach().numpy(), o_alpha, rtol=1e-6, atol=1e-10)
        np.testing.assert_allclose(cam[0].detach().numpy(), o_cam, rtol=1e-6, atol=1e-10)
        # normalized map equals min-max scaling of the oracle map
        if o_cam.max() > o_cam.min():
            ref = (o_cam - o_cam.min()) / (o_cam.max() - o_cam.min())
            got = grad_cam(model, x[0], c, target_layer=layer).values.numpy()
            np.testing.assert_allclose(got, ref, rtol=1e-6, atol=1e-8)
    assert time.time() - t0 < 10


# --- 2 ----------------------------------------------------------------------

def _flat_params(model):
    return [p for p in model.parameters()]


def _fd_check(model, loss_fn, eps=1e-5, rtol=1e-3, atol=1e-8):
    params = _flat_params(model)
    loss = loss_fn()
    auto = torch.autograd.grad(loss, params, allow_unused=True)
    auto = torch.cat([(a if a is not None else torch.zeros_like(p)).reshape(-1) for a, p in zip(auto, params)])
    fd = []
    for p in params:
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            lp = float(loss_fn().detach())
            flat[i] = orig - eps
            lm = float(loss_fn().detach())
            flat[i] = orig
            fd.append((lp - lm) / (2 * eps))
    fd = torch.tensor(fd, dtype=DT)
    torch.testing.assert_close(auto.detach(), fd, rtol=rtol, atol=atol)
    return auto.numel()


def test_criterion_02_gradient_checks():
    t0 = time.time()
    model = tiny_model(seed=7, n_classes=3)
    n_params = sum(p.numel() for p in model.parameters())
    assert n_params <= 1000
    g = np.random.default_rng(2)
    x = torch.from_numpy(g.uniform(size=(4, 3, 8, 8)))
    y = torch.tensor([0, 1, 2, 1])

    _fd_check(model, lambda: task_loss(model(x)[0], y))

    # references from a different model so that the L1 term sits away from its kink
    other = tiny_model(seed=99, n_classes=3)
    for method in ("vanilla_bp", "smoothgrad", "grad_cam"):
        xai = SaliencySpec(method, smoothgrad_n=3, smoothgrad_sigma=0.1)
        buf = DualBuffer(4)
        task = make_task(1, [0, 1, 2], per_class=2, seed=5)
        update(buf, other, task, xai, np.random.default_rng(0))
        batch = all_entries(buf)

        def loss():
            return rrr_loss(model, batch, xai, generator=torch.Generator().manual_seed(11))

        _fd_check(model, loss)

    anchor = EwcAnchor({k: v.detach() + 0.1 for k, v in model.named_parameters()},
                       {k: torch.rand(v.shape, dtype=DT) for k, v in model.named_parameters()})
    _fd_check(model, lambda: ewc_penalty(model.parameter_dict(), [anchor], 3.0))

    old = tiny_model(seed=8, n_classes=2)
    with torch.no_grad():
        old_logits = old(x)[0]
    _fd_check(model, lambda: lwf_distill(model(x)[0][:, :2], old_logits, 2.0))
    assert time.time() - t0 < 60


# --- 3 ----------------------------------------------------------------------

class LinearNet(torch.nn.Module):
    def __init__(self, n_classes, seed):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.W = torch.nn.Parameter(torch.randn(n_classes, 3 * 8 * 8, generator=g, dtype=DT))
        self.b = torch.nn.Parameter(torch.randn(n_classes, generator=g, dtype=DT))

    def forward(self, x):
        return x.flatten(1) @ self.W.T + self.b


def test_criterion_03_smoothgrad_degeneracy():
    g = np.random.default_rng(3)
    for case in range(50):
        model = tiny_model(seed=case, n_classes=3)
        x = torch.from_numpy(g.uniform(size=(3, 8, 8)))
        c = int(g.integers(0, 3))
        for normalize in (False, True):
            a = smoothgrad(model, x, c, n=1, sigma=0.0, normalize=normalize).values
            b = vanilla_bp(model, x, c, normalize=normalize).values
            assert torch.equal(a, b), case

    # a linear model has a constant input gradient, so (n, sigma) cannot matter
    lin = LinearNet(4, seed=0)
    x = torch.from_numpy(g.uniform(size=(5, 3, 8, 8)))
    t = torch.tensor([0, 1, 2, 3, 0])
    ref = smoothgrad_batch(lin, x, t, n=1, sigma=0.0)
    for n, sigma in [(1, 0.3), (7, 0.0), (25, 0.15), (40, 1.0)]:
        got = smoothgrad_batch(lin, x, t, n=n, sigma=sigma, generator=torch.Generator().manual_seed(n))
        assert torch.equal(got, ref), (n, sigma)


# --- 4 ----------------------------------------------------------------------

@pytest.mark.parametrize("m", [10, 50, 200])
def test_criterion_04_buffer_law(m):
    xai = SaliencySpec("grad_cam")
    model = tiny_model(seed=4, n_classes=0)
    buf = DualBuffer(m)
    checkpoints = {}
    rngs = TrainRngs(torch.Generator().manual_seed(0), np.random.default_rng(0),
                     torch.Generator().manual_seed(1))
    cfg = TrainConfig(strategy="er", epochs=1, batch_size=16, lr=1e-2)
    rng = np.random.default_rng(4)
    for k in range(1, 6):
        classes = [2 * k - 2, 2 * k - 1]
        task = make_task(k, classes, per_class=max(25, m // 2), seed=40)
        expand_head(model, classes)
        train_task(model, task, buf, cfg, xai, RegularizerState(), rngs)
        update(buf, model, task, xai, rng)
        checkpoints[k] = copy.deepcopy(model)

        assert len(buf) <= m
        counts = buf.per_task_counts()
        assert sorted(counts) == list(range(1, k + 1))
        assert all(abs(c - m // k) <= 1 for c in counts.values()), counts
        assert len(buf.replay) == len(buf.references)
        for e in buf.entries:
            producer = checkpoints[e.saliency.producing_task]
            again = grad_cam(producer, e.image, int(producer.head_index([e.label])[0])).values
            torch.testing.assert_close(again, e.saliency.values, rtol=0, atol=1e-6)


# --- 5 ----------------------------------------------------------------------

def _small_config(**train):
    return ExperimentConfig.model_validate(dict(
        seed=5, buffer_capacity=8, pointing_game=False, archive_checkpoints=False,
        scenario=dict(total_classes=6, num_tasks=3, image_size=[16, 16], train_per_class=10,
                      test_per_class=4),
        model=dict(conv_blocks=[[4, 3, 2], [8, 3, 2]]),
        train=dict(epochs=2, batch_size=8, fisher_samples=16, **train)))


@pytest.mark.parametrize("strategy", ["er", "ewc"])
def test_criterion_05_composition_neutrality(strategy):
    base = run_experiment(_small_config(strategy=strategy, rrr_enabled=False), write=False)
    zero = run_experiment(_small_config(strategy=strategy, rrr_enabled=True, rrr_lambda=0.0), write=False)
    pb, pz = dict(base.model.named_parameters()), dict(zero.model.named_parameters())
    assert pb.keys() == pz.keys()
    for name in pb:
        assert torch.equal(pb[name], pz[name]), name
    assert all(r.L_RRR == 0 for r in zero.reports)


# --- 6 ----------------------------------------------------------------------

def test_criterion_06_metric_formulas():
    R = [[0.9], [0.7, 0.8]]
    for fn in (acc_bwt, pg_metrics):
        acc, bwt = fn(R)
        assert acc == pytest.approx((0.7 + 0.8) / 2, abs=1e-12)
        assert bwt == pytest.approx(0.7 - 0.9, abs=1e-12)
    # three tasks, oracle by explicit sums
    R3 = [[0.9], [0.6, 0.8], [0.5, 0.7, 0.95]]
    acc, bwt = acc_bwt(R3)
    assert acc == pytest.approx((0.5 + 0.7 + 0.95) / 3, abs=1e-12)
    assert bwt == pytest.approx(((0.5 - 0.9) + (0.7 - 0.8)) / 2, abs=1e-12)
    # diagonal equal to the final row means no forgetting
    assert acc_bwt([[0.4], [0.1, 0.6], [0.4, 0.6, 0.3]])[1] == 0.0
    pr, re = precision_recall(PointingStats(tp=2, fp=1, fn=1))
    assert pr == pytest.approx(2 / 3, abs=1e-12) and re == pytest.approx(2 / 3, abs=1e-12)


# --- 7 ----------------------------------------------------------------------

# Desk-scale schedule, chosen on held-out seeds (see the decisions ledger).
DESK = dict(epochs=15, lr=3e-3, batch_size=32, train_per_class=100, test_per_class=30, rrr_lambda=0.1)
SEEDS = range(5)


def _desk_config(seed, rrr):
    return ExperimentConfig.model_validate(dict(
        seed=seed, buffer_capacity=50, pointing_game=False, archive_checkpoints=False,
        scenario=dict(total_classes=10, num_tasks=5, image_size=[32, 32],
                      train_per_class=DESK["train_per_class"], test_per_class=DESK["test_per_class"]),
        saliency=dict(method="grad_cam"),
        train=dict(strategy="er", rrr_enabled=rrr, rrr_lambda=DESK["rrr_lambda"], epochs=DESK["epochs"],
                   lr=DESK["lr"], batch_size=DESK["batch_size"])))


@pytest.mark.slow
def test_criterion_07_directional_reproduction():
    t0 = time.time()
    acc = {False: [], True: []}
    drift = {False: [], True: []}
    for seed in SEEDS:
        for rrr in (False, True):
            s = run_experiment(_desk_config(seed, rrr), write=False).summary
            acc[rrr].append(s["ACC"])
            drift[rrr].append(s["final_rrr_loss"])
    print(f"\nER      ACC per seed {np.round(acc[False], 3).tolist()} mean {np.mean(acc[False]):.4f}"
          f" drift {np.mean(drift[False]):.4f}")
    print(f"ER+RRR  ACC per seed {np.round(acc[True], 3).tolist()} mean {np.mean(acc[True]):.4f}"
          f" drift {np.mean(drift[True]):.4f}")
    assert time.time() - t0 < 15 * 60
    assert np.mean(drift[True]) < np.mean(drift[False])
    assert np.mean(acc[True]) >= np.mean(acc[False])


# --- 8 ----------------------------------------------------------------------

def test_criterion_08_pointing_game_sanity():
    spec = ScenarioSpec(4, 1, train_per_class=150, test_per_class=50, seed=8)
    task = build_scenario(spec, require_masks=True)[0]
    model = build_classifier(ClassifierSpec(), spec.image_size, seed=8)
    expand_head(model, task.class_ids)
    cfg = TrainConfig(strategy="finetune", epochs=15, lr=3e-3)
    rngs = TrainRngs(torch.Generator().manual_seed(0), np.random.default_rng(0),
                     torch.Generator().manual_seed(1))
    train_task(model, task, DualBuffer(0), cfg, SaliencySpec(), RegularizerState(), rngs)

    ev = evaluate_split(model, task.test, SaliencySpec("grad_cam"))
    assert ev.accuracy > 0.9
    chance = float(task.test.masks.mean())
    hit_rate = ev.stats.hit_rate
    print(f"\naccuracy {ev.accuracy:.3f} hit rate {hit_rate:.3f} chance {chance:.3f}")
    assert hit_rate > chance

    images = task.test.image_tensor(model.dtype)
    maps = compute_saliency(model, images, model.head_index(task.test.labels), SaliencySpec(normalize=False))
    base = pointing_hits(maps, task.test.masks)
    for c in (1e-3, 0.5, 7.0, 1e4):
        assert np.array_equal(pointing_hits(maps * c, task.test.masks), base)
    assert np.array_equal(pointing_hits(normalize_maps(maps), task.test.masks), base)


# --- 9 ----------------------------------------------------------------------

def test_criterion_09_memory_accounting():
    # five stride-2 blocks take 224 x 224 to 7 x 7, like the reference backbone's last conv layer
    deep = ClassifierSpec(conv_blocks=((8, 3, 2), (8, 3, 2), (8, 3, 2), (8, 3, 2), (8, 3, 2)))
    assert deep.layer_output_size(deep.target, (224, 224)) == (7, 7)
    assert memory_cost(SaliencySpec("grad_cam"), deep, (224, 224), bytes_per_value=4) == 196
    H, W = 224, 224
    image_bytes = 3 * H * W * 4
    for method in ("vanilla_bp", "smoothgrad"):
        cost = memory_cost(SaliencySpec(method), deep, (H, W), bytes_per_value=4)
        assert cost == H * W * 4
        assert cost * 3 == image_bytes
    # stored maps really have that many values
    model = tiny_model()
    m = grad_cam(model, torch.rand(3, 8, 8, dtype=DT), 0)
    assert m.values.numel() * 4 == memory_cost(SaliencySpec("grad_cam"), TINY_SPEC, (8, 8))


# --- 10 ---------------------------------------------------------------------

def test_criterion_10_end_to_end_determinism(tmp_path):
    cfg = {
        "seed": 10, "buffer_capacity": 12,
        "scenario": {"total_classes": 6, "num_tasks": 3, "image_size": [16, 16],
                     "train_per_class": 10, "test_per_class": 4},
        "model": {"conv_blocks": [[4, 3, 2], [8, 3, 2]]},
        "saliency": {"method": "smoothgrad", "smoothgrad_n": 4},
        "train": {"strategy": "er", "rrr_enabled": True, "epochs": 2, "batch_size": 8},
    }
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    for d in ("a", "b"):
        assert main(["run", str(path), "--output-dir", str(tmp_path / d)]) == 0
    for name in ("R.csv", "buffer.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    s = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert s["buffer_counts"] == {"1": 4, "2": 4, "3": 4}
