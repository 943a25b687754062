"""Acceptance criteria 1-9, each at its stated tolerance and time budget.

Every test records one PASS/FAIL line, shown in the terminal summary.
"""
import dataclasses
import math
import shutil
import time

import numpy as np
import pytest
import torch
from PIL import Image

from fewshotseg.data import DatasetRegistry, build_splits, holdout_split, validate_registry
from fewshotseg.episodes import EpisodeSpec, sample_episode
from fewshotseg.metrics import bce_loss, iou, mse_loss, threshold_mask
from fewshotseg.model import PRESETS, ModelConfig, init_params, params_digest, save_checkpoint
from fewshotseg.training import TrainConfig, constant_predictor, evaluate, lr_schedule, train
from fewshotseg.workflow import SupportSet, auto_label, merge_support_set, mine_hard_cases

from conftest import ACCEPTANCE_LINES, TINY, random_pair, rewrite_hierarchy, to_batch, \
    write_fixture_pair, write_fixture_registry


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# -- 1 ------------------------------------------------------------------------

def _aspect(root):
    write_fixture_pair(root / "beta", 3, size=(560, 224))


def _min_side(root):
    write_fixture_pair(root / "beta", 3, size=(200, 200))


def _nine_images(root):
    for ext in ("jpg", "png"):
        (root / "gamma" / f"10.{ext}").unlink()


def _non_binary(root):
    m = np.zeros((224, 224), np.uint8)
    m[40:120, 40:120] = 255
    m[120:160, 120:160] = 90
    write_fixture_pair(root / "alpha", 4, mask=m)


def _instance_11(root):
    inst = np.zeros((224, 224), np.uint8)
    inst[50:60, 50:60] = 11
    Image.fromarray(inst).save(root / "alpha" / "2.inst.png")


def _cycle(root):
    def edit(doc):
        # alpha still reaches top00; the loop sits between two middle nodes
        doc["loop"] = {"level": "middle", "parents": ["top00/mid"]}
        doc["top00/mid"]["parents"] = ["top00", "loop"]
    rewrite_hierarchy(root, edit)


FIXTURES = [
    ("conforming", lambda root: None, []),
    ("aspect ratio 2.5", _aspect, ["aspect-ratio"]),
    ("min side 200", _min_side, ["min-side"]),
    ("9-image class", _nine_images, ["class-cardinality"]),
    ("non-binary mask", _non_binary, ["mask-binary"]),
    ("instance label 11", _instance_11, ["instance-range"]),
    ("cyclic hierarchy", _cycle, ["hierarchy-cycle"]),
]


def test_criterion_1_validator_exactness(tmp_path):
    t0 = time.perf_counter()
    base = write_fixture_registry(tmp_path / "base")
    mismatches = []
    for i, (label, mutate, expected) in enumerate(FIXTURES):
        root = tmp_path / f"f{i}"
        shutil.copytree(base, root)
        mutate(root)
        got = validate_registry(root).rule_ids()
        if got != expected:
            mismatches.append(f"{label}: got {got}, expected {expected}")
    elapsed = time.perf_counter() - t0
    ok = not mismatches and elapsed < 10
    record(1, ok, f"{len(FIXTURES)} fixtures, exact rule ids, {elapsed:.1f}s (< 10s) {'; '.join(mismatches)}")


# -- 2 ------------------------------------------------------------------------

def test_criterion_2_split_protocol(synth1000):
    tops = synth1000.hierarchy.top
    specs, times = [], []
    for _ in range(3):
        t0 = time.perf_counter()
        specs.append(build_splits(synth1000, 20, 20, seed=0))
        times.append(time.perf_counter() - t0)
    spec = specs[0]
    classes = tuple(len(spec.classes(s)) for s in ("train", "val", "test"))
    pairs = tuple(sum(synth1000.n_pairs(n) for n in spec.classes(s)) for s in ("train", "val", "test"))
    ok = (len(synth1000) == 1000 and len(tops) == 12 and classes == (520, 240, 240)
          and pairs == (5200, 2400, 2400) and specs[1] == spec and specs[2] == spec and max(times) < 5)
    record(2, ok, f"classes {classes}, pairs {pairs}, 3 identical reruns, "
                  f"slowest {max(times):.2f}s (< 5s)")


# -- 3 ------------------------------------------------------------------------

def loop_iou(a, b):
    inter = union = 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        inter += x & y
        union += x | y
    return 1.0 if union == 0 else inter / union


def loop_bce(p, t):
    total = 0.0
    for y, l in zip(p.ravel().tolist(), t.ravel().tolist()):
        total += -(l * math.log(y) + (1 - l) * math.log(1 - y))
    return total / p.size


def loop_mse(p, t):
    total = 0.0
    for y, l in zip(p.ravel().tolist(), t.ravel().tolist()):
        total += (y - l) ** 2
    return total / p.size


def test_criterion_3_metric_oracles():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    iou_bad = 0
    worst_bce = worst_mse = 0.0
    for _ in range(1000):
        a = (rng.random((8, 8)) < rng.random()).astype(np.uint8)
        b = (rng.random((8, 8)) < rng.random()).astype(np.uint8)
        iou_bad += iou(a, b) != loop_iou(a, b)
        p = rng.uniform(1e-6, 1 - 1e-6, (8, 8))
        ref_b, ref_m = loop_bce(p, b), loop_mse(p, b)
        worst_bce = max(worst_bce, abs(float(bce_loss(p, b)) - ref_b) / ref_b)
        worst_mse = max(worst_mse, abs(float(mse_loss(p, b)) - ref_m) / ref_m)
    elapsed = time.perf_counter() - t0
    ok = iou_bad == 0 and worst_bce <= 1e-12 and worst_mse <= 1e-12 and elapsed < 5
    record(3, ok, f"1000 cases: iou mismatches {iou_bad}, bce rel {worst_bce:.1e}, "
                  f"mse rel {worst_mse:.1e} (<= 1e-12), {elapsed:.1f}s (< 5s)")


# -- 4 ------------------------------------------------------------------------

def test_criterion_4_architecture_invariants():
    t0 = time.perf_counter()
    worst_perm = 0.0
    collapse_fail = shape_fail = 0
    rng = np.random.default_rng(4)
    for draw in range(100):
        model = init_params(TINY, draw)
        k = int(rng.integers(2, 6))
        imgs, masks = to_batch([random_pair(rng) for _ in range(k)])
        q = torch.as_tensor(rng.random((1, 3, 224, 224), dtype=np.float32))
        with torch.no_grad():
            out = model(imgs, masks, q)
            perm = torch.as_tensor(rng.permutation(k))
            worst_perm = max(worst_perm, float((model(imgs[perm], masks[perm], q) - out).abs().max()))
            single = model(imgs[:1], masks[:1], q)
            copies = model(imgs[[0] * k], masks[[0] * k], q)
        collapse_fail += not torch.equal(single, copies)
        shape_fail += out.shape != (1, 224, 224) or not (out.min() > 0 and out.max() < 1)
    elapsed = time.perf_counter() - t0
    ok = worst_perm <= 1e-6 and collapse_fail == 0 and shape_fail == 0 and elapsed < 120
    record(4, ok, f"100 draws: max permutation diff {worst_perm:.1e} (<= 1e-6), "
                  f"duplicate-collapse failures {collapse_fail}, shape/range failures {shape_fail}, "
                  f"{elapsed:.1f}s (< 120s)")


# -- 5 ------------------------------------------------------------------------

def test_criterion_5_gradient_check():
    t0 = time.perf_counter()
    cfg = dataclasses.replace(TINY, input_size=16)
    model = init_params(cfg, 0).double()
    g = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):  # nonzero biases so their gradients are exercised too
                p.copy_(0.1 * torch.randn(p.shape, generator=g, dtype=torch.float64))
    s_img = torch.rand(3, 3, 16, 16, generator=g, dtype=torch.float64)
    s_mask = (torch.rand(3, 16, 16, generator=g) > 0.5).double()
    q = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
    truth = (torch.rand(2, 16, 16, generator=g) > 0.5).double()

    def loss():
        return bce_loss(model(s_img, s_mask, q), truth)

    model.zero_grad()
    loss().backward()
    flat = [(p, i) for _, p in model.named_parameters() for i in range(p.numel())]
    picks = np.random.default_rng(5).choice(len(flat), 250, replace=False)
    eps, analytic, numeric = 1e-6, [], []
    with torch.no_grad():
        for j in picks:
            p, i = flat[j]
            v = p.view(-1)[i].item()
            p.view(-1)[i] = v + eps
            up = loss().item()
            p.view(-1)[i] = v - eps
            down = loss().item()
            p.view(-1)[i] = v
            numeric.append((up - down) / (2 * eps))
            analytic.append(p.grad.view(-1)[i].item())
    analytic, numeric = np.array(analytic), np.array(numeric)
    # relative error of the sampled gradient vector; per-entry ratios are meaningless where
    # |g| is near the finite-difference round-off (~1e-10 here), so those are only bounded in aggregate
    rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
    big = np.abs(analytic) > 1e-5
    per_param = float((np.abs(analytic - numeric)[big] / np.abs(analytic[big])).max())
    elapsed = time.perf_counter() - t0
    ok = rel < 1e-4 and per_param < 1e-4 and elapsed < 300
    record(5, ok, f"250 of {len(flat)} params, relative error {rel:.1e} (< 1e-4), "
                  f"max per-param {per_param:.1e} over {big.sum()} with |g|>1e-5, {elapsed:.1f}s (< 300s)")


# -- 6 ------------------------------------------------------------------------

def test_criterion_6_overfit_smoke(synth30):
    t0 = time.perf_counter()
    split = holdout_split(synth30, 5, seed=0)
    cfg = TrainConfig(lr0=1e-3, n_episodes=500, k_shot=5, seed=0, overfit=True)
    res = train(synth30, split, PRESETS["tiny"], cfg)
    ep = sample_episode(synth30, split.train, cfg.episode_spec, 0)
    s, m, q, _ = ep.tensors()
    with torch.no_grad():
        probs = res.model(s, m, q)[0].numpy()
    score = iou(threshold_mask(probs), ep.query_truth[0])
    losses = [loss for _, loss, _ in res.trace]
    first = next((i + 1 for i, v in enumerate(losses) if v < 0.05), None)
    elapsed = time.perf_counter() - t0
    ok = len(losses) == 500 and first is not None and losses[-1] < 0.05 and score >= 0.95 and elapsed < 300
    record(6, ok, f"loss < 0.05 first at update {first}, final {losses[-1]:.4f}, query IoU {score:.3f} "
                  f"(>= 0.95), {elapsed:.1f}s (< 300s)")


# -- 7 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_desk_scale_generalization(synth30):
    t0 = time.perf_counter()
    split = holdout_split(synth30, 5, seed=0)
    cfg = TrainConfig(lr0=1e-3, halve_every=1000, n_episodes=5000, k_shot=5, seed=0)
    model = train(synth30, split, PRESETS["small"], cfg).model
    per_class = 10
    five = evaluate(model, synth30, split.test, 5, per_class, seed=1).global_mean
    one = evaluate(model, synth30, split.test, 1, per_class, seed=1).global_mean
    fg = evaluate(None, synth30, split.test, 5, per_class, seed=1, predictor=constant_predictor(1.0)).global_mean
    bg = evaluate(None, synth30, split.test, 5, per_class, seed=1, predictor=constant_predictor(0.0)).global_mean
    elapsed = time.perf_counter() - t0
    ok = five - fg >= 0.15 and five - bg >= 0.15 and five >= one and elapsed < 1800
    record(7, ok, f"held-out meanIoU 5-shot {five:.3f}, 1-shot {one:.3f}, all-foreground {fg:.3f}, "
                  f"all-background {bg:.3f} (margins >= 0.15, 5-shot >= 1-shot), {elapsed:.0f}s (< 1800s)")


# -- 8 ------------------------------------------------------------------------

def test_criterion_8_schedule_and_resume(synth30, tmp_path):
    t0 = time.perf_counter()
    lrs = [lr_schedule(1e-3, 50_000, e) for e in (0, 50_000, 125_000)]
    closed = [1e-3 * 0.5 ** math.floor(e / 50_000) for e in (0, 50_000, 125_000)]
    schedule_ok = lrs == closed and np.allclose(lrs, [1e-3, 5e-4, 2.5e-4], rtol=0, atol=1e-18)

    split = holdout_split(synth30, 5, seed=0)
    cfg = TrainConfig(n_episodes=300, k_shot=2, seed=3, halve_every=150, checkpoint_every=100)
    full = train(synth30, split, TINY, cfg, out_dir=tmp_path / "full")
    resumed = train(synth30, split, TINY, cfg, resume=tmp_path / "full" / "checkpoint-100.pt")
    window = full.trace[100:300]
    trace_ok = len(resumed.trace) == 200 and resumed.trace == window
    digest_ok = params_digest(resumed.model) == params_digest(full.model)
    elapsed = time.perf_counter() - t0
    ok = schedule_ok and trace_ok and digest_ok and elapsed < 120
    record(8, ok, f"lr {lrs} at episodes 0/50k/125k; resumed trace over episodes 100-299 "
                  f"{'identical' if trace_ok else 'differs'}, final weights "
                  f"{'identical' if digest_ok else 'differ'}, {elapsed:.1f}s (< 120s)")


# -- 9 ------------------------------------------------------------------------

def test_criterion_9_workflow_determinism(synth30, tmp_path):
    t0 = time.perf_counter()
    problems = []

    truth = np.ones((10, 10), np.uint8)
    preds = []
    for frac in (0.9, 0.2, 0.5, 0.2):
        p = np.zeros((10, 10))
        p.flat[:int(frac * 100)] = 0.8
        preds.append(p)
    if [c.index for c in mine_hard_cases(preds, [truth] * 4, n=3)] != [1, 3, 2]:
        problems.append("iou order")
    if mine_hard_cases(preds, [truth] * 4, n=0) != []:
        problems.append("n=0")
    margins = [np.full((4, 4), 0.95), np.full((4, 4), 0.55)]
    if [c.index for c in mine_hard_cases(margins, n=2)] != [1, 0]:
        problems.append("margin order")

    rng = np.random.default_rng(9)
    v1 = SupportSet.initial([random_pair(rng, source=f"s{i}") for i in range(5)])
    v2 = merge_support_set(v1, [random_pair(rng, source=f"c{i}") for i in range(3)])
    v3 = merge_support_set(v2, [random_pair(rng, source="s0")])
    if (v2.version, len(v2), v3.version, len(v3)) != (2, 8, 3, 8):
        problems.append("merge versions")
    try:
        merge_support_set(v3, [])
        problems.append("empty merge accepted")
    except ValueError:
        pass

    name = synth30.names[3]
    support = SupportSet.initial([synth30.pair(name, k) for k in range(5)])
    corpus = [synth30.pair(n, k).image for n in synth30.names[:4] for k in range(5)]
    ckpt = save_checkpoint(tmp_path / "model.pt", init_params(PRESETS["small"], 11))
    first = auto_label(ckpt, support, corpus, out_dir=tmp_path / "a")
    second = auto_label(ckpt, support, corpus, out_dir=tmp_path / "b")
    same = len(first) == 20 and all(np.array_equal(x.probs, y.probs) and np.array_equal(x.mask, y.mask)
                                    and np.array_equal(x.overlay, y.overlay)
                                    for x, y in zip(first, second))
    files_same = all((tmp_path / "a" / f.name).read_bytes() == f.read_bytes()
                     for f in (tmp_path / "b").iterdir() if f.suffix != ".npz")
    if not (same and files_same):
        problems.append("auto_label not bit-identical")
    elapsed = time.perf_counter() - t0
    ok = not problems and elapsed < 120
    record(9, ok, f"hard-case ordering, merge versioning, 20-image auto_label rerun "
                  f"{'bit-identical' if same and files_same else 'differs'}, {elapsed:.1f}s (< 120s) "
                  f"{'; '.join(problems)}")
