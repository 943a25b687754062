"""Episodic training, evaluation and the experiment harnesses built on them."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .data.registry import DatasetRegistry
from .data.splits import SplitSpec
from .episodes import EpisodeSpec, episode_stream, sample_class_episode, sample_episode
from .metrics import LOSSES, MetricsReport, iou, mean_iou, threshold_mask
from .model import FewShotSegNet, ModelConfig, init_params, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

FINE_TUNE_LR = 1e-4
MAX_BAD_EPISODES = 3


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "bce"
    lr0: float = 1e-3
    halve_every: int = 50_000
    n_episodes: int = 500_000
    k_shot: int = 5
    n_query: int = 1
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 0
    eval_episodes_per_class: int = 2
    overfit: bool = False  # repeat episode 0 every step
    workers: int = 1

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {sorted(LOSSES)}, got {self.loss!r}")
        if self.lr0 < 0 or not math.isfinite(self.lr0):
            raise ValueError(f"lr0 must be a finite non-negative number, got {self.lr0}")
        if self.halve_every < 1:
            raise ValueError(f"halve_every must be >= 1, got {self.halve_every}")

    @property
    def episode_spec(self):
        return EpisodeSpec(k_shot=self.k_shot, n_query=self.n_query, seed=self.seed)

    def to_dict(self):
        return dataclasses.asdict(self)


class TrainingDiverged(RuntimeError):
    pass


def lr_schedule(lr0, halve_every, episode_index):
    """Step decay: the rate halves every ``halve_every`` episodes."""
    return lr0 * 0.5 ** (episode_index // halve_every)


@dataclass
class TrainResult:
    model: FewShotSegNet
    optimizer: torch.optim.Optimizer
    episode: int
    trace: list = field(default_factory=list)       # (episode, loss, lr)
    val_trace: list = field(default_factory=list)   # (episode, macro mean IoU)
    checkpoint: Optional[Path] = None


def make_optimizer(model, lr0):
    # Adam with its usual defaults
    return torch.optim.Adam(model.parameters(), lr=lr0, betas=(0.9, 0.999), eps=1e-8)


def episode_loss(model, episode, loss_fn, dtype=torch.float32):
    s_img, s_mask, q_img, q_mask = episode.tensors(dtype)
    return loss_fn(model(s_img, s_mask, q_img), q_mask)


def train(registry: DatasetRegistry, split: SplitSpec, model_config: ModelConfig,
          train_config: TrainConfig, out_dir=None, resume=None, model=None) -> TrainResult:
    """Run episodes ``[start, train_config.n_episodes)`` of one training stage.

    ``resume`` is a checkpoint path; ``model`` starts from given weights with a
    fresh optimizer (used for fine-tuning stages).
    """
    classes = split.classes("train")
    if not classes:
        raise ValueError("split has no training classes")
    start = 0
    if resume is not None:
        model, state = load_checkpoint(resume)
        optimizer = make_optimizer(model, train_config.lr0)
        if state["optimizer"] is not None:
            optimizer.load_state_dict(state["optimizer"])
        start = state["episode"]
    else:
        if model is None:
            model = init_params(model_config, train_config.seed)
        optimizer = make_optimizer(model, train_config.lr0)
    dtype = next(model.parameters()).dtype
    loss_fn = LOSSES[train_config.loss]
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    result = TrainResult(model, optimizer, start)
    spec = train_config.episode_spec
    if train_config.overfit:
        stream = itertools.repeat(sample_episode(registry, classes, spec, 0))
    else:
        stream = episode_stream(registry, classes, spec, train_config.n_episodes, start,
                                workers=train_config.workers)
    bad = 0
    model.train()
    for index in range(start, train_config.n_episodes):
        episode = next(stream)
        lr = lr_schedule(train_config.lr0, train_config.halve_every, index)
        for group in optimizer.param_groups:
            group["lr"] = lr
        loss = episode_loss(model, episode, loss_fn, dtype)
        value = float(loss.detach())
        result.trace.append((index, value, lr))
        result.episode = done = index + 1
        if not math.isfinite(value):
            bad += 1
            if bad >= MAX_BAD_EPISODES:
                raise TrainingDiverged(
                    f"loss non-finite for {bad} consecutive episodes (last: episode {index}, lr {lr:g})")
            continue
        bad = 0
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if out_dir is not None and train_config.checkpoint_every and done % train_config.checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint-{done}.pt", model, seed=train_config.seed,
                            episode=done, optimizer=optimizer, train_config=train_config.to_dict())
        if train_config.eval_every and done % train_config.eval_every == 0 and split.val:
            report = evaluate(model, registry, split.val, train_config.k_shot,
                              train_config.eval_episodes_per_class, train_config.seed)
            result.val_trace.append((done, report.global_mean))
            log.info("episode %d: val mean IoU %.4f", done, report.global_mean)
            model.train()
    if out_dir is not None:
        result.checkpoint = save_checkpoint(
            out_dir / "checkpoint.pt", model, seed=train_config.seed, episode=result.episode,
            optimizer=optimizer, train_config=train_config.to_dict())
        write_trace(result.trace, out_dir / "loss_trace.csv")
    model.eval()
    return result


def write_trace(trace, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["episode", "loss", "lr"])
        for episode, loss, lr in trace:
            w.writerow([episode, repr(loss), repr(lr)])
    return path


def read_trace(path):
    with open(path, newline="") as f:
        return [(int(r["episode"]), float(r["loss"]), float(r["lr"])) for r in csv.DictReader(f)]


def model_predictor(model: FewShotSegNet) -> Callable:
    dtype = next(model.parameters()).dtype

    def predict(episode):
        s_img, s_mask, q_img, _ = episode.tensors(dtype)
        with torch.no_grad():
            return model(s_img, s_mask, q_img).numpy()

    return predict


def evaluate(model, registry: DatasetRegistry, class_list, k_shot: int, n_episodes_per_class: int,
             seed: int, n_query: int = 1, predictor: Optional[Callable] = None,
             threshold: float = 0.5) -> MetricsReport:
    """Per-class IoU over deterministic episodes, aggregated with ``mean_iou``.

    ``model`` may be a network or a checkpoint path; ``predictor`` (episode ->
    (Q,H,W) probabilities) overrides it.
    """
    if predictor is None:
        if isinstance(model, (str, Path)):
            model, _ = load_checkpoint(model)
        model.eval()
        predictor = model_predictor(model)
    spec = EpisodeSpec(k_shot=k_shot, n_query=n_query, seed=seed)
    records = []
    for name in class_list:
        for i in range(n_episodes_per_class):
            episode = sample_class_episode(registry, name, spec, i)
            probs = predictor(episode)
            for p, truth in zip(probs, episode.query_truth):
                records.append((name, iou(threshold_mask(p, threshold), truth)))
    hierarchy = registry.hierarchy if all(n in registry.hierarchy for n in class_list) else None
    return mean_iou(records, hierarchy, meta={
        "k_shot": k_shot, "episodes_per_class": n_episodes_per_class, "seed": seed,
        "n_query": n_query, "threshold": threshold})


def constant_predictor(value: float) -> Callable:
    """Baseline predicting the same probability everywhere (1 = all foreground)."""
    def predict(episode):
        return np.full((len(episode.query_images), *episode.query_truth[0].shape), value)
    return predict


def kshot_ablation(registry, split, model_config, train_config, k_values, eval_episodes_per_class=5,
                   out_dir=None):
    """Train one model per K (same seed) and evaluate each on the test classes at its own K."""
    k_values = list(k_values)
    if not k_values:
        raise ValueError("k_values is empty")
    reports = {}
    for k in k_values:
        cfg = dataclasses.replace(train_config, k_shot=k)
        sub = Path(out_dir) / f"k{k}" if out_dir is not None else None
        result = train(registry, split, model_config, cfg, out_dir=sub)
        reports[k] = evaluate(result.model, registry, split.test, k, eval_episodes_per_class, cfg.seed)
        if sub is not None:
            reports[k].to_csv(sub / "metrics.csv")
    return reports


def superclass_table(reports: dict):
    """Rows of (superclass, {label: mean IoU}) across several reports, plus a global row."""
    supers = sorted({s for r in reports.values() for s in r.superclasses})
    rows = [(s, {label: r.superclasses.get(s, (0, float("nan")))[1] for label, r in reports.items()})
            for s in supers]
    rows.append(("global", {label: r.global_mean for label, r in reports.items()}))
    return rows


@dataclass
class ProtocolResult:
    stage_lrs: list
    reports: dict        # eval name -> MetricsReport
    model: FewShotSegNet


def cross_dataset_protocol(train_stages, eval_sets, model_config, train_config,
                           eval_episodes_per_class=5, fine_tune_lr=FINE_TUNE_LR, out_dir=None):
    """Train through ``train_stages`` in order, then test on each eval set.

    ``train_stages`` is a list of (registry, split); ``eval_sets`` maps a name to
    (registry, split). Stage one uses ``train_config.lr0``; later stages
    fine-tune at ``fine_tune_lr`` with the halving schedule restarted.
    """
    if not train_stages:
        raise ValueError("at least one training stage is required")
    model = None
    lrs = []
    for i, (registry, split) in enumerate(train_stages):
        cfg = train_config if i == 0 else dataclasses.replace(train_config, lr0=fine_tune_lr)
        lrs.append(cfg.lr0)
        sub = Path(out_dir) / f"stage{i + 1}" if out_dir is not None else None
        model = train(registry, split, model_config, cfg, out_dir=sub, model=model).model
    reports = {}
    for name, (registry, split) in eval_sets.items():
        reports[name] = evaluate(model, registry, split.test, train_config.k_shot,
                                 eval_episodes_per_class, train_config.seed)
        if out_dir is not None:
            reports[name].to_csv(Path(out_dir) / f"metrics-{name}.csv")
    return ProtocolResult(lrs, reports, model)
