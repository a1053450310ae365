"""Greedy locally-supervised training of a partitioned network, plus an
end-to-end comparator and frozen-feature MIL baselines.

Stages train strictly in order. Stage i < K minimizes
cross_entropy(A_i(F_i(x_{i-1})), y) + alpha * L1(R_i(S(F_i(x_{i-1}))), S(x_{i-1}))
on detached inputs, so gradients never cross a stage boundary; the final
stage trains jointly with the bag-classifier head on the label alone. Each
finished stage is frozen and checksummed. Batch size is 1 with gradient
accumulation, and learning rates decay on validation-accuracy plateaus.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from localsup import rfr
from localsup import tensor as T
from localsup.blocks import (
    GatedAttentionHead,
    NetworkPartition,
    Stage,
    save_checkpoint,
)
from localsup.tensor import Graph, Parameter, Tensor, backward, no_grad

__all__ = [
    "TrainConfig",
    "RunRecord",
    "AdamW",
    "PlateauScheduler",
    "TrainingDivergedError",
    "GradientIsolationError",
    "local_stage_loss",
    "final_loss",
    "train_greedy",
    "train_e2e",
    "train_mil_baselines",
    "evaluate",
    "predict_scores",
    "param_checksum",
]


class TrainingDivergedError(RuntimeError):
    """Non-finite loss; message carries the (stage, step, components) snapshot."""


class GradientIsolationError(RuntimeError):
    """A gradient appeared on a parameter outside the active training group."""


@dataclass
class TrainConfig:
    alpha: float = 1.0
    lr_backbone: float = 3e-4
    lr_aux: float = 6e-4            # paper keeps auxiliaries at 2x the backbone rate
    weight_decay: float = 1e-6
    accum_steps: int = 8
    plateau_patience: int = 3
    plateau_factor: float = 0.1
    plateau_min_delta: float = 1e-3
    max_lr_decays: int = 2
    epochs_per_stage: int = 2
    stage_epochs: Optional[Sequence[int]] = None
    seed: int = 0
    debug_isolation: bool = True
    cache_features: bool = False
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.accum_steps < 1:
            raise ValueError(f"accum_steps must be >= 1, got {self.accum_steps}")
        if not 0 < self.plateau_factor < 1:
            raise ValueError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")


@dataclass
class RunRecord:
    """Per-epoch training history plus freeze checksums and phase memory peaks."""

    mode: str
    epochs: list = field(default_factory=list)
    stage_boundaries: list = field(default_factory=list)
    stage_checksums: dict = field(default_factory=dict)
    phase_peak_retained: dict = field(default_factory=dict)
    events: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0

    def numeric_state(self) -> dict:
        """Everything except wall-clock timing; the determinism contract."""
        return {
            "mode": self.mode,
            "epochs": self.epochs,
            "stage_boundaries": self.stage_boundaries,
            "stage_checksums": self.stage_checksums,
            "phase_peak_retained": self.phase_peak_retained,
            "events": self.events,
            "final": self.final,
        }

    def save(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "runrecord.jsonl", "w") as fh:
            for row in self.epochs:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        with open(out_dir / "events.jsonl", "w") as fh:
            for row in self.events:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        summary = dict(self.numeric_state())
        summary.pop("epochs")
        summary.pop("events")
        summary["wall_clock_s"] = self.wall_clock_s
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))


def param_checksum(params: Sequence[Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.data.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Optimizer and schedule


class AdamW:
    """Adaptive moments with decoupled weight decay, per-group learning rates.

    Parameters whose ``grad`` is None are skipped entirely (no decay, no
    moment update), so an untouched module stays bit-identical.
    """

    def __init__(self, groups: Sequence[dict], weight_decay: float = 1e-6,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.groups = [dict(g) for g in groups]
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def parameters(self) -> list[Tensor]:
        return [p for g in self.groups for p in g["params"]]

    @property
    def lrs(self) -> list[float]:
        return [g["lr"] for g in self.groups]

    def scale_lrs(self, factor: float):
        for g in self.groups:
            g["lr"] *= factor

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def step(self, grad_scale: float = 1.0):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for g in self.groups:
            lr = g["lr"]
            for p in g["params"]:
                if p.grad is None:
                    continue
                grad = p.grad * grad_scale
                key = id(p)
                m = self._m.get(key)
                if m is None:
                    m = np.zeros_like(p.data)
                    self._v[key] = np.zeros_like(p.data)
                v = self._v[key]
                m = self.beta1 * m + (1 - self.beta1) * grad
                v = self.beta2 * v + (1 - self.beta2) * grad * grad
                self._m[key], self._v[key] = m, v
                p.data = p.data - lr * self.weight_decay * p.data
                p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_bytes(self) -> int:
        """Two float64 moments per trainable element."""
        return sum(2 * p.data.size * 8 for p in self.parameters())


class PlateauScheduler:
    """Scale all learning rates by ``factor`` when the monitored metric stops
    improving by at least ``min_delta`` for ``patience`` observations; reports
    exhaustion after ``max_decays`` decays."""

    def __init__(self, optimizer: AdamW, factor: float = 0.1, patience: int = 3,
                 min_delta: float = 1e-3, max_decays: int = 2):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.max_decays = max_decays
        self.best = -np.inf
        self.stale = 0
        self.decays = 0

    def observe(self, metric: float):
        if metric > self.best + self.min_delta:
            self.best = metric
            self.stale = 0
            return
        self.stale += 1
        if self.stale >= self.patience:
            self.optimizer.scale_lrs(self.factor)
            self.decays += 1
            self.stale = 0

    @property
    def exhausted(self) -> bool:
        return self.decays >= self.max_decays


# ---------------------------------------------------------------------------
# Losses


def local_stage_loss(stage: Stage, aux, x_prev: Tensor, y: int, alpha: float,
                     rng: Optional[np.random.Generator] = None,
                     cumulative_stride: int = 1,
                     pairs: Optional[list] = None):
    """Local loss for stage i < K on a detached input.

    Returns (loss, logits, cls_value, rec_value, pairs). Gradients reach the
    stage, its auxiliary classifier, and its reconstructor only.
    """
    if x_prev.requires_grad:
        raise ValueError("local_stage_loss: x_prev must be detached")
    x_i = stage(x_prev)
    logits = aux.classifier(x_i)
    l_cls = T.cross_entropy(logits, y)
    if alpha == 0.0:
        return l_cls, logits, l_cls.item(), 0.0, []
    if pairs is None:
        pairs = rfr.sample_locations(
            aux.sampler, x_i.data.shape[-2:], stride=stage.spatial_stride,
            cumulative_stride=cumulative_stride * stage.spatial_stride, rng=rng)
    l_rec = rfr.rfr_loss(aux, x_i, x_prev, pairs)
    loss = T.add(l_cls, T.mul(l_rec, alpha))
    return loss, logits, l_cls.item(), l_rec.item(), pairs


def final_loss(stage: Stage, head: GatedAttentionHead, x_prev: Tensor, y: int):
    """Joint loss of the last stage and the bag-classifier head."""
    if x_prev.requires_grad:
        raise ValueError("final_loss: x_prev must be detached")
    logits = head(stage(x_prev))
    return T.cross_entropy(logits, y), logits


# ---------------------------------------------------------------------------
# Shared loop pieces


def _sample_image(sample) -> np.ndarray:
    img = np.asarray(sample.image, dtype=np.float64)
    return img[None] if img.ndim == 3 else img


def _shuffle(n: int, seed: int, phase: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 11, phase, epoch])).permutation(n)


def _prefix_features(partition: NetworkPartition, sample, upto: int,
                     cache: Optional[dict], key) -> Tensor:
    """x_{upto} as a constant tensor, recomputed through frozen stages."""
    if cache is not None and key in cache:
        return Tensor(cache[key])
    with no_grad():
        h = Tensor(_sample_image(sample))
        h = partition.forward_backbone(h, upto=upto)
    if cache is not None:
        cache[key] = h.data
    return h


def _assert_isolation(partition: NetworkPartition, active_stage: int, trains_head: bool):
    for j, stage in enumerate(partition.stages):
        if j == active_stage:
            continue
        for name, p in stage.named_parameters():
            if p.grad is not None:
                raise GradientIsolationError(
                    f"gradient leaked to {name} while training stage {active_stage}")
    for j, a in enumerate(partition.aux):
        if j == active_stage:
            continue
        for name, p in a.named_parameters():
            if p.grad is not None:
                raise GradientIsolationError(
                    f"gradient leaked to {name} while training stage {active_stage}")
    if not trains_head:
        for name, p in partition.head.named_parameters():
            if p.grad is not None:
                raise GradientIsolationError(
                    f"gradient leaked to {name} while training stage {active_stage}")


def _check_finite(value: float, stage: int, step: int, parts: dict):
    if not np.isfinite(value):
        raise TrainingDivergedError(
            f"non-finite loss at stage={stage} step={step}: {json.dumps(parts)}")


def predict_scores(partition: NetworkPartition, samples: Sequence,
                   stage_idx: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Class-probability rows for each sample.

    ``stage_idx=None`` scores with the full backbone plus head; an integer
    scores with that stage's auxiliary classifier on its local features.
    """
    scores = []
    labels = []
    with no_grad():
        for sample in samples:
            h = Tensor(_sample_image(sample))
            if stage_idx is None:
                logits = partition.head(partition.forward_backbone(h))
            else:
                h = partition.forward_backbone(h, upto=stage_idx + 1)
                logits = partition.aux[stage_idx].classifier(h)
            scores.append(T.softmax(logits).data)
            labels.append(sample.label)
    return np.asarray(scores), np.asarray(labels)


def evaluate(partition: NetworkPartition, samples: Sequence,
             stage_idx: Optional[int] = None) -> float:
    scores, labels = predict_scores(partition, samples, stage_idx=stage_idx)
    return float(np.mean(scores.argmax(axis=1) == labels))


# ---------------------------------------------------------------------------
# Greedy locally-supervised training


def train_greedy(partition: NetworkPartition, data, cfg: TrainConfig,
                 out_dir=None) -> tuple[NetworkPartition, RunRecord]:
    """Train stages 1..K-1 with their auxiliaries, then stage K with the head.

    Each stage is frozen (and checksummed) once its phase ends and never
    changes afterward.
    """
    if not len(data.train):
        raise ValueError("train_greedy: empty training split")
    k = partition.k
    record = RunRecord(mode=f"local-K{k}")
    t0 = time.perf_counter()
    cache: Optional[dict] = {} if cfg.cache_features else None
    epoch_counter = 0
    for i, stage in enumerate(partition.stages):
        trains_head = i == k - 1
        aux = None if trains_head else partition.aux[i]
        cum_stride_before = int(np.prod([s.spatial_stride for s in partition.stages[:i]], dtype=int))
        groups = []
        if stage.parameters():
            groups.append({"params": stage.parameters(), "lr": cfg.lr_backbone})
        aux_params = partition.head.parameters() if trains_head else aux.parameters()
        groups.append({"params": aux_params, "lr": cfg.lr_aux})
        if stage.frozen and not trains_head:
            # nothing to optimize locally for a frozen stage
            record.stage_boundaries.append(epoch_counter)
            record.stage_checksums[f"stage{i}"] = param_checksum([p for _, p in stage.named_parameters()])
            continue
        opt = AdamW(groups, weight_decay=cfg.weight_decay, betas=cfg.betas, eps=cfg.eps)
        plateau = PlateauScheduler(opt, cfg.plateau_factor, cfg.plateau_patience,
                                   cfg.plateau_min_delta, cfg.max_lr_decays)
        n_epochs = (cfg.stage_epochs[i] if cfg.stage_epochs is not None
                    else cfg.epochs_per_stage)
        rfr_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101, i]))
        record.stage_boundaries.append(epoch_counter)
        step = 0
        with Graph() as g:
            for epoch in range(n_epochs):
                sums = {"cls": 0.0, "rec": 0.0, "total": 0.0}
                pending = 0
                for idx in _shuffle(len(data.train), cfg.seed, i, epoch):
                    sample = data.train[int(idx)]
                    x_prev = _prefix_features(partition, sample, i, cache, (i, int(idx)))
                    if trains_head:
                        loss, logits = final_loss(stage, partition.head, x_prev, sample.label)
                        cls_val, rec_val = loss.item(), 0.0
                    else:
                        loss, logits, cls_val, rec_val, pairs = local_stage_loss(
                            stage, aux, x_prev, sample.label, cfg.alpha,
                            rng=rfr_rng, cumulative_stride=cum_stride_before)
                        if pairs:
                            record.events.append({
                                "event": "sample_patches", "stage": i, "step": step,
                                "size_hi": pairs[0].size_hi,
                                "locs": [list(p.loc_hi) for p in pairs]})
                    total_val = loss.item()
                    _check_finite(total_val, i, step,
                                  {"cls": cls_val, "rec": rec_val, "total": total_val})
                    backward(loss)
                    sums["cls"] += cls_val
                    sums["rec"] += rec_val
                    sums["total"] += total_val
                    pending += 1
                    step += 1
                    if pending == cfg.accum_steps:
                        if cfg.debug_isolation:
                            _assert_isolation(partition, i, trains_head)
                        opt.step(grad_scale=1.0 / pending)
                        opt.zero_grad()
                        pending = 0
                if pending:
                    if cfg.debug_isolation:
                        _assert_isolation(partition, i, trains_head)
                    opt.step(grad_scale=1.0 / pending)
                    opt.zero_grad()
                val_idx = None if trains_head else i
                val_acc = evaluate(partition, data.val, stage_idx=val_idx) if len(data.val) else 0.0
                n = len(data.train)
                record.epochs.append({
                    "phase": f"stage{i}", "epoch": epoch,
                    "loss_cls": sums["cls"] / n, "loss_rec": sums["rec"] / n,
                    "loss_total": sums["total"] / n,
                    "val_accuracy": val_acc, "lrs": list(opt.lrs)})
                epoch_counter += 1
                plateau.observe(val_acc)
                if plateau.exhausted:
                    break
        record.phase_peak_retained[f"stage{i}"] = g.peak_retained_bytes
        stage.freeze()
        frozen_named = [p for _, p in stage.named_parameters()]
        record.stage_checksums[f"stage{i}"] = param_checksum(frozen_named)
        if not trains_head:
            record.stage_checksums[f"aux{i}"] = param_checksum(aux.parameters())
        if out_dir is not None:
            names = stage.named_parameters() + (
                partition.head.named_parameters() if trains_head else aux.named_parameters())
            save_checkpoint(Path(out_dir) / f"ckpt_stage{i}", names)
    record.final["val_accuracy"] = evaluate(partition, data.val) if len(data.val) else 0.0
    record.wall_clock_s = time.perf_counter() - t0
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "ckpt_final", partition.named_parameters())
        record.save(out_dir)
    return partition, record


# ---------------------------------------------------------------------------
# End-to-end comparator


def train_e2e(partition: NetworkPartition, data, cfg: TrainConfig,
              epochs: Optional[int] = None, out_dir=None) -> tuple[NetworkPartition, RunRecord]:
    """Standard full backpropagation through every stage plus the head."""
    if not len(data.train):
        raise ValueError("train_e2e: empty training split")
    record = RunRecord(mode="e2e")
    t0 = time.perf_counter()
    backbone_params = [p for s in partition.stages for p in s.parameters()]
    groups = []
    if backbone_params:
        groups.append({"params": backbone_params, "lr": cfg.lr_backbone})
    groups.append({"params": partition.head.parameters(), "lr": cfg.lr_aux})
    opt = AdamW(groups, weight_decay=cfg.weight_decay, betas=cfg.betas, eps=cfg.eps)
    plateau = PlateauScheduler(opt, cfg.plateau_factor, cfg.plateau_patience,
                               cfg.plateau_min_delta, cfg.max_lr_decays)
    n_epochs = epochs if epochs is not None else cfg.epochs_per_stage
    step = 0
    with Graph() as g:
        for epoch in range(n_epochs):
            total = 0.0
            pending = 0
            for idx in _shuffle(len(data.train), cfg.seed, 0, epoch):
                sample = data.train[int(idx)]
                x = Tensor(_sample_image(sample))
                logits = partition.head(partition.forward_backbone(x))
                loss = T.cross_entropy(logits, sample.label)
                val = loss.item()
                _check_finite(val, -1, step, {"cls": val})
                backward(loss)
                total += val
                pending += 1
                step += 1
                if pending == cfg.accum_steps:
                    opt.step(grad_scale=1.0 / pending)
                    opt.zero_grad()
                    pending = 0
            if pending:
                opt.step(grad_scale=1.0 / pending)
                opt.zero_grad()
            val_acc = evaluate(partition, data.val) if len(data.val) else 0.0
            record.epochs.append({
                "phase": "e2e", "epoch": epoch, "loss_cls": total / len(data.train),
                "loss_rec": 0.0, "loss_total": total / len(data.train),
                "val_accuracy": val_acc, "lrs": list(opt.lrs)})
            plateau.observe(val_acc)
            if plateau.exhausted:
                break
    record.phase_peak_retained["e2e"] = g.peak_retained_bytes
    record.final["val_accuracy"] = evaluate(partition, data.val) if len(data.val) else 0.0
    record.wall_clock_s = time.perf_counter() - t0
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "ckpt_final", partition.named_parameters())
        record.save(out_dir)
    return partition, record


# ---------------------------------------------------------------------------
# Frozen-feature MIL baselines


class _PooledLinearHead:
    """Linear classifier over max- or mean-pooled instances."""

    def __init__(self, embed_dim: int, num_classes: int, mode: str, rng: np.random.Generator):
        limit = np.sqrt(3.0 / embed_dim)
        self.mode = mode
        self.w = Parameter(rng.uniform(-limit, limit, size=(num_classes, embed_dim)))
        self.b = Parameter(np.zeros(num_classes))

    def parameters(self):
        return [self.w, self.b]

    def forward_instances(self, h: Tensor) -> Tensor:
        pooled = T.amax(h, axis=0) if self.mode == "max" else T.tmean(h, axis=0)
        row = T.reshape(pooled, (1, h.data.shape[1]))
        return T.reshape(T.linear(row, self.w, self.b), (self.w.data.shape[0],))


def train_mil_baselines(partition: NetworkPartition, data, cfg: TrainConfig,
                        num_classes: int, upto: Optional[int] = None,
                        methods: Sequence[str] = ("max", "avg", "abmil", "gabmil"),
                        epochs: Optional[int] = None) -> dict:
    """Train aggregation heads over features from the frozen backbone prefix.

    Features are extracted once per sample and cached, mirroring the
    fixed-pretrained-features regime these baselines assume.
    """
    n_epochs = epochs if epochs is not None else cfg.epochs_per_stage
    feats: dict = {}

    def instances(split, j) -> np.ndarray:
        key = (id(split), j)
        if key not in feats:
            with no_grad():
                h = partition.forward_backbone(Tensor(_sample_image(split[j])), upto=upto)
                feats[key] = T.to_instances(h).data
        return feats[key]

    embed = (partition.stages[upto - 1] if upto else partition.stages[-1]).out_channels
    results = {}
    for m_i, method in enumerate(methods):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 51, m_i]))
        if method in ("max", "avg"):
            head = _PooledLinearHead(embed, num_classes, method, rng)
        elif method == "abmil":
            head = GatedAttentionHead(embed, 16, num_classes, rng, gated=False, name="abmil")
        elif method == "gabmil":
            head = GatedAttentionHead(embed, 16, num_classes, rng, gated=True, name="gabmil")
        else:
            raise ValueError(f"unknown baseline method {method!r}")
        opt = AdamW([{"params": head.parameters(), "lr": cfg.lr_aux}],
                    weight_decay=cfg.weight_decay, betas=cfg.betas, eps=cfg.eps)
        plateau = PlateauScheduler(opt, cfg.plateau_factor, cfg.plateau_patience,
                                   cfg.plateau_min_delta, cfg.max_lr_decays)
        record = RunRecord(mode=f"baseline-{method}")
        for epoch in range(n_epochs):
            total = 0.0
            pending = 0
            for idx in _shuffle(len(data.train), cfg.seed, 91 + m_i, epoch):
                h = Tensor(instances(data.train, int(idx)))
                loss = T.cross_entropy(head.forward_instances(h), data.train[int(idx)].label)
                backward(loss)
                total += loss.item()
                pending += 1
                if pending == cfg.accum_steps:
                    opt.step(grad_scale=1.0 / pending)
                    opt.zero_grad()
                    pending = 0
            if pending:
                opt.step(grad_scale=1.0 / pending)
                opt.zero_grad()
            correct = 0
            with no_grad():
                for j in range(len(data.val)):
                    logits = head.forward_instances(Tensor(instances(data.val, j)))
                    correct += int(np.argmax(logits.data) == data.val[j].label)
            val_acc = correct / len(data.val) if len(data.val) else 0.0
            record.epochs.append({"phase": f"baseline-{method}", "epoch": epoch,
                                  "loss_total": total / len(data.train),
                                  "val_accuracy": val_acc, "lrs": list(opt.lrs)})
            plateau.observe(val_acc)
            if plateau.exhausted:
                break
        record.final["val_accuracy"] = record.epochs[-1]["val_accuracy"] if record.epochs else 0.0
        results[method] = (head, record)
    return results
