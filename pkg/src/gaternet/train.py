"""Loss, SGD, gradient-routing checks, and the three-phase pipeline.

The full objective is cross entropy plus lambda * mean_batch(||g||_1) / c
over the selected gates. The penalty's graph only touches gater-side
parameters (the gater stack and its head), so the backbone receives no
gradient from it; gradient_routing_check verifies that both symbolically
(graph reachability) and numerically.

Phases: pretrain_backbone trains the backbone alone with every gate
effectively 1; pretrain_gater trains the gater stack under a temporary
linear probe on its pooled features; joint loads both, re-initializes the
bottleneck head fresh (output bias +1, so gates start mostly on), and
trains everything end to end with the scheduled gate dropout.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from gaternet.data import DatasetSplits, augment
from gaternet.layers import softmax_cross_entropy
from gaternet.model import GaterNet, ModelSpec
from gaternet.persist import (
    CheckpointError,
    atomic_write_text,
    dict_hash,
    load_checkpoint,
    save_checkpoint,
)
from gaternet.semhash import GateDropoutSchedule, dropout_rate_at
from gaternet.tensor import Array, Tensor, assert_all_finite

log = logging.getLogger(__name__)

PHASES = ("pretrain_backbone", "pretrain_gater", "joint")
_PHASE_TAG = {name: i + 1 for i, name in enumerate(PHASES)}
_TRAINED_PREFIXES = {
    "pretrain_backbone": ("backbone",),
    "pretrain_gater": ("gater", "probe"),
    "joint": ("backbone", "gater", "head"),
}
METRIC_COLUMNS = (
    "epoch", "phase", "train_loss", "eval_acc",
    "mean_gate_activation", "lr", "dropout_rate",
)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one phase of training."""

    phase: str
    epochs: int
    batch_size: int
    lr_schedule: tuple[tuple[int, float], ...]
    momentum: float = 0.9
    weight_decay: float = 0.0
    lambda_: float = 0.1
    seed: int = 0
    dropout_start: float = 0.0
    dropout_end: float = 0.05
    reg_reduction: str = "mean"

    def __post_init__(self):
        object.__setattr__(
            self, "lr_schedule",
            tuple((int(e), float(lr)) for e, lr in self.lr_schedule),
        )
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lambda_ < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lambda_}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.reg_reduction not in ("mean", "sum"):
            raise ValueError(
                f"reg_reduction must be mean or sum, got {self.reg_reduction!r}"
            )
        if not 0.0 <= self.dropout_start <= self.dropout_end < 1.0:
            raise ValueError(
                f"need 0 <= dropout_start <= dropout_end < 1, got "
                f"start={self.dropout_start}, end={self.dropout_end}"
            )
        lr_at(self.lr_schedule, 0)  # validates shape and the epoch-0 anchor

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_schedule"] = [list(pair) for pair in self.lr_schedule]
        return d


def lr_at(schedule, epoch: int) -> float:
    """Piecewise-constant lookup: the rate of the last breakpoint <= epoch."""
    schedule = tuple(schedule)
    if not schedule:
        raise ValueError("lr_schedule must not be empty")
    epochs = [e for e, _ in schedule]
    if epochs != sorted(epochs) or len(set(epochs)) != len(epochs):
        raise ValueError(f"lr_schedule breakpoints must strictly increase: {schedule}")
    if any(lr <= 0 for _, lr in schedule):
        raise ValueError(f"learning rates must be positive: {schedule}")
    if epoch < schedule[0][0]:
        raise ValueError(
            f"epoch {epoch} precedes the first lr breakpoint {schedule[0][0]}"
        )
    current = schedule[0][1]
    for e, lr in schedule:
        if e <= epoch:
            current = lr
    return current


def l1_gate_penalty(selected: Tensor, lambda_: float, reduction: str = "mean") -> Tensor:
    """lambda * mean_batch(||g||_1 / c); gates are nonnegative, so the L1
    norm is a plain sum. "sum" reduction adds per-sample penalties instead
    of averaging them."""
    if lambda_ < 0:
        raise ValueError(f"lambda must be >= 0, got {lambda_}")
    n, c = selected.shape
    if c < 1:
        raise ValueError("penalty needs at least one gate")
    scale = lambda_ / (n * c) if reduction == "mean" else lambda_ / c
    return selected.sum() * scale


def total_loss(
    logits: Tensor,
    labels,
    selected_gates: Tensor | None,
    lambda_: float,
    reduction: str = "mean",
) -> Tensor:
    """Cross entropy plus the sparse-gate penalty.

    With lambda 0 or no gates this IS the cross-entropy node, not a copy.
    """
    if lambda_ < 0:
        raise ValueError(f"lambda must be >= 0, got {lambda_}")
    ce = softmax_cross_entropy(logits, labels)
    if selected_gates is None or selected_gates.shape[1] == 0 or lambda_ == 0:
        return ce
    if selected_gates.shape[0] != logits.shape[0]:
        raise ValueError(
            f"gate batch {selected_gates.shape[0]} does not match logits batch "
            f"{logits.shape[0]}"
        )
    return ce + l1_gate_penalty(selected_gates, lambda_, reduction)


@dataclass
class RoutingReport:
    """What the sparsity penalty's gradient actually reaches."""

    backbone_reached: list[str]
    max_backbone_grad: float
    head_w2_grad_nonzero: bool
    gater_reached: list[str]


def _ancestor_leaves(node: Tensor) -> set[int]:
    seen: set[int] = set()
    stack = [node]
    leaves: set[int] = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if not t._parents:
            leaves.add(id(t))
        stack.extend(t._parents)
    return leaves


def gradient_routing_check(
    model: GaterNet, x: Array, labels, lambda_: float = 0.1, seed: int = 0
) -> RoutingReport:
    """Prove the gate penalty cannot steer the backbone.

    Symbolic: the penalty node's ancestor set contains no backbone
    parameter. Numeric: backward on the penalty alone leaves every
    backbone gradient at exactly zero (None counts as zero).
    """
    rng = np.random.default_rng(seed)
    _, bundle = model.forward(Tensor(x), training=True, rng=rng)
    penalty = l1_gate_penalty(bundle.selected, lambda_)
    leaves = _ancestor_leaves(penalty)

    backbone_reached = [
        name for name, t in model.params.items()
        if name.startswith("backbone.") and id(t) in leaves
    ]
    gater_reached = [
        name for name, t in model.params.items()
        if (name.startswith("gater.") or name.startswith("head.")) and id(t) in leaves
    ]
    for t in model.params.values():
        t.zero_grad()
    penalty.backward()
    max_backbone = 0.0
    for name, t in model.params.items():
        if name.startswith("backbone.") and t.grad is not None:
            max_backbone = max(max_backbone, float(np.abs(t.grad).max()))
    w2 = model.params.get("head.W2")
    w2_nonzero = bool(w2 is not None and w2.grad is not None and np.any(w2.grad != 0))
    for t in model.params.values():
        t.zero_grad()
    return RoutingReport(
        backbone_reached=backbone_reached,
        max_backbone_grad=max_backbone,
        head_w2_grad_nonzero=w2_nonzero,
        gater_reached=gater_reached,
    )


def sgd_step(
    param: Array, grad: Array, velocity: Array,
    lr: float, momentum: float, weight_decay: float,
) -> None:
    """v <- momentum * v + grad + wd * param; param <- param - lr * v."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    velocity *= momentum
    velocity += grad
    if weight_decay:
        velocity += weight_decay * param
    param -= lr * velocity


class SGD:
    """Momentum SGD over named tensors.

    Weight decay applies only to weight matrices and filters; 1-D
    parameters (biases, batchnorm gamma/beta) are exempt. Parameters with
    no gradient this step are skipped entirely.
    """

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9,
                 weight_decay: float = 0.0):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")
        self.params = dict(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(t.data) for k, t in self.params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def step(self, lr: float) -> None:
        for name, t in self.params.items():
            if t.grad is None:
                continue
            wd = self.weight_decay if t.data.ndim > 1 else 0.0
            sgd_step(t.data, t.grad, self.velocity[name], lr, self.momentum, wd)


@dataclass
class PhaseResult:
    phase: str
    checkpoint_path: Path
    metrics_path: Path
    rows: list[dict]
    final_eval_acc: float
    final_train_loss: float
    final_gate_activation: float | None
    model: GaterNet


def _epoch_rng(seed: int, phase: str, epoch: int) -> np.random.Generator:
    """One stream per (seed, phase, epoch): resuming at an epoch boundary
    replays the identical shuffle, augmentation, noise and dropout draws."""
    ss = np.random.SeedSequence(seed, spawn_key=(_PHASE_TAG[phase], epoch))
    return np.random.Generator(np.random.PCG64(ss))


def _metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def evaluate(model: GaterNet, phase: str, x: Array, y: Array,
             batch_size: int) -> tuple[float, float | None]:
    """Eval-mode accuracy, plus mean binary gate activation for joint."""
    correct = 0
    gate_sum = 0.0
    gate_count = 0
    for lo in range(0, len(x), batch_size):
        xb = Tensor(x[lo : lo + batch_size])
        if phase == "pretrain_backbone":
            logits = model.forward_backbone(xb, training=False)
        elif phase == "pretrain_gater":
            logits = model.forward_probe(xb, training=False)
        else:
            logits, bundle = model.forward(xb, training=False)
            gate_sum += float(bundle.g_beta.data.sum())
            gate_count += bundle.g_beta.data.size
        correct += int((logits.data.argmax(axis=1) == y[lo : lo + batch_size]).sum())
    acc = correct / len(x)
    mean_gate = gate_sum / gate_count if gate_count else None
    return acc, mean_gate


def _load_prefixed(model: GaterNet, ckpt_path: Path, prefixes: tuple[str, ...],
                   expect_spec_hash: str) -> None:
    tensors, meta = load_checkpoint(ckpt_path)
    if meta.get("spec_hash") != expect_spec_hash:
        raise CheckpointError(
            f"{ckpt_path}: model spec hash mismatch "
            f"(checkpoint {meta.get('spec_hash')}, current {expect_spec_hash})"
        )
    for name, t in model.params.items():
        if any(name.startswith(p + ".") for p in prefixes):
            if name not in tensors:
                raise CheckpointError(f"{ckpt_path}: missing tensor {name}")
            t.data[...] = tensors[name].astype(t.data.dtype, copy=False)
    for name, arr in model.buffers.items():
        if any(name.startswith(p + ".") for p in prefixes):
            if name not in tensors:
                raise CheckpointError(f"{ckpt_path}: missing buffer {name}")
            arr[...] = tensors[name].astype(arr.dtype, copy=False)


def _save_state(path: Path, model: GaterNet, opt: SGD, meta: dict) -> None:
    tensors: dict[str, Array] = {k: t.data for k, t in model.params.items()}
    tensors.update({k: v for k, v in model.buffers.items()})
    tensors.update({f"opt.{k}": v for k, v in opt.velocity.items()})
    save_checkpoint(path, tensors, meta)


def run_phase(
    spec: ModelSpec,
    cfg: TrainConfig,
    splits: DatasetSplits,
    out_dir: str | Path,
    backbone_ckpt: str | Path | None = None,
    gater_ckpt: str | Path | None = None,
    resume_ckpt: str | Path | None = None,
    from_scratch: bool = False,
) -> PhaseResult:
    """Train one phase to completion, checkpointing every epoch.

    The metrics CSV and checkpoint are rewritten atomically per epoch, so
    an interrupted run leaves the previous epoch's files intact and can be
    resumed with resume_ckpt.
    """
    from gaternet.model import spec_to_dict  # local import; defined below spec

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    phase = cfg.phase
    spec_hash = dict_hash(spec_to_dict(spec))
    cfg_hash = dict_hash(cfg.to_dict())

    model = GaterNet(spec, seed=cfg.seed, include_probe=(phase == "pretrain_gater"))
    if phase == "joint" and not from_scratch and resume_ckpt is None:
        if backbone_ckpt is None or gater_ckpt is None:
            raise ValueError(
                "joint phase needs --backbone-ckpt and --gater-ckpt (or the "
                "default pretrain checkpoints), or --from-scratch to skip them"
            )
        _load_prefixed(model, Path(backbone_ckpt), ("backbone",), spec_hash)
        _load_prefixed(model, Path(gater_ckpt), ("gater",), spec_hash)

    trained = model.trainable(_TRAINED_PREFIXES[phase])
    opt = SGD(trained, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    start_epoch = 0
    step = 0
    rows: list[dict] = []
    if resume_ckpt is not None:
        tensors, meta = load_checkpoint(resume_ckpt)
        if meta.get("spec_hash") != spec_hash:
            raise CheckpointError(
                f"{resume_ckpt}: model spec hash mismatch "
                f"(checkpoint {meta.get('spec_hash')}, current {spec_hash})"
            )
        if meta.get("train_config_hash") != cfg_hash:
            raise CheckpointError(
                f"{resume_ckpt}: train config hash mismatch "
                f"(checkpoint {meta.get('train_config_hash')}, current {cfg_hash})"
            )
        if meta.get("phase") != phase:
            raise CheckpointError(
                f"{resume_ckpt}: phase mismatch (checkpoint {meta.get('phase')}, "
                f"requested {phase})"
            )
        for name, t in model.params.items():
            t.data[...] = tensors[name]
        for name, arr in model.buffers.items():
            arr[...] = tensors[name]
        for name in opt.velocity:
            opt.velocity[name][...] = tensors[f"opt.{name}"]
        start_epoch = int(meta["epochs_done"])
        step = int(meta["step"])
        rows = list(meta.get("metrics_rows", []))

    steps_per_epoch = max(1, -(-len(splits.train_x) // cfg.batch_size))
    # Steps are numbered 0..E*S-1, so a span of E*S-1 puts the ramp's exact
    # end_rate on the run's final optimizer step.
    dropout_sched = GateDropoutSchedule(
        cfg.dropout_start, cfg.dropout_end,
        max(1, cfg.epochs * steps_per_epoch - 1),
    ) if phase == "joint" else None

    ckpt_path = out_dir / f"{phase}.ckpt"
    metrics_path = out_dir / f"metrics_{phase}.csv"
    desc = splits.descriptor
    n_train = len(splits.train_x)
    c = spec.gated_filter_total

    train_loss = float("nan")
    eval_acc = 0.0
    mean_gate: float | None = None
    if rows:
        # resuming an already-finished phase must report the stored finals
        last = rows[-1]
        train_loss = float(last["train_loss"])
        eval_acc = float(last["eval_acc"])
        g = last["mean_gate_activation"]
        mean_gate = float(g) if g != "" else None
    for epoch in range(start_epoch, cfg.epochs):
        rng = _epoch_rng(cfg.seed, phase, epoch)
        lr = lr_at(cfg.lr_schedule, epoch)
        order = rng.permutation(n_train)
        losses = []
        for lo in range(0, n_train, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            xb = splits.train_x[idx].copy()
            if desc.random_crop or desc.mirror:
                for i in range(len(xb)):
                    xb[i] = augment(xb[i], rng, desc.random_crop, desc.mirror)
            yb = splits.train_y[idx]
            xt = Tensor(xb)
            rate = 0.0
            if phase == "pretrain_backbone":
                loss = total_loss(model.forward_backbone(xt, True), yb, None, 0.0)
            elif phase == "pretrain_gater":
                loss = total_loss(model.forward_probe(xt, True), yb, None, 0.0)
            else:
                rate = dropout_rate_at(dropout_sched, step)
                logits, bundle = model.forward(xt, True, rng, dropout_rate=rate)
                loss = total_loss(logits, yb, bundle.selected, cfg.lambda_,
                                  cfg.reg_reduction)
            assert_all_finite(loss, f"{phase} loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            losses.append(loss.item())
            step += 1
        train_loss = float(np.mean(losses))
        eval_acc, mean_gate = evaluate(
            model, phase, splits.eval_x, splits.eval_y, cfg.batch_size
        )
        if phase == "pretrain_backbone":
            gate_field = 1.0  # gates are forced on in this phase
        elif phase == "pretrain_gater":
            gate_field = ""
        else:
            gate_field = mean_gate if c else ""
        last_rate = (
            dropout_rate_at(dropout_sched, step - 1) if dropout_sched else 0.0
        )
        rows.append({
            "epoch": epoch, "phase": phase, "train_loss": train_loss,
            "eval_acc": eval_acc, "mean_gate_activation": gate_field,
            "lr": lr, "dropout_rate": last_rate,
        })
        atomic_write_text(metrics_path, _metrics_csv(rows))
        _save_state(ckpt_path, model, opt, {
            "format": 1, "phase": phase, "epochs_done": epoch + 1, "step": step,
            "seed": cfg.seed, "spec_hash": spec_hash,
            "train_config_hash": cfg_hash, "metrics_rows": rows,
        })
        log.info("%s epoch %d: loss %.4f acc %.4f", phase, epoch, train_loss, eval_acc)

    return PhaseResult(
        phase=phase,
        checkpoint_path=ckpt_path,
        metrics_path=metrics_path,
        rows=rows,
        final_eval_acc=eval_acc,
        final_train_loss=train_loss,
        final_gate_activation=mean_gate,
        model=model,
    )
