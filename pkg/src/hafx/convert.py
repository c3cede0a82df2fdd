"""Conversion machinery: attention-transfer objectives, LoRA fine-tuning
with scheduled sliding-window dropout, and the two-stage weights-transfer +
fine-tune pipeline with early stopping."""

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AblationMode,
    HybridSpec,
    WindowSpec,
    guard_count,
    linear_attention_masked,
    reset_guard_count,
    sliding_window_attention,
)
from .attention.ops import causal_mult_mask, lagged_mult_mask
from .errors import ConfigError, ContractError
from .model import AttnSettings, Model, lm_loss
from .optim import AdamW, ReduceOnPlateau
from .rng import SeededRng
from .tensor import Tensor

CE_LOG_EPS = 1e-12


class TransferObjective(enum.Enum):
    WEIGHTS_CE = "weights_ce"
    OUTPUTS_MSE = "outputs_mse"
    HYBRID_OUTPUTS_MSE = "hybrid_outputs_mse"


@dataclass
class SSDSchedule:
    """Per-epoch SWA dropout rates and window sizes; last value held."""

    dropout_per_epoch: list
    window_per_epoch: list

    def __post_init__(self):
        if not self.dropout_per_epoch or not self.window_per_epoch:
            raise ConfigError("SSD schedule lists must be non-empty")
        for r in self.dropout_per_epoch:
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"dropout rate {r} outside [0, 1]")
        for w in self.window_per_epoch:
            if w < 1:
                raise ConfigError(f"window {w} must be >= 1")


def ssd_sample(schedule: SSDSchedule, epoch: int, rng: SeededRng):
    """One per-step coin: (drop_swa, window) for the given 1-based epoch."""
    if epoch < 1:
        raise ContractError("epoch is 1-based")
    rate = schedule.dropout_per_epoch[min(epoch - 1, len(schedule.dropout_per_epoch) - 1)]
    window = schedule.window_per_epoch[min(epoch - 1, len(schedule.window_per_epoch) - 1)]
    drop = bool(rng.uniform() < rate)
    return drop, int(window)


@dataclass
class TrainConfig:
    lr_transfer: float = 1e-2
    lr_finetune: float = 1e-4
    lr_base: float = 1e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    plateau_factor: float = 0.5
    plateau_patience: int = 2
    plateau_min_delta: float = 1e-4
    transfer_epochs: int = 1
    finetune_epochs: int = 3
    batch_size: int = 16
    accumulation: int = 4
    seed: int = 0


@dataclass
class StageReport:
    stage: str
    epoch_losses: list = field(default_factory=list)
    eval_losses: list = field(default_factory=list)
    guard_counts: list = field(default_factory=list)
    wall_time_s: float = 0.0
    checkpoints: list = field(default_factory=list)

    def to_dict(self):
        return {
            "stage": self.stage,
            "epoch_losses": self.epoch_losses,
            "eval_losses": self.eval_losses,
            "guard_counts": self.guard_counts,
            "wall_time_s": round(self.wall_time_s, 3),
            "checkpoints": self.checkpoints,
        }


# -- transfer objectives --------------------------------------------------------


def _teacher_weights(q, k):
    d = q.shape[-1]
    T = q.shape[-2]
    scores = (q @ np.swapaxes(k, -1, -2)) / np.sqrt(d)
    scores = np.where(np.tril(np.ones((T, T), dtype=bool)), scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    return w / w.sum(axis=-1, keepdims=True)


def transfer_loss(objective, q, k, v, phi, win, hy):
    """Distillation loss for one (layer, head); only phi carries gradients.

    q, k, v are post-RoPE numpy constants from the frozen base projections;
    the teacher is the full causal softmax computed from them.
    """
    from .attention import feature_map_apply

    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    T = q.shape[-2]
    qt, kt, vt = Tensor(q), Tensor(k), Tensor(v)
    phi_q = feature_map_apply(phi, qt)
    phi_k = feature_map_apply(phi, kt)

    if objective is TransferObjective.WEIGHTS_CE:
        teacher = _teacher_weights(q, k)
        kernel = (phi_q @ phi_k.swapaxes(-1, -2)) * Tensor(causal_mult_mask(T))
        p = kernel / kernel.sum(axis=-1, keepdims=True).clamp_min(CE_LOG_EPS)
        ce = -(Tensor(teacher) * (p + CE_LOG_EPS).log()).sum(axis=-1)
        return ce.mean()

    teacher_out = _teacher_weights(q, k) @ v
    if objective is TransferObjective.OUTPUTS_MSE:
        student = linear_attention_masked(phi_q, phi_k, vt, causal_mult_mask(T))
    elif objective is TransferObjective.HYBRID_OUTPUTS_MSE:
        mask = causal_mult_mask(T) if hy.overlap else lagged_mult_mask(T, win.window)
        la = linear_attention_masked(phi_q, phi_k, vt, mask)
        swa = sliding_window_attention(qt, kt, vt, win.window)
        student = hy.g * swa + (1.0 - hy.g) * la
    else:  # pragma: no cover
        raise ValueError(objective)
    diff = student - Tensor(teacher_out)
    return (diff * diff).mean()


def _batches(n, batch_size):
    for start in range(0, n, batch_size):
        yield np.arange(start, min(start + batch_size, n))


def run_base_training(model: Model, cfg: TrainConfig, train, heldout,
                      epochs, lr=None, checkpoint_fn=None):
    """Full-parameter LM training with plain softmax attention; produces the
    desk-scale stand-in for a pre-trained base model."""
    model.set_trainable(lambda n: ".phi." not in n and ".lora_" not in n)
    # constant lr: associative recall learns via a late phase transition, and
    # decaying on the pre-transition plateau can prevent it entirely
    opt = AdamW(model.trainable_parameters(), lr or cfg.lr_base,
                cfg.betas, cfg.adam_eps, cfg.weight_decay)
    attn = AttnSettings(kind="softmax")
    report = StageReport(stage="base")
    shuffle_rng = SeededRng(cfg.seed, "base/shuffle")
    t0 = time.perf_counter()
    for epoch in range(1, epochs + 1):
        losses = []
        # fresh batch composition every epoch: replaying identical batches in
        # identical order removes the gradient noise the recall transition needs
        order = shuffle_rng.child(str(epoch)).permutation(len(train["tokens"]))
        step_idx = [order[b] for b in _batches(len(order), cfg.batch_size)]
        for s in range(0, len(step_idx), cfg.accumulation):
            group = step_idx[s:s + cfg.accumulation]
            loss = None
            for idx in group:
                logits = model.forward_logits(train["tokens"][idx], attn)
                mask = train["loss_mask"][idx] if "loss_mask" in train else None
                part = lm_loss(logits, train["targets"][idx], mask)
                loss = part if loss is None else loss + part
            loss = loss * (1.0 / len(group))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        heldout_loss = evaluate_lm(model, heldout["tokens"], heldout["targets"],
                                   attn, heldout.get("loss_mask"))
        report.epoch_losses.append(float(np.mean(losses)))
        report.eval_losses.append(heldout_loss)
        if checkpoint_fn is not None:
            report.checkpoints.append(checkpoint_fn(model, epoch))
    report.wall_time_s = time.perf_counter() - t0
    return report


def run_attention_transfer(model: Model, objective, cfg: TrainConfig, data,
                           win=None, hy=None, epochs=None):
    """Train only the feature maps against the frozen base model's attention.

    `data` is an int token array (N, T). The teacher is recomputed per batch
    from the student's own hidden states under full softmax attention.
    """
    if model.phi is None:
        raise ContractError("attach feature maps before attention transfer")
    win = win or WindowSpec()
    hy = hy or HybridSpec()
    epochs = epochs or cfg.transfer_epochs
    model.set_trainable(lambda n: ".phi." in n)
    opt = AdamW(model.trainable_parameters(), cfg.lr_transfer,
                cfg.betas, cfg.adam_eps, cfg.weight_decay)
    report = StageReport(stage="post-transfer")
    t0 = time.perf_counter()
    base_attn = AttnSettings(kind="softmax")
    for _epoch in range(epochs):
        losses = []
        reset_guard_count()
        for idx in _batches(len(data), cfg.batch_size):
            capture = []
            model.forward_logits(data[idx], base_attn, capture=capture)
            loss = None
            for (_layer, _head, q, k, v) in capture:
                part = transfer_loss(objective, q, k, v,
                                     model.phi[_layer][_head], win, hy)
                loss = part if loss is None else loss + part
            loss = loss * (1.0 / model.cfg.n_heads)  # sum layers, mean heads
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        report.epoch_losses.append(float(np.mean(losses)))
        report.guard_counts.append(guard_count())
    report.wall_time_s = time.perf_counter() - t0
    return report


def finetune_epoch(model: Model, cfg: TrainConfig, ssd, data, targets, epoch,
                   opt: AdamW, rng: SeededRng, win=None, hy=None, loss_mask=None):
    """One LoRA fine-tuning epoch with optional scheduled SWA dropout.

    A single dropout coin per optimisation step applies to all layers. A
    dropped step zeroes the SWA branch (output = (1-g) (.) LA) with no
    rescaling, matching the inference-time branch-zeroing algebra.
    """
    if model.lora is None:
        raise ContractError("attach LoRA adapters before fine-tuning")
    win = win or WindowSpec()
    hy = hy or HybridSpec()
    losses = []
    reset_guard_count()
    # Micro-batches grouped into optimisation steps of size `accumulation`.
    step_idx = list(_batches(len(data), cfg.batch_size))
    for s in range(0, len(step_idx), cfg.accumulation):
        group = step_idx[s:s + cfg.accumulation]
        if ssd is not None:
            drop, window = ssd_sample(ssd, epoch, rng.child(f"ssd/{epoch}/{s}"))
        else:
            drop, window = False, win.window
        mode = AblationMode.LA_ONLY if drop else AblationMode.FULL_HYBRID
        attn = AttnSettings(kind="hybrid", mode=mode,
                            win=WindowSpec(window, win.sink_count), hy=hy)
        loss = None
        for idx in group:
            logits = model.forward_logits(data[idx], attn)
            mask = loss_mask[idx] if loss_mask is not None else None
            part = lm_loss(logits, targets[idx], mask)
            loss = part if loss is None else loss + part
        loss = loss * (1.0 / len(group))
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
    return float(np.mean(losses)), guard_count()


def evaluate_lm(model, data, targets, attn, loss_mask=None, batch_size=32):
    """Held-out mean LM loss (no gradients)."""
    total, count = 0.0, 0
    for idx in _batches(len(data), batch_size):
        logits = model.forward_logits(data[idx], attn)
        mask = loss_mask[idx] if loss_mask is not None else None
        total += float(lm_loss(logits, targets[idx], mask).data) * len(idx)
        count += len(idx)
    return total / count


def run_finetune(model: Model, cfg: TrainConfig, ssd, train, heldout,
                 win=None, hy=None, checkpoint_fn=None, epochs=None,
                 train_phi=False):
    """LoRA fine-tuning loop with reduce-on-plateau on a held-out loss."""
    win = win or WindowSpec()
    hy = hy or HybridSpec()
    epochs = epochs if epochs is not None else cfg.finetune_epochs
    model.set_trainable(lambda n: ".lora_" in n or (train_phi and ".phi." in n))
    opt = AdamW(model.trainable_parameters(), cfg.lr_finetune,
                cfg.betas, cfg.adam_eps, cfg.weight_decay)
    sched = ReduceOnPlateau(opt, cfg.plateau_factor, cfg.plateau_patience,
                            cfg.plateau_min_delta)
    rng = SeededRng(cfg.seed, "finetune")
    report = StageReport(stage="post-finetune")
    t0 = time.perf_counter()
    eval_attn = AttnSettings(kind="hybrid", mode=AblationMode.FULL_HYBRID,
                             win=win, hy=hy)
    for epoch in range(1, epochs + 1):
        loss, guards = finetune_epoch(
            model, cfg, ssd, train["tokens"], train["targets"], epoch, opt, rng,
            win=win, hy=hy, loss_mask=train.get("loss_mask"))
        heldout_loss = evaluate_lm(model, heldout["tokens"], heldout["targets"],
                                   eval_attn, heldout.get("loss_mask"))
        sched.step(heldout_loss)
        report.epoch_losses.append(loss)
        report.eval_losses.append(heldout_loss)
        report.guard_counts.append(guards)
        if checkpoint_fn is not None:
            report.checkpoints.append(checkpoint_fn(model, epoch))
    report.wall_time_s = time.perf_counter() - t0
    return report


def run_hedgecats(model: Model, cfg: TrainConfig, stage2_epochs, transfer_data,
                  train, heldout, eval_gap_fn=None, win=None, hy=None,
                  checkpoint_fn=None):
    """Two-stage conversion: LA-only attention-weights transfer, then brief
    hybrid LoRA fine-tuning with early stopping on the hybrid-vs-SWA-only
    eval gap (stop once the gap is non-positive)."""
    win = win or WindowSpec()
    hy = hy or HybridSpec()
    stage1 = run_attention_transfer(model, TransferObjective.WEIGHTS_CE, cfg,
                                    transfer_data, win=win, hy=hy)
    if checkpoint_fn is not None:
        stage1.checkpoints.append(checkpoint_fn(model, 0))
    if stage2_epochs == 0:
        return stage1, StageReport(stage="post-finetune")

    if model.lora is None:
        model.lora_attach()
    model.set_trainable(lambda n: ".lora_" in n)
    opt = AdamW(model.trainable_parameters(), cfg.lr_finetune,
                cfg.betas, cfg.adam_eps, cfg.weight_decay)
    sched = ReduceOnPlateau(opt, cfg.plateau_factor, cfg.plateau_patience,
                            cfg.plateau_min_delta)
    rng = SeededRng(cfg.seed, "hedgecats-ft")
    stage2 = StageReport(stage="post-finetune")
    eval_attn = AttnSettings(kind="hybrid", mode=AblationMode.FULL_HYBRID,
                             win=win, hy=hy)
    t0 = time.perf_counter()
    for epoch in range(1, stage2_epochs + 1):
        loss, guards = finetune_epoch(
            model, cfg, None, train["tokens"], train["targets"], epoch, opt, rng,
            win=win, hy=hy, loss_mask=train.get("loss_mask"))
        heldout_loss = evaluate_lm(model, heldout["tokens"], heldout["targets"],
                                   eval_attn, heldout.get("loss_mask"))
        sched.step(heldout_loss)
        stage2.epoch_losses.append(loss)
        stage2.eval_losses.append(heldout_loss)
        stage2.guard_counts.append(guards)
        if checkpoint_fn is not None:
            stage2.checkpoints.append(checkpoint_fn(model, epoch))
        if eval_gap_fn is not None and eval_gap_fn(model) <= 0.0:
            break
    stage2.wall_time_s = time.perf_counter() - t0
    return stage1, stage2


def inference_time_hybrid(hy: HybridSpec, win=None) -> AttnSettings:
    """Evaluator settings that add SWA at inference time only; no weights
    change. Overlap lets LA see tokens inside the window too."""
    mode = AblationMode.HYBRID_OVERLAP if hy.overlap else AblationMode.FULL_HYBRID
    return AttnSettings(kind="hybrid", mode=mode, win=win or WindowSpec(), hy=hy)
