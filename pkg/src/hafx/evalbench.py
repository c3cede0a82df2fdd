"""Ablation harness, recovered-performance metric, and the linear-vs-
quadratic scaling benchmark."""

import time
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    BACKEND,
    AblationMode,
    HybridSpec,
    WindowSpec,
    linear_attention_streaming,
    softmax_attention_full_np,
    streaming_state_bytes,
)
from .attention.backend import _stream_la_py
from .errors import ContractError
from .model import AttnSettings, lm_loss
from .rng import SeededRng

ALL_MODES = (
    AblationMode.FULL_HYBRID,
    AblationMode.SWA_ONLY,
    AblationMode.LA_ONLY,
    AblationMode.SINKS_ONLY,
    AblationMode.NO_ATTENTION,
    AblationMode.HYBRID_OVERLAP,
)


def recovered_performance(mode_avg, base_avg):
    """Percentage of the base-model average metric retained by a mode."""
    if base_avg <= 0:
        raise ContractError("recovered_performance requires base_avg > 0")
    return 100.0 * mode_avg / base_avg


def evaluate_task(model, data, attn: AttnSettings, batch_size=32):
    """(accuracy, mean loss, n_scored) on a task's scored positions."""
    correct, scored = 0, 0
    total_loss, n_batches = 0.0, 0
    tokens, targets = data["tokens"], data["targets"]
    acc_mask, loss_mask = data["acc_mask"], data["loss_mask"]
    for start in range(0, len(tokens), batch_size):
        idx = slice(start, start + batch_size)
        logits = model.forward_logits(tokens[idx], attn)
        pred = logits.data.argmax(axis=-1)
        m = acc_mask[idx]
        correct += int((pred[m] == targets[idx][m]).sum())
        scored += int(m.sum())
        total_loss += float(lm_loss(logits, targets[idx], loss_mask[idx]).data)
        n_batches += 1
    return correct / scored, total_loss / n_batches, scored


@dataclass
class EvalReport:
    stage: str
    tasks: list
    rows: list = field(default_factory=list)  # (mode, task, acc, loss)
    base_scores: dict = field(default_factory=dict)  # task -> base accuracy

    @property
    def base_avg(self):
        return float(np.mean([self.base_scores[t] for t in self.tasks]))

    def mode_avg(self, mode):
        accs = [acc for m, _t, acc, _l in self.rows if m == mode]
        return float(np.mean(accs))

    def recovered(self, mode):
        return recovered_performance(self.mode_avg(mode), self.base_avg)

    def csv_rows(self):
        """stage, mode, task, metric, value, recovered_pct (schema-stable)."""
        out = []
        for mode, task, acc, loss in self.rows:
            rec = self.recovered(mode)
            out.append((self.stage, mode.value, task, "accuracy", acc, rec))
            out.append((self.stage, mode.value, task, "loss", loss, rec))
        return out


def evaluate_ablations(model, tasks, modes=ALL_MODES, hy=None, win=None,
                       base_scores=None, stage="eval"):
    """One metric row per (mode, task) over identical eval batches.

    `tasks` maps task name -> dataset. `base_scores` are the full-softmax
    reference accuracies; computed here from the same model if not given.
    `win` may be a single WindowSpec or a per-task-name dict (the collapse
    probe shrinks the window for associative recall only).
    """
    hy = hy or HybridSpec()
    win = win or WindowSpec()
    if base_scores is None:
        base_scores = {
            name: evaluate_task(model, data, AttnSettings(kind="softmax"))[0]
            for name, data in tasks.items()
        }
    report = EvalReport(stage=stage, tasks=list(tasks), base_scores=base_scores)
    for mode in modes:
        for name, data in tasks.items():
            w = win[name] if isinstance(win, dict) else win
            attn = AttnSettings(kind="hybrid", mode=mode, win=w, hy=hy)
            acc, loss, _ = evaluate_task(model, data, attn)
            report.rows.append((mode, name, acc, loss))
    return report


# -- scaling benchmark ------------------------------------------------------------


def _time_median(fn, reps, min_time=1e-2):
    """Median wall time of fn over reps; short kernels get an inner loop so
    each sample exceeds the timer floor."""
    fn()  # warm-up (JIT compile, caches)
    t0 = time.perf_counter()
    fn()
    once = time.perf_counter() - t0
    inner = max(1, int(np.ceil(min_time / max(once, 1e-9))))
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter() - t0) / inner)
    return float(np.median(samples))


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)  # (path, T, median_ms, aux_bytes)

    def ratios(self, path):
        """time(2T)/time(T) for consecutive doublings of T on one path."""
        pts = sorted((T, ms) for p, T, ms, _ in self.rows if p == path)
        out = {}
        for (t1, m1), (t2, m2) in zip(pts, pts[1:]):
            if t2 == 2 * t1:
                out[t1] = m2 / m1
        return out

    def csv_rows(self):
        return list(self.rows)


def benchmark_scaling(T_list, d=64, d_prime=8, reps=3, seed=0,
                      include_numpy_fallback=True):
    """Median wall times for the streaming-LA and quadratic-softmax paths.

    Streaming auxiliary state is the fixed accumulator pair; the quadratic
    path materialises the T x T score matrix.
    """
    if reps < 3:
        raise ContractError("benchmark requires >= 3 repetitions")
    rng = SeededRng(seed, "bench")
    report = BenchReport()
    F = 2 * d_prime
    for T in sorted(T_list):
        r = rng.child(f"T{T}")
        q = r.normal((T, d))
        k = r.normal((T, d))
        v = r.normal((T, d))
        phi_q = np.abs(r.normal((T, F))) + 0.01
        phi_k = np.abs(r.normal((T, F))) + 0.01

        ms = _time_median(lambda: linear_attention_streaming(phi_q, phi_k, v), reps)
        report.rows.append((f"streaming-{BACKEND}", T, ms * 1e3,
                            streaming_state_bytes(F, d)))
        if include_numpy_fallback and BACKEND != "numpy":
            ms = _time_median(lambda: _stream_la_py(phi_q, phi_k, v, 1e-6), reps)
            report.rows.append(("streaming-numpy", T, ms * 1e3,
                                streaming_state_bytes(F, d)))
        ms = _time_median(lambda: softmax_attention_full_np(q, k, v), reps)
        report.rows.append(("quadratic-softmax", T, ms * 1e3, T * T * 8))
    return report
