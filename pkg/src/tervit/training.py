"""Quantization-aware training: single phases, the progressive 8-bit -> ternary
schedule, and the schedule/component ablation pipelines."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from tervit import autodiff as ad
from tervit.autodiff import GradTape
from tervit.data import Dataset
from tervit.exceptions import ConfigError, TrainingDivergedError
from tervit.model import VisionTransformer, ViTConfig
from tervit.quantization import QuantizationPolicy

log = logging.getLogger(__name__)

TRACE_HEADER = ["phase", "epoch", "train_loss", "train_acc", "eval_acc"]
MODES = ("real32", "int8", "ternary")
_PHASE_STREAM = {"real32": 0, "int8": 1, "ternary": 2}


@dataclass(frozen=True)
class TrainSchedule:
    """Epoch split and optimizer hyperparameters.

    ``phase_a_epochs`` run with 8-bit weights, ``phase_b_epochs`` with
    ternary weights; ``pretrain_epochs`` of real-valued training produce the
    starting model unless ``from_scratch`` is set.
    """

    phase_a_epochs: int = 3
    phase_b_epochs: int = 7
    lr: float = 2e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    seed: int = 42
    pretrain_epochs: int = 0
    from_scratch: bool = False

    def __post_init__(self):
        for key in ("phase_a_epochs", "phase_b_epochs", "pretrain_epochs"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0", key=key)
        if self.total_epochs <= 0:
            raise ConfigError("schedule has no epochs", key="phase_b_epochs")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be >= 0", key="lr")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive", key="batch_size")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError("betas must lie in [0, 1)", key="beta1")

    @property
    def total_epochs(self) -> int:
        return self.phase_a_epochs + self.phase_b_epochs


# -- optimizer --------------------------------------------------------------------


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Adam with decoupled weight decay, applied to named numpy parameters."""

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, decay: set[str] | None = None):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = set(params) if decay is None else set(decay)
        self.state = AdamWState()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        st = self.state
        st.step += 1
        bc1 = 1 - b1**st.step
        bc2 = 1 - b2**st.step
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = st.exp_avg.setdefault(name, np.zeros_like(p.data))
            v = st.exp_avg_sq.setdefault(name, np.zeros_like(p.data))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if name in self.decay and self.weight_decay:
                p.data = p.data - lr * self.weight_decay * p.data
            denom = np.sqrt(v / bc2) + self.eps
            p.data = (p.data - lr * (m / bc1) / denom).astype(p.data.dtype, copy=False)


def decay_set(model: VisionTransformer) -> set[str]:
    """Weight decay on linear weight matrices only."""
    return {f"{lid}.weight" for lid in model.linears}


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


# -- traces -------------------------------------------------------------------------


@dataclass
class TraceRow:
    phase: str
    epoch: int
    train_loss: float
    train_acc: float
    eval_acc: float | None = None


def trace_csv(rows: list[TraceRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for r in rows:
        w.writerow([r.phase, r.epoch, repr(float(r.train_loss)), repr(float(r.train_acc)),
                    "" if r.eval_acc is None else repr(float(r.eval_acc))])
    return buf.getvalue()


# -- loops ----------------------------------------------------------------------------


def evaluate(model: VisionTransformer, dataset: Dataset, policy: QuantizationPolicy,
             batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy of ``model`` under ``policy``."""
    total_loss, correct = 0.0, 0
    for xb, yb in dataset.batches(batch_size):
        logits = model.forward(xb, policy)
        total_loss += float(ad.cross_entropy(logits, yb).data) * len(yb)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    return total_loss / len(dataset), correct / len(dataset)


def _param_norms(model: VisionTransformer) -> dict[str, float]:
    return {k: float(np.linalg.norm(v.data)) for k, v in model.params.items()}


@dataclass
class PhaseRunner:
    """Carries optimizer state and the global step across consecutive phases."""

    model: VisionTransformer
    schedule: TrainSchedule
    total_steps: int
    optimizer: AdamW | None = None
    step: int = 0

    def __post_init__(self):
        if self.optimizer is None:
            s = self.schedule
            self.optimizer = AdamW(self.model.params, lr=s.lr, betas=s.betas, eps=s.eps,
                                   weight_decay=s.weight_decay, decay=decay_set(self.model))

    def run(self, policy: QuantizationPolicy, dataset: Dataset, epochs: int, phase: str,
            stream: int, eval_data: Dataset | None = None, on_start=None) -> list[TraceRow]:
        model, s = self.model, self.schedule
        rng = np.random.default_rng([s.seed, stream])
        rows = []
        if on_start is not None:
            on_start(model)
        for epoch in range(epochs):
            loss_sum, correct = 0.0, 0
            for xb, yb in dataset.batches(s.batch_size, rng):
                model.zero_grad()
                with GradTape() as tape:
                    logits = model.forward(xb, policy)
                    loss = ad.cross_entropy(logits, yb)
                value = float(loss.data)
                lr = cosine_lr(s.lr, self.step, self.total_steps)
                if not math.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss in phase {phase!r}, epoch {epoch}, step {self.step}",
                        dump={"phase": phase, "epoch": epoch, "step": self.step, "lr": lr,
                              "loss": value, "labels": yb.tolist(),
                              "param_norms": _param_norms(model)},
                    )
                tape.backward(loss)
                self.optimizer.step(lr)
                self.step += 1
                loss_sum += value * len(yb)
                correct += int((logits.data.argmax(axis=1) == yb).sum())
            eval_acc = evaluate(model, eval_data, policy)[1] if eval_data is not None else None
            row = TraceRow(phase, epoch, loss_sum / len(dataset), correct / len(dataset), eval_acc)
            log.info("%s epoch %d loss %.4f acc %.3f", phase, epoch, row.train_loss,
                     row.train_acc)
            rows.append(row)
        return rows


def _steps_per_epoch(dataset: Dataset, schedule: TrainSchedule) -> int:
    return -(-len(dataset) // schedule.batch_size)


def train_phase(model: VisionTransformer, mode: str, schedule: TrainSchedule, dataset: Dataset,
                policy: QuantizationPolicy | None = None, epochs: int | None = None,
                eval_data: Dataset | None = None) -> list[TraceRow]:
    """Train ``model`` in place with one quantization mode.

    Latent float weights are updated by AdamW; the quantized weights used in
    each forward pass are recomputed from them every step.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}", key="mode")
    policy = (policy or QuantizationPolicy.ternary()).with_mode(mode)
    epochs = schedule.total_epochs if epochs is None else epochs
    runner = PhaseRunner(model, schedule, epochs * _steps_per_epoch(dataset, schedule))
    return runner.run(policy, dataset, epochs, mode, _PHASE_STREAM[mode], eval_data)


@dataclass
class ProgressiveResult:
    phase_a: list[TraceRow]
    phase_b: list[TraceRow]
    handoff_exact: bool
    handoff_state: dict[str, np.ndarray] | None = None

    @property
    def trace(self) -> list[TraceRow]:
        return self.phase_a + self.phase_b


def progressive_train(model: VisionTransformer, schedule: TrainSchedule, dataset: Dataset,
                      policy: QuantizationPolicy | None = None,
                      eval_data: Dataset | None = None,
                      keep_handoff_state: bool = False) -> ProgressiveResult:
    """8-bit proxy phase followed by ternary training of the same latents.

    The learning-rate cosine runs over both phases without restart, and the
    optimizer state carries over the transition.
    """
    policy = policy or QuantizationPolicy.ternary()
    runner = PhaseRunner(model, schedule, schedule.total_epochs * _steps_per_epoch(dataset,
                                                                                   schedule))
    rows_a = []
    if schedule.phase_a_epochs:
        rows_a = runner.run(policy.with_mode("int8"), dataset, schedule.phase_a_epochs, "int8",
                            _PHASE_STREAM["int8"], eval_data)
    end_of_a = model.state_dict()
    start_of_b: dict = {}
    rows_b = runner.run(policy.with_mode("ternary"), dataset, schedule.phase_b_epochs,
                        "ternary", _PHASE_STREAM["ternary"], eval_data,
                        on_start=lambda m: start_of_b.update(m.state_dict()))
    exact = all(np.array_equal(end_of_a[k].view(np.uint8), start_of_b[k].view(np.uint8))
                for k in end_of_a)
    return ProgressiveResult(rows_a, rows_b, exact, end_of_a if keep_handoff_state else None)


def pretrain(model: VisionTransformer, schedule: TrainSchedule, dataset: Dataset,
             eval_data: Dataset | None = None) -> list[TraceRow]:
    """Real-valued training that stands in for a pre-trained checkpoint."""
    if schedule.pretrain_epochs == 0:
        return []
    rows = train_phase(model, "real32", schedule, dataset, epochs=schedule.pretrain_epochs,
                       eval_data=eval_data)
    for r in rows:
        r.phase = "pretrain"
    return rows


# -- ablations -------------------------------------------------------------------------

ABLATION_ROWS = (
    "Real-valued",
    "TWN (layer-wise)",
    "TWN + channel-wise",
    "TWN + PT",
    "TWN + channel-wise + PT",
)


@dataclass
class AblationRow:
    method: str
    epochs: int
    initial_loss: float
    start_loss: float
    final_loss: float
    train_acc: float
    trace: list[TraceRow] = field(repr=False, default_factory=list)
    handoff_exact: bool | None = None

    @property
    def loss_reduction(self) -> float:
        return 1.0 - self.final_loss / self.initial_loss


def _fresh_model(config: ViTConfig, state: dict) -> VisionTransformer:
    m = VisionTransformer(config)
    m.load_state_dict(state)
    return m


def _starting_state(config: ViTConfig, schedule: TrainSchedule, dataset: Dataset):
    model = VisionTransformer(config, seed=schedule.seed)
    initial_loss = evaluate(model, dataset, QuantizationPolicy.real32())[0]
    if not schedule.from_scratch:
        pretrain(model, schedule, dataset)
    return model.state_dict(), initial_loss


def ablation_suite(dataset: Dataset, config: ViTConfig, schedule: TrainSchedule,
                   base_policy: QuantizationPolicy | None = None) -> list[AblationRow]:
    """Component ablation: TWN baseline, +channel-wise, +PT, +both, plus real-valued.

    All pipelines start from the same real-valued state and train for
    ``schedule.total_epochs``. Losses and accuracies are measured under each
    row's final quantization mode.
    """
    base = base_policy or QuantizationPolicy.ternary()
    start, initial_loss = _starting_state(config, schedule, dataset)
    no_pt = replace(schedule, phase_a_epochs=0, phase_b_epochs=schedule.total_epochs)
    rows = []
    for method in ABLATION_ROWS:
        model = _fresh_model(config, start)
        granularity = "channel" if "channel-wise" in method else "layer"
        policy = replace(base, granularity=granularity)
        handoff = None
        if method == "Real-valued":
            eval_policy = policy.with_mode("real32")
            trace = train_phase(model, "real32", schedule, dataset, policy)
        elif "PT" in method:
            eval_policy = policy.with_mode("ternary")
            start_loss = evaluate(model, dataset, policy.with_mode("int8"))[0]
            res = progressive_train(model, schedule, dataset, policy)
            trace, handoff = res.trace, res.handoff_exact
        else:
            eval_policy = policy.with_mode("ternary")
            trace = progressive_train(model, no_pt, dataset, policy).trace
        if "PT" not in method:
            start_loss = evaluate(_fresh_model(config, start), dataset, eval_policy)[0]
        final_loss, acc = evaluate(model, dataset, eval_policy)
        rows.append(AblationRow(method, schedule.total_epochs, initial_loss, start_loss,
                                final_loss, acc, trace, handoff))
    return rows


def schedule_sweep(dataset: Dataset, config: ViTConfig, schedule: TrainSchedule,
                   splits=((1, 9), (3, 7), (5, 5), (7, 3)),
                   base_policy: QuantizationPolicy | None = None) -> list[AblationRow]:
    """Progressive-training split sweep with the two non-progressive baselines."""
    base = base_policy or QuantizationPolicy.ternary()
    start, initial_loss = _starting_state(config, schedule, dataset)
    tern = base.with_mode("ternary")
    rows = []
    scratch = VisionTransformer(config, seed=schedule.seed)
    total = schedule.total_epochs
    baseline = replace(schedule, phase_a_epochs=0, phase_b_epochs=total)
    for label, model in (("From scratch", scratch), ("From real-valued",
                                                     _fresh_model(config, start))):
        start_loss = evaluate(model, dataset, tern)[0]
        trace = progressive_train(model, baseline, dataset, base).trace
        rows.append(AblationRow(label, total, initial_loss, start_loss,
                                *evaluate(model, dataset, tern), trace))
    for a, b in splits:
        model = _fresh_model(config, start)
        sched = replace(schedule, phase_a_epochs=a, phase_b_epochs=b)
        start_loss = evaluate(model, dataset, base.with_mode("int8"))[0]
        res = progressive_train(model, sched, dataset, base)
        rows.append(AblationRow(f"({a},{b})", a + b, initial_loss, start_loss,
                                *evaluate(model, dataset, tern), res.trace, res.handoff_exact))
    return rows


def format_table(rows: list[AblationRow], title: str = "") -> str:
    lines = [title] if title else []
    lines.append(f"{'Method':<36} {'Epochs':>6} {'Loss':>8} {'Train acc':>9}")
    for r in rows:
        lines.append(f"{r.method:<36} {r.epochs:>6} {r.final_loss:>8.4f} {r.train_acc:>9.3f}")
    return "\n".join(lines)


def sweep_table(rows: list[AblationRow]) -> str:
    """Single-row layout: baselines followed by each (a, b) split."""
    header = " | ".join(r.method for r in rows)
    values = " | ".join(f"{100 * r.train_acc:.1f}" for r in rows)
    return f"Setup | {header}\nTrain acc (%) | {values}"
