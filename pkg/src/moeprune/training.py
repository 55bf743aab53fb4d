"""Optimisation loops: pre-training, the fine-tuning settings, two-pass baselines."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint
from .config import OptimConfig, RunConfig
from .errors import ConfigError, NumericError
from .model import MoEEncoder, model_forward
from .pruning import ProficiencyLedger, PruneConfig, ScheduleState, window_shares
from .tasks import Batch, TaskSpec, batch_rng, evaluate, gen_finetune_batch, gen_pretrain_batch

log = logging.getLogger(__name__)

FINETUNE_MODES = ("dense-ft", "moe-ft", "staged", "eager")
METRIC_COLUMNS = ("step", "phase", "loss", "lr", "layer", "window", "expert", "share", "hits", "survivors", "event")

# independent random streams per purpose
STREAM_PRETRAIN, STREAM_FINETUNE, STREAM_POOL, STREAM_EVAL = 1, 2, 3, 4


class TrainingDiverged(NumericError):
    def __init__(self, message: str, ledger_snapshot: dict):
        super().__init__(message)
        self.ledger_snapshot = ledger_snapshot


def learning_rate(step: int, max_lr: float, warmup: int, total: int) -> float:
    """Linear warmup to ``max_lr`` then linear decay to zero at ``total``.

    ``step`` is the zero-based index of the update being applied.
    """
    if warmup > 0 and step < warmup:
        return max_lr * (step + 1) / warmup
    return max_lr * max(0, total - step) / max(1, total - warmup)


class Adam:
    """Adam with decoupled weight decay on matrices."""

    def __init__(self, params: dict[str, ag.Tensor], config: OptimConfig, total_steps: int):
        self.params = params
        self.config = config
        self.total_steps = total_steps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def lr(self) -> float:
        c = self.config
        return learning_rate(self.t, c.lr, c.warmup_steps, self.total_steps)

    def step(self, frozen: set[str] = frozenset()) -> float:
        c = self.config
        lr = self.lr()
        self.t += 1
        b1, b2 = c.beta1, c.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            if name in frozen:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            update = (m / corr1) / (np.sqrt(v / corr2) + c.eps)
            if p.data.ndim >= 2 and c.weight_decay:
                update = update + c.weight_decay * p.data
            p.data = p.data - lr * update
        return lr

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = np.array(arrays[f"opt.m.{k}"])
            self.v[k] = np.array(arrays[f"opt.v.{k}"])
        self.t = t


@dataclass
class RunMetrics:
    rows: list[dict] = field(default_factory=list)
    wall_clock: dict[str, float] = field(default_factory=dict)
    final_accuracy: float | None = None
    final_loss: float | None = None

    def add(self, **row) -> None:
        self.rows.append({c: row.get(c, "") for c in METRIC_COLUMNS})

    def losses(self, phase: str | None = None) -> list[float]:
        return [r["loss"] for r in self.rows if r["event"] == "" and r["layer"] == ""
                and (phase is None or r["phase"] == phase) and r["loss"] != ""]

    def window_rows(self) -> list[dict]:
        return [r for r in self.rows if r["window"] != ""]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


class Trainer:
    """One training run: model, optimiser, data stream, ledger and schedule."""

    def __init__(self, model: MoEEncoder, optim: Adam, task: TaskSpec, phase: str, seed: int,
                 batch_size: int, total_steps: int, subtask: int | None = None,
                 schedule: ScheduleState | None = None, pool: Batch | None = None):
        self.model = model
        self.optim = optim
        self.task = task
        self.phase = phase
        self.seed = seed
        self.batch_size = batch_size
        self.total_steps = total_steps
        self.subtask = subtask
        self.pool = pool
        layers = sorted(model.moe_layers)
        self.ledger = ProficiencyLedger(layers, model.config.num_experts)
        self.schedule = schedule
        self.step = 0
        self.metrics = RunMetrics()
        self.last_gates = None

    def next_batch(self) -> Batch:
        if self.phase == "pretrain":
            return gen_pretrain_batch(self.task, self.batch_size, batch_rng(self.seed, STREAM_PRETRAIN, self.step))
        rng = batch_rng(self.seed, STREAM_FINETUNE, self.step)
        if self.pool is not None:
            return self.pool.take(rng.integers(len(self.pool), size=self.batch_size))
        return gen_finetune_batch(self.task, self.subtask, self.batch_size, rng)

    def train_step(self, batch: Batch | None = None) -> float:
        """Forward, backward, update, then proficiency accounting and window check."""
        batch = batch if batch is not None else self.next_batch()
        params = self.model.params
        for p in params.values():
            p.grad = None
        try:
            with ag.Tape() as tape:
                out = model_forward(batch.features, self.model)
                task_loss = ag.cross_entropy(out.logits, batch.labels)
                loss = ag.add(task_loss, out.aux_loss)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"loss is {value}")
            tape.backward(loss)
            if not all(p.grad is None or np.all(np.isfinite(p.grad)) for p in params.values()):
                raise NumericError("non-finite gradient")
        except NumericError as exc:
            snap = self.ledger.snapshot()
            raise TrainingDiverged(f"{self.phase} step {self.step}: {exc}; ledger={json.dumps(snap)}", snap) from exc
        lr = self.optim.step(self.model.frozen_parameter_names())
        self.ledger.accumulate(out.gates)
        self.last_gates = out.gates
        self.step += 1
        self.metrics.add(step=self.step, phase=self.phase, loss=value, lr=lr)
        if self.schedule is not None and self.schedule.config.is_boundary(self.step):
            self._window_end()
        return value

    def _window_end(self) -> None:
        sched = self.schedule
        crit = sched.config.criterion
        window = sched.window
        shares = {b: window_shares(self.ledger, b, crit) for b in self.ledger.layers}
        hits = {b: self.ledger.hit_count[b].copy() for b in self.ledger.layers}
        events = sched.on_window_end(self.ledger, self.step)
        for b, s in sched.survivors.items():
            self.model.moe_layers[b].set_survivors(s)
        kinds = {}
        for ev in events:
            for i in ev.dropped:
                kinds[(ev.layer, i)] = "force_drop" if ev.kind == "force" else "drop"
            if ev.kind == "skip":
                kinds[(ev.layer, None)] = "skip"
        for b in self.ledger.layers:
            n_surv = len(sched.survivors[b])
            for i in range(self.ledger.num_experts):
                share = "" if shares[b] is None else float(shares[b][i])
                event = kinds.get((b, i), kinds.get((b, None), ""))
                self.metrics.add(step=self.step, phase=self.phase, layer=b, window=window, expert=i,
                                 share=share, hits=int(hits[b][i]), survivors=n_surv, event=event)

    def run(self, until: int | None = None) -> None:
        until = self.total_steps if until is None else min(until, self.total_steps)
        t0 = time.perf_counter()
        while self.step < until:
            self.train_step()
        self.metrics.wall_clock[self.phase] = self.metrics.wall_clock.get(self.phase, 0.0) + time.perf_counter() - t0

    @property
    def done(self) -> bool:
        return self.step >= self.total_steps

    # -- persistence --

    def to_checkpoint(self, extra: dict | None = None) -> Checkpoint:
        arrays = {f"param.{k}": v.data for k, v in self.model.params.items()}
        arrays.update(self.optim.arrays())
        arrays.update(self.ledger.arrays())
        header = {
            "phase": self.phase,
            "step": self.step,
            "total_steps": self.total_steps,
            "rng": {"seed": self.seed, "counter": self.step},
            "batch_size": self.batch_size,
            "subtask": self.subtask,
            "task": self.task.to_dict(),
            "optim": {**self.optim.config.__dict__, "t": self.optim.t},
            "masks": {str(b): m.astype(int).tolist() for b, m in self.model.masks().items()},
        }
        if self.pool is not None:
            header["pool_size"] = len(self.pool)
        if self.schedule is not None:
            header["prune"] = self.schedule.config.to_dict()
            header["schedule"] = self.schedule.to_dict()
        if extra:
            header.update(extra)
        return Checkpoint(self.model.config, arrays, header)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Trainer":
        h = ckpt.header
        masks = {int(b): np.array(m, dtype=bool) for b, m in h.get("masks", {}).items()}
        model = MoEEncoder(ckpt.model_config, ckpt.params(), masks)
        optim_cfg = {k: v for k, v in h["optim"].items() if k != "t"}
        optim = Adam(model.params, OptimConfig(**optim_cfg), h["total_steps"])
        optim.load_arrays(ckpt.arrays, h["optim"]["t"])
        task = TaskSpec(**h["task"])
        schedule = None
        if "prune" in h:
            schedule = ScheduleState.from_dict(PruneConfig(**h["prune"]), h["schedule"])
        pool = None
        if h.get("pool_size"):
            pool = finetune_pool(task, h["subtask"], h["pool_size"])
        tr = cls(model, optim, task, h["phase"], h["rng"]["seed"], h["batch_size"], h["total_steps"],
                 h["subtask"], schedule, pool)
        tr.ledger.load_arrays(ckpt.arrays)
        tr.step = h["step"]
        return tr


def finetune_pool(task: TaskSpec, subtask: int, size: int) -> Batch:
    """Fixed labelled set for data-limited fine-tuning; depends only on the task seed."""
    return gen_finetune_batch(task, subtask, size, batch_rng(task.seed, STREAM_POOL, subtask))


def eval_set(task: TaskSpec, size: int, subtask: int | None = None) -> Batch:
    """Held-out examples from a stream no training batch ever draws from."""
    rng = batch_rng(task.seed, STREAM_EVAL, 2**20 if subtask is None else subtask)
    if subtask is None:
        return gen_pretrain_batch(task, size, rng)
    return gen_finetune_batch(task, subtask, size, rng)


# -- experiment entry points ---------------------------------------------------------


def pretrain(config: RunConfig, seed: int | None = None, dense: bool = False,
             out_dir: str | Path | None = None) -> tuple[Checkpoint, RunMetrics]:
    """Train from scratch on the subtask mixture (no pruning)."""
    model_cfg = config.model.dense() if dense else config.model
    seed = config.train.init_seed if seed is None else seed
    model = MoEEncoder.initialize(model_cfg, seed)
    steps = config.train.pretrain_steps
    optim = Adam(model.params, config.pretrain_optim, steps)
    tr = Trainer(model, optim, config.task, "pretrain", seed, config.train.batch_size, steps)
    tr.run()
    acc, loss = evaluate(model, eval_set(config.task, config.train.eval_size))
    tr.metrics.final_accuracy, tr.metrics.final_loss = acc, loss
    tr.metrics.add(step=tr.step, phase="eval", loss=loss, event=f"accuracy={acc!r}")
    ckpt = tr.to_checkpoint({"kind": "pretrained", "setting": "pretrain-dense" if dense else "pretrain-moe",
                             "eval_accuracy": acc})
    if out_dir is not None:
        _write_run(out_dir, config, ckpt, tr.metrics, [])
    log.info("pretrain %s: accuracy %.4f", "dense" if dense else "moe", acc)
    return ckpt, tr.metrics


def start_finetune(pretrained: Checkpoint, config: RunConfig, mode: str, seed: int,
                   subtask: int | None = None, initial_survivors: dict[int, list[int]] | None = None) -> Trainer:
    """Build (but do not run) a fine-tuning trainer from pre-trained weights."""
    if mode not in FINETUNE_MODES:
        raise ConfigError(f"mode must be one of {FINETUNE_MODES}")
    mcfg = pretrained.model_config
    if mode == "dense-ft" and mcfg.moe_block_indices and mcfg.num_experts > 1:
        raise ConfigError("dense-ft needs a dense (E=1 or MoE-free) checkpoint")
    subtask = config.train.subtask if subtask is None else subtask
    model = MoEEncoder(mcfg, pretrained.params())
    if initial_survivors:
        for b, s in initial_survivors.items():
            model.moe_layers[int(b)].set_survivors(s)
    steps = config.train.finetune_steps
    optim = Adam(model.params, config.finetune_optim, steps)
    prune_mode = mode if mode in ("staged", "eager") else "none"
    schedule = None
    if model.moe_layers:
        pcfg = config.prune.build(steps, mcfg.num_experts, prune_mode)
        schedule = ScheduleState.start(pcfg, sorted(model.moe_layers), model.survivors())
    pool = finetune_pool(config.task, subtask, config.train.finetune_pool) if config.train.finetune_pool else None
    return Trainer(model, optim, config.task, "finetune", seed, config.train.batch_size, steps,
                   subtask, schedule, pool)


def finish_finetune(tr: Trainer, config: RunConfig, mode: str, out_dir=None, extra: dict | None = None):
    tr.run()
    acc, loss = evaluate(tr.model, eval_set(tr.task, config.train.eval_size, tr.subtask))
    tr.metrics.final_accuracy, tr.metrics.final_loss = acc, loss
    tr.metrics.add(step=tr.step, phase="eval", loss=loss, event=f"accuracy={acc!r}")
    header = {"kind": "finetuned", "setting": mode, "eval_accuracy": acc, **(extra or {})}
    ckpt = tr.to_checkpoint(header)
    events = tr.schedule.events if tr.schedule else []
    if out_dir is not None:
        _write_run(out_dir, config, ckpt, tr.metrics, events)
    return ckpt, tr.metrics


def finetune(pretrained: Checkpoint, config: RunConfig, mode: str, seed: int,
             subtask: int | None = None, out_dir=None) -> tuple[Checkpoint, RunMetrics]:
    """One fine-tuning run in one of ``dense-ft``, ``moe-ft``, ``staged``, ``eager``."""
    tr = start_finetune(pretrained, config, mode, seed, subtask)
    ckpt, metrics = finish_finetune(tr, config, mode, out_dir)
    if mode in ("staged", "eager") and any(len(s) != 1 for s in tr.model.survivors().values()):
        log.warning("%s run ended with more than one expert in some layer: %s", mode, tr.model.survivors())
    return ckpt, metrics


def resume_finetune(ckpt: Checkpoint, config: RunConfig, out_dir=None) -> tuple[Checkpoint, RunMetrics]:
    tr = Trainer.from_checkpoint(ckpt)
    return finish_finetune(tr, config, ckpt.header.get("setting", "resumed"), out_dir)


def two_pass(pretrained: Checkpoint, config: RunConfig, variant: str, seed: int,
             subtask: int | None = None, out_dir=None) -> tuple[Checkpoint, RunMetrics]:
    """Select experts with a full pruning run, then re-fine-tune the original weights.

    ``variant`` is ``staged-drop`` or ``eager-drop``. Pass two starts from the
    untouched pre-trained parameters with each MoE layer masked to the expert
    chosen in pass one, and runs without any further pruning.
    """
    if variant not in ("staged-drop", "eager-drop"):
        raise ConfigError("variant must be staged-drop or eager-drop")
    first_mode = variant.split("-")[0]
    first, first_metrics = finetune(pretrained, config, first_mode, seed, subtask)
    masks = first.header["masks"]
    selected = {int(b): [i for i, on in enumerate(m) if on] for b, m in masks.items()}
    tr = start_finetune(pretrained, config, "moe-ft", seed, subtask, initial_survivors=selected)
    ckpt, metrics = finish_finetune(tr, config, f"two-pass-{variant}", out_dir,
                                    {"selected": {str(b): s for b, s in selected.items()},
                                     "first_pass_accuracy": first_metrics.final_accuracy})
    metrics.wall_clock["first_pass"] = first_metrics.wall_clock.get("finetune", 0.0)
    return ckpt, metrics


def _write_run(out_dir, config: RunConfig, ckpt: Checkpoint, metrics: RunMetrics, events) -> None:
    from .pruning import write_events

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.txt")
    ckpt_io.save(out / "model.ckpt", ckpt)
    metrics.write_csv(out / "metrics.csv")
    write_events(out / "events.jsonl", events)
    summary = {
        "setting": ckpt.header.get("setting", ckpt.header.get("kind")),
        "seed": ckpt.header["rng"]["seed"],
        "final_accuracy": metrics.final_accuracy,
        "final_loss": metrics.final_loss,
        "wall_clock": metrics.wall_clock,
        "survivors": ckpt.header.get("masks"),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
