"""Expert proficiency accounting and the window-based dropping schedule.

Within a training window every MoE layer accumulates, per expert, the gate
mass it received (``alpha_sum``) and the number of tokens it won
(``hit_count``). At each window boundary the accumulators become shares that
sum to one over the surviving experts, and the schedule drops experts:

* ``staged``: the single lowest-share survivor per window;
* ``eager``: every survivor whose share is strictly below ``beta / Z``;
* at ``floor(N / 2)`` any layer still holding several experts keeps only its
  highest-share expert (force drop).

Decisions depend only on ``(mode, shares, survivors, beta)``, so an event log
can be replayed to reproduce the drops exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, InvariantError

MODES = ("none", "staged", "eager")
CRITERIA = ("alpha", "hit_rate")


@dataclass(frozen=True)
class PruneConfig:
    mode: str = "eager"
    criterion: str = "alpha"
    beta: float = 1.0
    gamma: float = 1.0
    total_steps: int = 800
    num_experts: int = 8
    force_drop: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.criterion not in CRITERIA:
            raise ConfigError(f"criterion must be one of {CRITERIA}, got {self.criterion!r}")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if self.total_steps < 1 or self.num_experts < 1:
            raise ConfigError("total_steps and num_experts must be >= 1")

    @property
    def window_length(self) -> int:
        return max(1, round(self.gamma * self.total_steps / self.num_experts))

    @property
    def force_drop_step(self) -> int:
        return self.total_steps // 2

    def is_boundary(self, step: int) -> bool:
        """Whether a decision point falls after completed step ``step``."""
        return step > 0 and (step % self.window_length == 0 or
                             (self.force_drop and step == self.force_drop_step))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("mode", "criterion", "beta", "gamma",
                                               "total_steps", "num_experts", "force_drop")}


def threshold(beta: float, num_active: int) -> float:
    """Dynamic dropping threshold ``beta / Z``."""
    if num_active < 1:
        raise ValueError("need at least one surviving expert")
    return beta * 1.0 / num_active


# -- ledger -------------------------------------------------------------------


class ProficiencyLedger:
    """Per-layer, per-expert accumulators for the current window."""

    def __init__(self, layers: Sequence[int], num_experts: int):
        self.layers = [int(b) for b in layers]
        self.num_experts = num_experts
        self.alpha_sum = {b: np.zeros(num_experts) for b in self.layers}
        self.hit_count = {b: np.zeros(num_experts, dtype=np.int64) for b in self.layers}
        self.token_count = {b: 0 for b in self.layers}

    def accumulate(self, gates) -> None:
        """Add one step's gate results, a mapping ``layer -> GateResult``."""
        if sorted(int(b) for b in gates) != sorted(self.layers):
            raise ConfigError(f"gate results for layers {sorted(gates)} but ledger tracks {self.layers}")
        for b, g in gates.items():
            alphas = g.alphas.data if hasattr(g.alphas, "data") else np.asarray(g.alphas)
            self.alpha_sum[b] += alphas.sum(axis=0)
            self.hit_count[b] += np.bincount(g.top1, minlength=self.num_experts)
            self.token_count[b] += int(len(g.top1))

    def reset(self) -> None:
        for b in self.layers:
            self.alpha_sum[b][:] = 0.0
            self.hit_count[b][:] = 0
            self.token_count[b] = 0

    def snapshot(self) -> dict:
        return {
            str(b): {
                "alpha_sum": self.alpha_sum[b].tolist(),
                "hit_count": self.hit_count[b].tolist(),
                "token_count": self.token_count[b],
            }
            for b in self.layers
        }

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for b in self.layers:
            out[f"ledger.{b}.alpha_sum"] = self.alpha_sum[b].copy()
            out[f"ledger.{b}.hit_count"] = self.hit_count[b].astype(np.float64)
            out[f"ledger.{b}.token_count"] = np.array([float(self.token_count[b])])
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for b in self.layers:
            self.alpha_sum[b] = np.array(arrays[f"ledger.{b}.alpha_sum"], dtype=np.float64)
            self.hit_count[b] = np.asarray(arrays[f"ledger.{b}.hit_count"]).astype(np.int64)
            self.token_count[b] = int(arrays[f"ledger.{b}.token_count"][0])


def window_shares(ledger: ProficiencyLedger, layer: int, criterion: str = "alpha") -> np.ndarray | None:
    """Normalised per-expert proficiency for the window, or ``None`` if it saw no tokens."""
    n = ledger.token_count[layer]
    if n == 0:
        return None
    if criterion == "alpha":
        a = ledger.alpha_sum[layer]
        return a / a.sum()
    if criterion == "hit_rate":
        return ledger.hit_count[layer] / n
    raise ConfigError(f"unknown criterion {criterion!r}")


# -- decision rules -------------------------------------------------------------


def _argmax_survivor(shares: np.ndarray, survivors: Sequence[int]) -> int:
    # survivors are sorted, so the first maximum is the lowest index
    best = survivors[0]
    for i in survivors[1:]:
        if shares[i] > shares[best]:
            best = i
    return best


SHARE_RTOL = 1e-12


def _argmin_survivor(shares: np.ndarray, survivors: Sequence[int]) -> int:
    worst = survivors[0]
    for i in survivors[1:]:
        if shares[i] < shares[worst]:
            worst = i
    return worst


def eager_drops(shares: np.ndarray, survivors: Sequence[int], beta: float) -> tuple[list[int], bool]:
    """Survivors strictly below ``beta / Z``; returns ``(dropped, clamped)``.

    If every survivor would go, the highest-share one is kept and ``clamped``
    is true. With ``beta <= 1`` that cannot happen.
    """
    survivors = sorted(survivors)
    # shares come from a division, so a share "equal" to the threshold can sit an
    # ulp below it; only count it as below when it is below by more than rounding
    t = threshold(beta, len(survivors)) * (1.0 - SHARE_RTOL)
    dropped = [i for i in survivors if shares[i] < t]
    if len(dropped) == len(survivors):
        keep = _argmax_survivor(shares, survivors)
        return [i for i in dropped if i != keep], True
    return dropped, False


def staged_drop(shares: np.ndarray, survivors: Sequence[int]) -> list[int]:
    survivors = sorted(survivors)
    if len(survivors) <= 1:
        return []
    return [_argmin_survivor(shares, survivors)]


def force_drops(shares: np.ndarray, survivors: Sequence[int]) -> list[int]:
    survivors = sorted(survivors)
    keep = _argmax_survivor(shares, survivors)
    return [i for i in survivors if i != keep]


def decide(kind: str, mode: str, shares: np.ndarray, survivors: Sequence[int], beta: float) -> tuple[list[int], bool]:
    """Pure decision rule: ``(dropped ids, safety clamp fired)``."""
    if kind == "force":
        return force_drops(shares, survivors), False
    if mode == "eager":
        return eager_drops(shares, survivors, beta)
    if mode == "staged":
        return staged_drop(shares, survivors), False
    return [], False


# -- state machine ------------------------------------------------------------------


@dataclass
class PruneEvent:
    step: int
    layer: int
    mode: str
    window: int
    kind: str  # "window", "force" or "skip"
    survivors_before: list[int]
    dropped: list[int]
    shares: list[float]
    clamped: bool = False

    def to_json(self) -> str:
        rec = {
            "step": self.step,
            "layer_index": self.layer,
            "mode": self.mode,
            "window_index": self.window,
            "kind": self.kind,
            "survivors_before": self.survivors_before,
            "dropped_ids": self.dropped,
            "shares": [format(s, ".9f") for s in self.shares],
            "clamped": self.clamped,
        }
        return json.dumps(rec, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "PruneEvent":
        rec = json.loads(line)
        return cls(rec["step"], rec["layer_index"], rec["mode"], rec["window_index"], rec["kind"],
                   rec["survivors_before"], rec["dropped_ids"], [float(s) for s in rec["shares"]],
                   rec.get("clamped", False))


@dataclass
class ScheduleState:
    config: PruneConfig
    survivors: dict[int, list[int]]
    window: int = 0
    events: list[PruneEvent] = field(default_factory=list)
    clamp_activations: int = 0

    @classmethod
    def start(cls, config: PruneConfig, layers: Iterable[int], survivors: dict[int, Sequence[int]] | None = None):
        layers = [int(b) for b in layers]
        if survivors is None:
            surv = {b: list(range(config.num_experts)) for b in layers}
        else:
            surv = {int(b): sorted(int(i) for i in survivors[b]) for b in layers}
        for b, s in surv.items():
            if not s:
                raise InvariantError(f"layer {b} starts with no experts")
        return cls(config, surv)

    def finalized(self, layer: int) -> bool:
        return len(self.survivors[layer]) == 1

    def _apply(self, step, layer, kind, shares, dropped, clamped):
        before = list(self.survivors[layer])
        after = [i for i in before if i not in dropped]
        if not after:
            raise InvariantError(f"decision would empty layer {layer}")
        self.survivors[layer] = after
        self.clamp_activations += int(clamped)
        ev = PruneEvent(step, layer, self.config.mode, self.window, kind, before, sorted(dropped),
                        [float(s) for s in shares], clamped)
        self.events.append(ev)
        return ev

    def prune_eager(self, layer: int, shares: np.ndarray, step: int = 0) -> list[int]:
        dropped, clamped = eager_drops(shares, self.survivors[layer], self.config.beta)
        self._apply(step, layer, "window", shares, dropped, clamped)
        return dropped

    def prune_staged(self, layer: int, shares: np.ndarray, step: int = 0) -> list[int]:
        dropped = staged_drop(shares, self.survivors[layer])
        self._apply(step, layer, "window", shares, dropped, False)
        return dropped

    def force_drop(self, layer: int, shares: np.ndarray, step: int = 0) -> list[int]:
        if self.finalized(layer):
            return []
        dropped = force_drops(shares, self.survivors[layer])
        self._apply(step, layer, "force", shares, dropped, False)
        return dropped

    def on_window_end(self, ledger: ProficiencyLedger, step: int) -> list[PruneEvent]:
        """Decide for every unfinalised layer, then reset the ledger."""
        cfg = self.config
        new: list[PruneEvent] = []
        forcing = cfg.force_drop and step == cfg.force_drop_step and cfg.mode != "none"
        for b in sorted(self.survivors):
            if cfg.mode == "none" or self.finalized(b):
                continue
            shares = window_shares(ledger, b, cfg.criterion)
            if shares is None:
                new.append(PruneEvent(step, b, cfg.mode, self.window, "skip", list(self.survivors[b]), [], []))
                self.events.append(new[-1])
                continue
            n0 = len(self.events)
            if forcing:
                self.force_drop(b, shares, step)
            elif cfg.mode == "eager":
                self.prune_eager(b, shares, step)
            else:
                self.prune_staged(b, shares, step)
            new.extend(self.events[n0:])
        ledger.reset()
        self.window += 1
        self.check()
        return new

    def check(self) -> None:
        for b, s in self.survivors.items():
            if not s:
                raise InvariantError(f"layer {b} has no surviving experts")

    # -- persistence --

    def to_dict(self) -> dict:
        return {
            "survivors": {str(b): s for b, s in self.survivors.items()},
            "window": self.window,
            "clamp_activations": self.clamp_activations,
            "events": [json.loads(e.to_json()) | {"shares_exact": e.shares} for e in self.events],
        }

    @classmethod
    def from_dict(cls, config: PruneConfig, d: dict) -> "ScheduleState":
        events = []
        for rec in d["events"]:
            ev = PruneEvent.from_json(json.dumps(rec))
            ev.shares = [float(s) for s in rec["shares_exact"]]
            events.append(ev)
        return cls(config, {int(b): list(s) for b, s in d["survivors"].items()}, d["window"], events,
                   d["clamp_activations"])


def replay(events: Sequence[PruneEvent], beta: float, initial: dict[int, Sequence[int]]) -> tuple[dict[int, list[int]], list[list[int]]]:
    """Recompute every event's drops from its recorded shares.

    Returns the final survivor sets and the per-event dropped lists, which
    should equal the log's own.
    """
    survivors = {int(b): sorted(s) for b, s in initial.items()}
    drops: list[list[int]] = []
    for ev in events:
        if ev.kind == "skip":
            drops.append([])
            continue
        if sorted(ev.survivors_before) != survivors[ev.layer]:
            raise InvariantError(f"event at step {ev.step} starts from a different survivor set")
        dropped, _ = decide(ev.kind, ev.mode, np.asarray(ev.shares), survivors[ev.layer], beta)
        survivors[ev.layer] = [i for i in survivors[ev.layer] if i not in dropped]
        drops.append(sorted(dropped))
    return survivors, drops


def write_events(path, events: Sequence[PruneEvent]) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(ev.to_json() + "\n")


def read_events(path) -> list[PruneEvent]:
    with open(path) as fh:
        return [PruneEvent.from_json(line) for line in fh if line.strip()]


def solo_steps(events: Sequence[PruneEvent], total_steps: int) -> dict[int, int]:
    """Steps each layer's final expert trained alone, read from the event log."""
    out = {}
    for ev in events:
        if len(ev.survivors_before) - len(ev.dropped) == 1 and ev.dropped:
            out[ev.layer] = total_steps - ev.step
    return out


def expected_decision_steps(config: PruneConfig) -> list[int]:
    """Every step after which a decision point falls, in order."""
    return [s for s in range(1, config.total_steps + 1) if config.is_boundary(s)]
