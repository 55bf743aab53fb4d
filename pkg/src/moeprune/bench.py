"""Inference throughput in tokens per second.

Only compute is measured: the router matmul and per-expert dispatch of a
sparse layer against a plain FFN. Multi-device communication, which pruning
also removes in a real deployment, is not simulated.
"""

from __future__ import annotations

import gc
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError
from .model import MoEEncoder, collapse_model
from .tasks import TaskSpec, batch_rng, gen_pretrain_batch

VARIANTS = ("moe-all-experts", "masked-single-expert", "collapsed-dense", "dense-pretrained")


@dataclass
class VariantTiming:
    tokens_per_sec: float
    batch_size: int
    seq_len: int
    repetitions: int
    warmup: int
    mean_seconds: float
    std_seconds: float


@dataclass
class BenchReport:
    variants: dict[str, VariantTiming] = field(default_factory=dict)

    def ratio(self, num: str, den: str) -> float:
        return self.variants[num].tokens_per_sec / self.variants[den].tokens_per_sec

    def ratios(self) -> dict[str, float]:
        out = {}
        v = self.variants
        if "collapsed-dense" in v and "moe-all-experts" in v:
            out["pruned/moe"] = self.ratio("collapsed-dense", "moe-all-experts")
        if "collapsed-dense" in v and "dense-pretrained" in v:
            out["pruned/dense"] = self.ratio("collapsed-dense", "dense-pretrained")
        if "collapsed-dense" in v and "masked-single-expert" in v:
            out["collapsed/masked"] = self.ratio("collapsed-dense", "masked-single-expert")
        return out

    def to_dict(self) -> dict:
        return {"variants": {k: asdict(t) for k, t in self.variants.items()}, "ratios": self.ratios()}

    def rows(self) -> list[dict]:
        return [{"variant": k, **asdict(t)} for k, t in self.variants.items()]


def _timings(models: dict[str, MoEEncoder], features: np.ndarray, repetitions: int,
             warmup: int) -> dict[str, VariantTiming]:
    # Round-robin over the variants so slow phases of a shared machine hit
    # every variant alike instead of skewing the ratios.
    if repetitions < 30 or warmup < 5:
        raise ConfigError("need >= 30 repetitions after >= 5 warmup iterations")
    S, T, _ = features.shape
    times = {name: [] for name in models}
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            for model in models.values():
                model(features, with_aux=False)
        was_enabled = gc.isenabled()
        gc.disable()
        try:
            for _ in range(repetitions):
                for name, model in models.items():
                    t0 = time.perf_counter()
                    model(features, with_aux=False)
                    times[name].append(time.perf_counter() - t0)
        finally:
            if was_enabled:
                gc.enable()
    out = {}
    for name, ts in times.items():
        total = sum(ts)
        out[name] = VariantTiming(S * T * repetitions / total, S, T, repetitions, warmup,
                                  total / repetitions, statistics.stdev(ts))
    return out


def time_forward(model: MoEEncoder, features: np.ndarray, repetitions: int = 100, warmup: int = 10) -> VariantTiming:
    """Mean and spread of single-batch forward wall time, single-threaded."""
    return _timings({"model": model}, features, repetitions, warmup)["model"]


def pruned_variants(moe: MoEEncoder, pruned: MoEEncoder, dense: MoEEncoder | None = None) -> dict[str, MoEEncoder]:
    """The models compared by the bench, keyed by variant name."""
    if any(len(s) != 1 for s in pruned.survivors().values()):
        raise ConfigError("the pruned model must have exactly one expert per MoE layer")
    base = moe.config
    for m in (pruned, dense):
        if m is None:
            continue
        c = m.config
        if (c.hidden_size, c.feature_dim, c.num_blocks, c.mixer) != (base.hidden_size, base.feature_dim,
                                                                      base.num_blocks, base.mixer):
            raise ConfigError("bench variants must share the encoder architecture")
    variants = {"moe-all-experts": moe, "masked-single-expert": pruned, "collapsed-dense": collapse_model(pruned)}
    if dense is not None:
        variants["dense-pretrained"] = dense
    return variants


def bench_inference(models: dict[str, MoEEncoder], batch_size: int = 32, seq_len: int = 8,
                    repetitions: int = 100, warmup: int = 10, seed: int = 0,
                    task: TaskSpec | None = None) -> BenchReport:
    """Time every model on the same pre-materialised batch, interleaved."""
    if not models:
        raise ConfigError("nothing to benchmark")
    feature_dims = {m.config.feature_dim for m in models.values()}
    if len(feature_dims) != 1:
        raise ConfigError("bench variants disagree on feature_dim")
    task = task or TaskSpec(feature_dim=feature_dims.pop(), tokens_per_sequence=seq_len)
    if task.tokens_per_sequence != seq_len:
        raise ConfigError("task tokens_per_sequence must equal seq_len")
    features = gen_pretrain_batch(task, batch_size, batch_rng(seed, 99)).features
    return BenchReport(_timings(models, features, repetitions, warmup))
