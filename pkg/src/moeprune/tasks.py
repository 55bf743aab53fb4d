"""Synthetic clustered sequence-classification tasks.

Each of ``K`` subtasks owns a cluster center; every token of a subtask-``k``
sequence is ``center_k + noise_scale * n`` with ``n`` standard normal. The
label is the argmax of fixed per-subtask linear functionals of the sequence's
mean noise, so subtasks share an input space but need different rules.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ConfigError


@dataclass(frozen=True)
class TaskSpec:
    num_subtasks: int = 8
    feature_dim: int = 16
    tokens_per_sequence: int = 8
    classes_per_subtask: int = 2
    noise_scale: float = 1.0
    center_scale: float = 3.0
    seed: int = 0
    cluster_centers: np.ndarray = field(default=None, compare=False, repr=False)
    label_rules: np.ndarray = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if min(self.num_subtasks, self.feature_dim, self.tokens_per_sequence) < 1:
            raise ConfigError("task extents must be >= 1")
        if not 2 <= self.classes_per_subtask <= self.feature_dim:
            raise ConfigError("classes_per_subtask must lie in [2, feature_dim]")
        if self.noise_scale <= 0:
            raise ConfigError("noise_scale must be positive")
        rng = np.random.default_rng([self.seed, 0x7A5C])
        if self.cluster_centers is None:
            centers = rng.normal(0.0, self.center_scale, size=(self.num_subtasks, self.feature_dim))
            object.__setattr__(self, "cluster_centers", centers)
        if self.label_rules is None:
            object.__setattr__(self, "label_rules", _simplex_rules(rng, self.num_subtasks,
                                                                   self.classes_per_subtask, self.feature_dim))
        centers = self.cluster_centers
        if centers.shape != (self.num_subtasks, self.feature_dim):
            raise ConfigError(f"cluster_centers shape {centers.shape}")
        if self.num_subtasks > 1:
            d = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
            closest = d[~np.eye(self.num_subtasks, dtype=bool)].min()
            if closest <= 4 * self.noise_scale:
                raise ConfigError(f"cluster centers too close ({closest:.3g} <= 4 * noise_scale)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("num_subtasks", "feature_dim", "tokens_per_sequence",
                                               "classes_per_subtask", "noise_scale", "center_scale", "seed")}


def _simplex_rules(rng, K: int, C: int, F: int) -> np.ndarray:
    # Vertices of a regular simplex in a random subspace: isotropic noise then
    # lands in every class with equal probability.
    rules = np.empty((K, C, F))
    for k in range(K):
        q, _ = np.linalg.qr(rng.normal(size=(F, C)))
        u = q.T
        rules[k] = u - u.mean(axis=0)
    return rules


@dataclass
class Batch:
    features: np.ndarray  # [sequences, tokens, feature_dim]
    labels: np.ndarray  # [sequences]
    subtask_id: np.ndarray  # [sequences]

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def slice(self, start: int, stop: int) -> "Batch":
        return Batch(self.features[start:stop], self.labels[start:stop], self.subtask_id[start:stop])

    def take(self, index: np.ndarray) -> "Batch":
        return Batch(self.features[index], self.labels[index], self.subtask_id[index])


def batch_rng(seed: int, *counters: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *counters)``."""
    return np.random.default_rng([int(seed), *(int(c) for c in counters)])


def _draw(spec: TaskSpec, subtasks: np.ndarray, rng: np.random.Generator) -> Batch:
    noise = rng.normal(size=(subtasks.shape[0], spec.tokens_per_sequence, spec.feature_dim))
    features = spec.cluster_centers[subtasks][:, None, :] + spec.noise_scale * noise
    scores = np.einsum("scf,sf->sc", spec.label_rules[subtasks], noise.mean(axis=1))
    return Batch(features, np.argmax(scores, axis=1), subtasks)


def gen_pretrain_batch(spec: TaskSpec, batch_size: int, rng: np.random.Generator) -> Batch:
    """Sequences drawn uniformly over all subtasks."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return _draw(spec, rng.integers(spec.num_subtasks, size=batch_size), rng)


def gen_finetune_batch(spec: TaskSpec, subtask: int, batch_size: int, rng: np.random.Generator) -> Batch:
    """Sequences from a single subtask."""
    if not 0 <= subtask < spec.num_subtasks:
        raise ValueError(f"subtask {subtask} outside [0, {spec.num_subtasks})")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return _draw(spec, np.full(batch_size, subtask), rng)


def nearest_center(spec: TaskSpec, features: np.ndarray) -> np.ndarray:
    """Brute-force nearest cluster center per token."""
    d = ((features[..., None, :] - spec.cluster_centers) ** 2).sum(axis=-1)
    return np.argmin(d, axis=-1)


def evaluate(model, eval_set: Batch, chunk: int = 512) -> tuple[float, float]:
    """Accuracy and mean cross-entropy of ``model`` on ``eval_set``."""
    if ag.recording():
        raise RuntimeError("evaluate must not run inside a gradient tape")
    correct = 0
    loss_sum = 0.0
    for start in range(0, len(eval_set), chunk):
        part = eval_set.slice(start, start + chunk)
        logits = model(part.features, with_aux=False).logits
        correct += int((ag.argmax(logits, axis=1) == part.labels).sum())
        loss_sum += ag.cross_entropy(logits, part.labels).item() * len(part)
    n = len(eval_set)
    return correct / n, loss_sum / n
