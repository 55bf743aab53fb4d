"""Small encoder whose feed-forward sublayers can be switch-routed expert layers.

Routing is top-1: each token runs through the single highest-gate active
expert and is scaled by that gate value. Dropping an expert only flips its
entry in ``active_mask``; the router keeps all ``E`` columns until
:func:`collapse_to_dense` rewrites a single-survivor layer as a plain FFN.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError, InvariantError

ACTIVATIONS = {"gelu": ag.gelu, "relu": ag.relu}
MIXERS = ("attention", "mean")


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 4
    hidden_size: int = 32
    ffn_inner: int = 64
    num_heads: int = 1
    num_experts: int = 8
    moe_block_indices: tuple[int, ...] = (1, 3)
    feature_dim: int = 16
    num_classes: int = 2
    balance_loss_weight: float = 1e-2
    mixer: str = "attention"
    activation: str = "gelu"

    def __post_init__(self):
        object.__setattr__(self, "moe_block_indices", tuple(int(i) for i in self.moe_block_indices))
        for name in ("num_blocks", "hidden_size", "ffn_inner", "num_heads", "num_experts",
                     "feature_dim", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if any(not 0 <= i < self.num_blocks for i in self.moe_block_indices):
            raise ConfigError(f"moe_block_indices {self.moe_block_indices} outside [0, {self.num_blocks})")
        if len(set(self.moe_block_indices)) != len(self.moe_block_indices):
            raise ConfigError("moe_block_indices has duplicates")
        if self.hidden_size % self.num_heads:
            raise ConfigError("hidden_size must be divisible by num_heads")
        if self.balance_loss_weight < 0:
            raise ConfigError("balance_loss_weight must be non-negative")
        if self.mixer not in MIXERS:
            raise ConfigError(f"mixer must be one of {MIXERS}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(ACTIVATIONS)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["moe_block_indices"] = list(self.moe_block_indices)
        return d

    def dense(self) -> "ModelConfig":
        """The same architecture with every MoE block replaced by a plain FFN."""
        return replace(self, moe_block_indices=())


class FFN:
    """hidden -> ffn_inner -> hidden with an inner activation."""

    def __init__(self, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, activation: str = "gelu"):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        h = ACTIVATIONS[self.activation](ag.add_bias(ag.matmul(x, self.w1), self.b1))
        return ag.add_bias(ag.matmul(h, self.w2), self.b2)

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


@dataclass
class GateResult:
    alphas: Tensor  # [tokens, E], exact zeros at masked columns
    top1: np.ndarray  # [tokens]
    balance_loss: Tensor
    active_mask: np.ndarray

    @property
    def num_tokens(self) -> int:
        return int(self.top1.shape[0])


@dataclass
class MoELayer:
    router: Tensor  # [hidden, E]
    experts: list[FFN]
    active_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        E = self.router.shape[1]
        if len(self.experts) != E:
            raise DimensionError(f"router has {E} columns but {len(self.experts)} experts")
        if self.active_mask is None:
            self.active_mask = np.ones(E, dtype=bool)
        self.active_mask = np.asarray(self.active_mask, dtype=bool).copy()

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def survivors(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.active_mask)]

    def set_survivors(self, survivors) -> None:
        mask = np.zeros(self.num_experts, dtype=bool)
        mask[list(survivors)] = True
        if not mask.any():
            raise InvariantError("an MoE layer needs at least one active expert")
        self.active_mask = mask

    def __call__(self, x: Tensor) -> tuple[Tensor, GateResult]:
        return moe_forward(x, self)


def gate(x: Tensor, layer: MoELayer, with_balance_loss: bool = True) -> GateResult:
    """Router logits for all experts, softmax over the active ones, top-1 choice."""
    mask = layer.active_mask
    if not mask.any():
        raise InvariantError("gate called on a layer with no active experts")
    logits = ag.matmul(x, layer.router)
    alphas = ag.softmax(logits, mask=None if mask.all() else mask)
    top1 = ag.argmax(alphas, axis=-1)
    result = GateResult(alphas, top1, None, mask.copy())
    if with_balance_loss:
        result.balance_loss = balance_loss(result, int(mask.sum()))
    return result


def balance_loss(gate_result: GateResult, num_active: int) -> Tensor:
    """``Z * sum_i f_i * P_i`` over active experts.

    ``f_i`` is the fraction of tokens routed to expert ``i`` (held constant) and
    ``P_i`` the mean gate value of ``i``; the gradient flows through ``P`` only.
    """
    if num_active < 1:
        raise InvariantError("balance loss needs at least one active expert")
    alphas = gate_result.alphas
    n, E = alphas.shape
    frac = np.bincount(gate_result.top1, minlength=E) / n
    prob = ag.mean(alphas, axis=0)
    return ag.scale(ag.total(ag.mul(prob, Tensor(frac))), float(num_active))


def moe_forward(x: Tensor, layer: MoELayer, with_balance_loss: bool = True) -> tuple[Tensor, GateResult]:
    """Top-1 routed output ``alpha_top1(x) * Exp_top1(x)`` for each row of ``x``."""
    if x.data.ndim != 2 or x.shape[1] != layer.router.shape[0]:
        raise DimensionError(f"moe_forward input {x.shape} vs router {layer.router.shape}")
    g = gate(x, layer, with_balance_loss)
    # group token ids by expert with one stable sort
    order = np.argsort(g.top1, kind="stable")
    counts = np.bincount(g.top1, minlength=layer.num_experts)
    parts, indices = [], []
    start = 0
    for j, n in enumerate(counts):
        if n == 0:
            continue
        idx = order[start:start + n]
        start += n
        parts.append(layer.experts[j](ag.take_rows(x, idx)))
        indices.append(idx)
    routed = ag.stitch_rows(parts, indices, x.shape[0])
    y = ag.scale_rows(routed, ag.pick(g.alphas, g.top1))
    return y, g


def collapse_to_dense(layer: MoELayer) -> FFN:
    """Plain FFN carrying a copy of the lone surviving expert's weights."""
    survivors = layer.survivors
    if len(survivors) != 1:
        raise InvariantError(f"collapse needs exactly one active expert, layer has {len(survivors)}")
    src = layer.experts[survivors[0]]
    return FFN(*(Tensor(p.data.copy(), name=p.name) for p in src.parameters()), activation=src.activation)


# -- encoder ---------------------------------------------------------------------


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))


def init_parameters(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameter arrays, keyed and ordered the way checkpoints store them."""
    H, I = config.hidden_size, config.ffn_inner
    p: dict[str, np.ndarray] = {}
    p["embed.w"] = _linear_init(rng, config.feature_dim, H)
    p["embed.b"] = np.zeros(H)

    def ffn(prefix):
        p[f"{prefix}.w1"] = _linear_init(rng, H, I)
        p[f"{prefix}.b1"] = np.zeros(I)
        p[f"{prefix}.w2"] = _linear_init(rng, I, H)
        p[f"{prefix}.b2"] = np.zeros(H)

    for b in range(config.num_blocks):
        pre = f"blocks.{b}"
        p[f"{pre}.ln1.g"] = np.ones(H)
        p[f"{pre}.ln1.b"] = np.zeros(H)
        if config.mixer == "attention":
            for name in ("wq", "wk", "wv", "wo"):
                p[f"{pre}.attn.{name}"] = _linear_init(rng, H, H)
        else:
            p[f"{pre}.mix.w"] = _linear_init(rng, H, H)
            p[f"{pre}.mix.b"] = np.zeros(H)
        p[f"{pre}.ln2.g"] = np.ones(H)
        p[f"{pre}.ln2.b"] = np.zeros(H)
        if b in config.moe_block_indices:
            p[f"{pre}.moe.router"] = _linear_init(rng, H, config.num_experts)
            for j in range(config.num_experts):
                ffn(f"{pre}.moe.experts.{j}")
        else:
            ffn(f"{pre}.ffn")
    p["final_ln.g"] = np.ones(H)
    p["final_ln.b"] = np.zeros(H)
    p["head.w"] = _linear_init(rng, H, config.num_classes)
    p["head.b"] = np.zeros(config.num_classes)
    return p


@dataclass
class ForwardOutput:
    logits: Tensor
    aux_loss: Tensor
    gates: dict[int, GateResult]  # keyed by block index


class MoEEncoder:
    """Pre-LN encoder: embed, blocks of (mixer, FFN or MoE), mean-pool, linear head."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], masks: dict[int, np.ndarray] | None = None):
        self.config = config
        expected = init_parameters(config, np.random.default_rng(0))
        if list(expected) != list(params):
            raise ConfigError("parameter names do not match the model configuration")
        for k, v in params.items():
            if np.shape(v) != expected[k].shape:
                raise ConfigError(f"parameter {k} has shape {np.shape(v)}, expected {expected[k].shape}")
        self.params: dict[str, Tensor] = {
            k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k) for k, v in params.items()
        }
        self.ffns: dict[int, FFN | MoELayer] = {}
        for b in range(config.num_blocks):
            if b in config.moe_block_indices:
                pre = f"blocks.{b}.moe"
                experts = [self._ffn(f"{pre}.experts.{j}") for j in range(config.num_experts)]
                self.ffns[b] = MoELayer(self.params[f"{pre}.router"], experts)
            else:
                self.ffns[b] = self._ffn(f"blocks.{b}.ffn")
        if masks:
            for b, m in masks.items():
                self.moe_layers[int(b)].set_survivors(np.flatnonzero(m))

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "MoEEncoder":
        return cls(config, init_parameters(config, np.random.default_rng(seed)))

    def _ffn(self, prefix: str) -> FFN:
        p = self.params
        return FFN(p[f"{prefix}.w1"], p[f"{prefix}.b1"], p[f"{prefix}.w2"], p[f"{prefix}.b2"], self.config.activation)

    @property
    def moe_layers(self) -> dict[int, MoELayer]:
        return {b: f for b, f in self.ffns.items() if isinstance(f, MoELayer)}

    def masks(self) -> dict[int, np.ndarray]:
        return {b: layer.active_mask.copy() for b, layer in self.moe_layers.items()}

    def survivors(self) -> dict[int, list[int]]:
        return {b: layer.survivors for b, layer in self.moe_layers.items()}

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def copy(self) -> "MoEEncoder":
        return MoEEncoder(self.config, self.state(), self.masks())

    def frozen_parameter_names(self) -> set[str]:
        """Parameters of dropped experts; they never receive updates."""
        names = set()
        for b, layer in self.moe_layers.items():
            for j in np.flatnonzero(~layer.active_mask):
                names.update(f"blocks.{b}.moe.experts.{j}.{n}" for n in ("w1", "b1", "w2", "b2"))
        return names

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    # -- forward --

    def _mixer(self, b: int, x: Tensor) -> Tensor:
        p, cfg = self.params, self.config
        S, T, H = x.shape
        if cfg.mixer == "mean":
            pooled = ag.add_bias(ag.matmul(ag.mean(x, axis=1), p[f"blocks.{b}.mix.w"]), p[f"blocks.{b}.mix.b"])
            return ag.reshape(pooled, (S, 1, H))
        nh = cfg.num_heads
        dh = H // nh

        def heads(t):
            if nh == 1:
                return t
            return ag.permute(ag.reshape(t, (S, T, nh, dh)), (0, 2, 1, 3))

        q = heads(ag.matmul(x, p[f"blocks.{b}.attn.wq"]))
        k = heads(ag.matmul(x, p[f"blocks.{b}.attn.wk"]))
        v = heads(ag.matmul(x, p[f"blocks.{b}.attn.wv"]))
        scores = ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / math.sqrt(dh))
        ctx = ag.matmul(ag.softmax(scores), v)
        if nh > 1:
            ctx = ag.reshape(ag.permute(ctx, (0, 2, 1, 3)), (S, T, H))
        return ag.matmul(ctx, p[f"blocks.{b}.attn.wo"])

    def __call__(self, features, with_aux: bool = True) -> ForwardOutput:
        return model_forward(features, self, with_aux)


def model_forward(features, model: MoEEncoder, with_aux: bool = True) -> ForwardOutput:
    """Task logits ``[sequences, classes]`` plus the weighted sum of balance losses.

    ``with_aux=False`` skips the balance losses (inference); ``aux_loss`` is then 0.
    """
    x_in = features if isinstance(features, Tensor) else Tensor(features)
    cfg, p = model.config, model.params
    if x_in.data.ndim != 3 or x_in.shape[2] != cfg.feature_dim:
        raise DimensionError(f"expected features [sequences, tokens, {cfg.feature_dim}], got {x_in.shape}")
    S, T, _ = x_in.shape
    H = cfg.hidden_size
    x = ag.add_bias(ag.matmul(x_in, p["embed.w"]), p["embed.b"])
    gates: dict[int, GateResult] = {}
    aux = None
    for b in range(cfg.num_blocks):
        h = ag.layer_norm(x, p[f"blocks.{b}.ln1.g"], p[f"blocks.{b}.ln1.b"])
        x = ag.add(x, model._mixer(b, h))
        h = ag.reshape(ag.layer_norm(x, p[f"blocks.{b}.ln2.g"], p[f"blocks.{b}.ln2.b"]), (S * T, H))
        ffn = model.ffns[b]
        if isinstance(ffn, MoELayer):
            y, g = moe_forward(h, ffn, with_aux)
            gates[b] = g
            if with_aux:
                aux = g.balance_loss if aux is None else ag.add(aux, g.balance_loss)
        else:
            y = ffn(h)
        x = ag.add(x, ag.reshape(y, (S, T, H)))
    x = ag.layer_norm(x, p["final_ln.g"], p["final_ln.b"])
    logits = ag.add_bias(ag.matmul(ag.mean(x, axis=1), p["head.w"]), p["head.b"])
    if aux is None:
        aux = Tensor(0.0)
    else:
        aux = ag.scale(aux, cfg.balance_loss_weight)
    return ForwardOutput(logits, aux, gates)


def collapse_model(model: MoEEncoder) -> MoEEncoder:
    """Rewrite every MoE layer of a fully pruned model as a plain FFN block.

    The result is a dense-configured encoder whose ``blocks.<b>.ffn.*`` weights
    are copies of each layer's surviving expert; routers are discarded.
    """
    dense_cfg = model.config.dense()
    params: dict[str, np.ndarray] = {}
    layers = model.moe_layers
    for name in init_parameters(dense_cfg, np.random.default_rng(0)):
        parts = name.split(".")
        if parts[0] == "blocks" and parts[2] == "ffn" and int(parts[1]) in layers:
            dense_ffn = collapse_to_dense(layers[int(parts[1])])
            params[name] = dict(zip(("w1", "b1", "w2", "b2"), dense_ffn.parameters()))[parts[3]].data
        else:
            params[name] = model.params[name].data.copy()
    return MoEEncoder(dense_cfg, params)
