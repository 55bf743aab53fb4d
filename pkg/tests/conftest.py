"""Shared fixtures: a tiny run config for fast tests and cached default pre-trained checkpoints."""

import os
import sys

import pytest

from moeprune.config import OptimConfig, RunConfig, TrainConfig
from moeprune.model import ModelConfig
from moeprune.training import pretrain


def tiny_config(**train) -> RunConfig:
    """Two blocks, four experts in block 1, a few dozen steps."""
    t = dict(pretrain_steps=40, finetune_steps=64, batch_size=8, finetune_pool=64, eval_size=200, seeds=(1,))
    t.update(train)
    return RunConfig(
        model=ModelConfig(num_blocks=2, hidden_size=16, ffn_inner=16, num_experts=4, moe_block_indices=(1,)),
        pretrain_optim=OptimConfig(lr=3e-3, warmup_steps=5),
        finetune_optim=OptimConfig(lr=1e-3, warmup_steps=4),
        train=TrainConfig(**t),
    )


@pytest.fixture(scope="session")
def tiny():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_pretrained(tiny):
    ckpt, _ = pretrain(tiny)
    return ckpt


@pytest.fixture(scope="session")
def tiny_dense(tiny):
    ckpt, _ = pretrain(tiny, dense=True)
    return ckpt


@pytest.fixture(scope="session")
def acceptance_context(tmp_path_factory):
    from test_acceptance import Context

    return Context(os.environ.get("MOEP_ACCEPTANCE_DIR") or tmp_path_factory.mktemp("acceptance"))


@pytest.fixture(scope="session")
def default_moe(acceptance_context):
    """Default-config MoE, pre-trained once per session."""
    return acceptance_context.pretrained()[0]


@pytest.fixture(scope="session")
def default_dense(acceptance_context):
    return acceptance_context.pretrained(dense=True)[0]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.verdict_lines():
        terminalreporter.write_line(line)
