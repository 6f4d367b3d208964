import math

import numpy as np
import pytest

from sparse_pathways.blocks import BlockPartition, Mask
from sparse_pathways.model import Model, ModelConfig
from sparse_pathways.regularization import (LassoConfig, dynamic_lambdas, lasso_penalty, lasso_schedule,
                                            mean_block_norm, penalty_value)
from sparse_pathways.tensor import Tensor
from sparse_pathways.training import Trainer, TrainConfig

from .conftest import batch_stream, central_diff, max_rel_err


def test_lambda_from_mean_block_norm():
    part = {"w": BlockPartition(8, 2)}
    w = np.zeros((8, 2))
    w[0, 0] = 0.25
    w[0, 1] = 0.75  # block norms 0.25 and 0.75, mean 0.5
    assert dynamic_lambdas({"w": w}, part, 0.01) == {"w": pytest.approx(0.02)}


def test_zero_layer_lambda_is_finite():
    part = {"w": BlockPartition(8, 2)}
    lam = dynamic_lambdas({"w": np.zeros((8, 2))}, part, 0.01)["w"]
    assert math.isfinite(lam) and lam == pytest.approx(0.01 / 1e-8)


def test_mean_over_surviving_blocks_only():
    part = {"w": BlockPartition(8, 2)}
    w = np.zeros((8, 2))
    w[:, 1] = 0.5 / math.sqrt(8)
    mask = Mask(part, {"w": np.array([False, True])})
    assert dynamic_lambdas({"w": w}, part, 0.01, mask)["w"] == pytest.approx(0.02)


def test_penalty_examples():
    part = {"w": BlockPartition(2, 1)}
    assert penalty_value({"w": np.zeros((2, 1))}, part, {"w": 0.1}) == 0.0
    assert penalty_value({"w": np.array([[3.0], [4.0]])}, part, {"w": 0.1}) == pytest.approx(0.5)
    t = {"w": Tensor([[3.0], [4.0]], dtype=np.float64)}
    assert lasso_penalty(t, part, {"w": 0.1}).item() == pytest.approx(0.5)


def test_penalty_rejects_misaligned_lambdas():
    with pytest.raises(ValueError):
        lasso_penalty({"w": Tensor(np.ones((8, 1)))}, {"w": BlockPartition(8, 1)}, {"v": 1.0})


@pytest.mark.parametrize("seed", range(10))
def test_penalty_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    parts = {"a": BlockPartition(12, 3), "b": BlockPartition(8, 2)}
    arrays = {n: rng.standard_normal((p.rows, p.cols)) for n, p in parts.items()}
    lambdas = {"a": 0.3, "b": 1.7}
    tensors = {n: Tensor(a, requires_grad=True, dtype=np.float64) for n, a in arrays.items()}
    lasso_penalty(tensors, parts, lambdas).backward()
    for n in parts:
        def f(x, n=n):
            return penalty_value({**arrays, n: x}, parts, lambdas)
        assert max_rel_err(tensors[n].grad, central_diff(f, arrays[n])) < 1e-3


def test_masked_blocks_get_no_gradient():
    parts = {"w": BlockPartition(16, 2)}
    mask = Mask(parts, {"w": np.array([True, False, False, True])})
    t = {"w": Tensor(np.ones((16, 2)), requires_grad=True)}
    lasso_penalty(t, parts, {"w": 1.0}, mask).backward()
    keep = mask.expanded("w")
    assert np.all(t["w"].grad[~keep] == 0) and np.all(t["w"].grad[keep] != 0)


@pytest.mark.parametrize("sparsity,stage,expected", [
    (0.0, "pruning", True), (0.706, "pruning", False), (0.0, "dense", True),
    (0.0, "pathways", False), (0.5, "pathways", False), (0.9, "finetune", False),
])
def test_schedule(sparsity, stage, expected):
    assert lasso_schedule(sparsity, 0.706, stage) is expected


def test_schedule_unknown_stage():
    with pytest.raises(ValueError):
        lasso_schedule(0.0, 0.5, "warmup")


def test_config_validation():
    assert LassoConfig().base_strength == 1e-3
    with pytest.raises(ValueError):
        LassoConfig(base_strength=-1)
    with pytest.raises(ValueError):
        LassoConfig(recompute_interval=0)


def test_lasso_shrinks_block_norms():
    cfg = ModelConfig(vocab_size=12, context_window=3, embed_dim=4, hidden_dim=16)
    runs = {}
    for on in (False, True):
        model = Model.init(cfg, np.random.default_rng(0))
        trainer = Trainer(model, TrainConfig(lr=3e-3, warmup_steps=1), LassoConfig(base_strength=0.05))
        trainer.run(batch_stream(cfg), 150, lasso_on=on, stage="dense")
        runs[on] = mean_block_norm(model.params, model.partitions)
    assert runs[True] < runs[False]


def test_lambdas_recomputed_on_interval():
    cfg = ModelConfig(vocab_size=12, context_window=3, embed_dim=4, hidden_dim=16)
    from sparse_pathways.training import MetricsLog

    log = MetricsLog()
    trainer = Trainer(Model.init(cfg, np.random.default_rng(0)), None, LassoConfig(recompute_interval=10), log)
    trainer.run(batch_stream(cfg), 25, lasso_on=True, stage="dense")
    assert sorted({step for step, _, _ in log.lambdas}) == [0, 10, 20]
