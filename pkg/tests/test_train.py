import csv
import math

import numpy as np
import pytest

from layercaps.aggregation import AggregatorConfig
from layercaps.model import EOS, FIRST_SYMBOL, ModelConfig
from layercaps.tasks import TaskData, pack, reverse_task, swap_translate_task
from layercaps.train import (METRICS_HEADER, Adam, TrainConfig, TrainingDiverged, clip_gradients,
                             learning_rate, train)
from layercaps.tensor import Parameter


def tiny(strategy="none"):
    return ModelConfig(L=2, d=8, heads=2, d_ff=16, vocab_size=10, max_len=12,
                       aggregator=AggregatorConfig(strategy=strategy, N=4, T=2))


FAST = TrainConfig(batch_size=4, eval_size=8, eval_every=2)


def test_reverse_task():
    assert reverse_task([3, 4, 5], 10) == [5, 4, 3]


def test_swap_translate_pairs_and_maps():
    # vocab 10: symbols 3..9 map to 9..3
    assert swap_translate_task([3, 4, 5, 6, 7], 10) == [8, 9, 6, 7, 5]
    assert swap_translate_task([3], 10) == [9]


def test_pack_appends_eos_and_pads():
    b = pack("reverse", [(3, 4), (5, 6, 7)], 10)
    assert b.src_tokens.tolist() == [[3, 4, 0], [5, 6, 7]]
    assert b.tgt_tokens.tolist() == [[4, 3, EOS, 0], [7, 6, 5, EOS]]


def test_training_stream_never_hits_held_out():
    data = TaskData("copy", 6, 2, 3, 30, seed=0)
    held = set(data.held_out)
    for _ in range(20):
        b = data.train_batch(16)
        for row, mask in zip(b.src_tokens, b.src_mask):
            assert tuple(int(s) for s in row[mask]) not in held
    assert all(min(s) >= FIRST_SYMBOL for s in data.held_out)


def test_held_out_independent_of_training_seed():
    assert TaskData("copy", 10, 4, 6, 16, seed=0).held_out == TaskData("copy", 10, 4, 6, 16, seed=9).held_out


def test_unknown_task():
    with pytest.raises(ValueError):
        TaskData("sort", 10, 2, 4, 8, seed=0)
    with pytest.raises(ValueError):
        TaskData("copy", 6, 2, 3, 36, seed=0)   # only 3**2 + 3**3 sequences exist


def test_learning_rate_schedule():
    assert learning_rate(1, 1.0, 4) == 0.25
    assert learning_rate(4, 1.0, 4) == 1.0
    assert learning_rate(16, 1.0, 4) == 0.5


def test_adam_first_step_moves_by_lr():
    p = Parameter(np.array([1.0, -2.0]))
    p.grad = np.array([0.3, -4.0])
    Adam([p]).step(0.1)
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-9)


def test_gradient_clipping():
    p = Parameter(np.zeros(2))
    p.grad = np.array([3.0, 4.0])
    assert clip_gradients([p], 1.0) == 5.0
    np.testing.assert_allclose(p.grad, [0.6, 0.8])


def test_zero_steps_reports_initial_metrics():
    result = train("copy", tiny(), FAST, 0, seed=0)
    assert len(result.history) == 1 and result.history[0]["step"] == 0
    assert result.final["token_accuracy"] == result.history[0]["token_accuracy"]


@pytest.mark.parametrize("strategy", ["none", "em-routing"])
def test_same_seed_same_losses(strategy):
    a = train("swap-translate", tiny(strategy), FAST, 4, seed=5)
    b = train("swap-translate", tiny(strategy), FAST, 4, seed=5)
    assert [r["loss"] for r in a.history] == [r["loss"] for r in b.history]
    c = train("swap-translate", tiny(strategy), FAST, 4, seed=6)
    assert [r["loss"] for r in a.history] != [r["loss"] for r in c.history]


def test_loss_goes_down():
    result = train("copy", tiny("dynamic-routing"), TrainConfig(batch_size=8, eval_size=8, eval_every=100,
                                                               warmup=10), 40, seed=0)
    first = np.mean([r["loss"] for r in result.history[1:6]])
    last = np.mean([r["loss"] for r in result.history[-5:]])
    assert last < first


def test_metrics_csv(tmp_path):
    path = tmp_path / "metrics.csv"
    train("copy", tiny(), FAST, 3, seed=0, metrics_path=path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == METRICS_HEADER
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3"]
    assert rows[2][2] == "" and rows[3][2] != ""
    assert all(math.isfinite(float(r[1])) for r in rows[1:])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step():
    cfg = TrainConfig(batch_size=4, eval_size=8, lr=1e300, warmup=1, clip_norm=None)
    with pytest.raises(TrainingDiverged) as info:
        train("copy", tiny(), cfg, 20, seed=0)
    assert info.value.step >= 2


def test_train_config_problems():
    errs = TrainConfig(batch_size=0, lr=-1.0, min_len=9, max_len=3).problems()
    assert [e.split(":")[0] for e in errs] == ["train.batch_size", "train.min_len", "train.lr"]
