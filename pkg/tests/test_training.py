import csv
import math
import time

import numpy as np
import pytest

from arrayssl.checkpoint import Checkpoint, dumps, load_checkpoint, loads, save_checkpoint
from arrayssl.errors import ConfigError, FormatError, NonFiniteError, NoSignalWarning
from arrayssl.models import BandwidthNet, InpaintNet, transfer_encoder
from arrayssl.tensorcore import DiffTensor, is_grad_enabled, square, tensor_sum
from arrayssl.tensorcore.nn import Module
from arrayssl.training import (
    TRANSFER_DEFAULTS,
    PlateauMonitor,
    TrainConfig,
    bandwidth_loss,
    bandwidth_loss_per_example,
    evaluate,
    inpaint_objective,
    make_bandwidth_objective,
    mse_loss,
    model_checkpoint,
    model_from_checkpoint,
    pretrain,
    split_dataset,
    split_indices,
    train_loop,
    write_metrics_csv,
)


# ---------------------------------------------------------------- bandwidth loss

def brute_force_bw_loss(b, b_hat, eps):
    total = 0.0
    for i in range(len(b)):
        if b[i] != 0:
            total += (math.log(b[i]) - math.log(eps + b_hat[i])) ** 2
    return total


def test_bandwidth_loss_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        f = int(rng.integers(4, 64))
        b = np.where(rng.random(f) < 0.2, rng.integers(1, f + 1, f) / f, 0.0)
        b[rng.integers(f)] = 3 / f
        b_hat = rng.uniform(1e-4, 2.0, f)
        got = bandwidth_loss(b, DiffTensor(b_hat, dtype=np.float64), 1e-6).item()
        want = brute_force_bw_loss(b, b_hat, 1e-6)
        assert abs(got - want) <= 1e-6 * abs(want)


def test_bandwidth_loss_hand_value():
    b = np.zeros(2048)
    b[7] = 1 / 2048
    pred = DiffTensor(np.ones(2048))
    assert bandwidth_loss(b, pred, 1e-6).item() == pytest.approx(58.13, abs=5e-3)
    assert bandwidth_loss(b, pred, 1e-6).item() == pytest.approx((math.log(1 / 2048) - math.log(1 + 1e-6)) ** 2)


def test_bandwidth_loss_zero_at_exact_prediction():
    b = np.zeros(16)
    b[[2, 9]] = [0.25, 0.5]
    pred = DiffTensor(np.where(b > 0, b - 1e-6, 0.3), dtype=np.float64)
    assert bandwidth_loss(b, pred, 1e-6).item() == pytest.approx(0.0, abs=1e-15)


def test_bandwidth_loss_ignores_and_blocks_zero_bins():
    rng = np.random.default_rng(1)
    b = np.zeros((3, 32))
    b[0, 4], b[1, 20], b[2, 31] = 0.125, 0.5, 1 / 32
    p1 = rng.uniform(0.1, 1, (3, 32))
    p2 = np.where(b != 0, p1, rng.uniform(0.1, 5, (3, 32)))
    pred = DiffTensor(p1, requires_grad=True, dtype=np.float64)
    loss = bandwidth_loss(b, pred)
    assert loss.item() == bandwidth_loss(b, DiffTensor(p2, dtype=np.float64)).item()
    loss.backward()
    assert np.all(pred.grad[b == 0] == 0.0)
    assert np.all(pred.grad[b != 0] != 0.0)


def test_bandwidth_loss_no_signal_warning():
    with pytest.warns(NoSignalWarning):
        out = bandwidth_loss_per_example(np.zeros((2, 8)), DiffTensor(np.ones((2, 8))))
    assert np.all(out.data == 0)


def test_bandwidth_loss_is_batch_mean():
    b = np.zeros((2, 8))
    b[0, 1], b[1, 5] = 0.5, 0.25
    pred = DiffTensor(np.full((2, 8), 0.3))
    per = bandwidth_loss_per_example(b, pred).data
    assert bandwidth_loss(b, pred).item() == pytest.approx(per.mean())


def test_bandwidth_loss_gradient_check():
    from arrayssl.tensorcore import grad_check

    rng = np.random.default_rng(2)
    b = np.zeros((2, 16))
    b[0, [3, 11]] = [0.25, 0.125]
    b[1, 7] = 0.5
    pred = DiffTensor(rng.uniform(0.05, 1.0, (2, 16)), requires_grad=True)
    assert grad_check(lambda p: bandwidth_loss(b, p), [pred]).passed


# ---------------------------------------------------------------- mse

def test_mse_examples():
    rng = np.random.default_rng(3)
    t = rng.standard_normal((4, 8, 8, 16))
    t = (t - t.mean()) / t.std()
    assert mse_loss(DiffTensor(t), DiffTensor(t)).item() == 0.0
    assert mse_loss(DiffTensor(np.zeros_like(t)), DiffTensor(t)).item() == pytest.approx(1.0, abs=1e-5)
    assert mse_loss(DiffTensor(t + 0.5), DiffTensor(t)).item() == pytest.approx(0.25, rel=1e-5)


# ---------------------------------------------------------------- split

def test_split_downstream_sizes():
    tr, va = split_indices(77, 0.2, seed=0)
    assert (len(tr), len(va)) == (62, 15)
    assert sorted(np.r_[tr, va].tolist()) == list(range(77))
    tr2, va2 = split_indices(77, 0.2, seed=0)
    assert np.array_equal(tr, tr2) and np.array_equal(va, va2)


def test_split_pretrain_sizes_and_multiset():
    tr, va = split_indices(8855, 0.2, seed=1)
    assert (len(tr), len(va)) == (7084, 1771)
    data = np.random.default_rng(4).integers(0, 5, 30)
    a, b = split_dataset(data, 0.2, 5)
    assert sorted(np.r_[a, b].tolist()) == sorted(data.tolist())


def test_split_too_small():
    with pytest.raises(ConfigError):
        split_indices(1, 0.2, 0)


# ---------------------------------------------------------------- schedule

def run_monitor(trace, lr=1e-3):
    mon = PlateauMonitor(lr, 30, 10, 0.1)
    lrs = []
    for epoch, v in enumerate(trace):
        lrs.append(mon.lr)
        mon.update(epoch, v)
        if mon.stopped:
            return epoch, lrs, mon
    return None, lrs, mon


def test_flat_trace_stops_at_thirtieth_non_improving_epoch():
    stop, lrs, mon = run_monitor([1.0] * 100)
    assert stop == 30  # epoch 0 sets the best, epochs 1..30 do not improve
    assert mon.best_epoch == 0


def test_plateau_drops_lr_at_start_of_epoch_eleven():
    _, lrs, _ = run_monitor([1.0] * 100)
    assert all(lr == 1e-3 for lr in lrs[:11])
    assert lrs[11] == pytest.approx(1e-4)
    assert lrs[21] == pytest.approx(1e-5)


def test_ties_do_not_count_as_improvement():
    stop, _, mon = run_monitor([1.0, 0.5] + [0.5] * 40)
    assert mon.best_epoch == 1 and stop == 31


def test_four_drops_then_stop():
    # each improvement lands right after a drop, the last plateau runs out
    trace = [1.0] * 11 + [0.9] + [0.9] * 10 + [0.8] + [0.8] * 40
    stop, lrs, mon = run_monitor(trace)
    drops = [i for i in range(1, len(lrs)) if lrs[i] < lrs[i - 1]]
    assert len(drops) == 4
    for i in drops:
        assert lrs[i] == pytest.approx(lrs[i - 1] * 0.1)
    assert stop == 22 + 30


class Scripted(Module):
    """One-parameter model whose validation loss follows a script."""

    def __init__(self, script):
        self.w = DiffTensor(np.array([1.0]), requires_grad=True)
        self.script = list(script)
        self.calls = 0
        self.snapshots = []
        self.train_batches = 0

    def forward(self, x):
        return self.w


def scripted_objective(model, inputs, targets):
    if is_grad_enabled():
        model.train_batches += 1
        loss = tensor_sum(square(model.w)) * 1e-3
        return loss, np.zeros(len(inputs))
    value = model.script[min(model.calls, len(model.script) - 1)]
    model.calls += 1
    model.snapshots.append(model.w.data.copy())
    return DiffTensor(np.array(value)), np.full(len(inputs), value)


def test_train_loop_follows_protocol_on_scripted_trace(tmp_path):
    t0 = time.perf_counter()
    # initial eval, then per-epoch validation losses
    trace = [2.0, 1.5, 1.2, 1.3, 1.0, 1.0] + [1.1] * 60
    model = Scripted(trace)
    cfg = TrainConfig(batch_size=4, val_fraction=0.2, seed=0)
    result = train_loop(model, np.zeros((20, 1)), np.zeros((20, 1)), cfg, scripted_objective,
                        checkpoint_path=tmp_path / "best.nnck", metrics_path=tmp_path / "m.csv")
    records = result.records
    vals = [r.val_loss for r in records]
    assert vals[:5] == trace[1:6]
    best = int(np.argmin(vals))
    assert best == 3 and result.best_epoch == 3  # first of the tied minima
    assert len(records) == best + 31
    assert [r.saved for r in records[:5]] == [True, True, False, True, False]
    assert result.best_val_loss == min(vals)
    # returned checkpoint is the weights seen at the best epoch's validation
    np.testing.assert_array_equal(result.checkpoint.tensors["w"], model.snapshots[best + 1])
    assert load_checkpoint(tmp_path / "best.nnck").metadata["train.epoch"] == "3"
    lrs = [r.lr for r in records]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert lrs[best + 11] == pytest.approx(1e-4) and lrs[best + 10] == 1e-3
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "lr", "saved"]
    assert len(rows) - 1 == len(records)
    assert time.perf_counter() - t0 < 1.0


def test_full_size_batch_count():
    model = Scripted([1.0])
    cfg = TrainConfig(batch_size=16, max_epochs=1)
    train_loop(model, np.zeros((8855, 1)), np.zeros((8855, 1)), cfg, scripted_objective)
    assert model.train_batches == 443


def test_non_finite_loss_reports_batch():
    class Exploding(Scripted):
        pass

    def objective(model, inputs, targets):
        if is_grad_enabled():
            model.train_batches += 1
            scale_ = np.inf if model.train_batches == 3 else 1.0
            return tensor_sum(square(model.w)) * scale_, np.zeros(len(inputs))
        return DiffTensor(np.array(1.0)), np.ones(len(inputs))

    with pytest.raises(NonFiniteError) as info:
        train_loop(Exploding([1.0]), np.zeros((40, 1)), np.zeros((40, 1)),
                   TrainConfig(batch_size=4, max_epochs=1), objective)
    assert info.value.batch_index == 2


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(val_fraction=1.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(early_stop_patience=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(epsilon=0).validate()
    assert TRANSFER_DEFAULTS.initial_lr == 0.01
    cfg = TrainConfig(seed=3, freeze_encoder=True, max_epochs=7)
    assert TrainConfig.from_metadata(cfg.to_metadata()) == cfg


# ---------------------------------------------------------------- evaluate

def test_evaluate_statistics():
    rng = np.random.default_rng(6)
    net = BandwidthNet(n_chunks=32, seed=0)
    x = rng.standard_normal((5, 8, 32, 16)).astype(np.float32)
    y = np.zeros((5, 16), np.float32)
    y[:, 4] = 0.25
    obj = make_bandwidth_objective()
    res = evaluate(net, x, y, obj)
    assert res.mean_loss >= res.best_case
    assert res.per_example.shape == (5,)
    single = evaluate(net, x[:1], y[:1], obj)
    assert single.mean_loss == single.best_case
    with pytest.raises(ConfigError):
        evaluate(net, x[:0], y[:0], obj)


def test_evaluate_perfect_predictions():
    class Echo(Module):
        def forward(self, x):
            return x

    y = np.zeros((3, 8), np.float32)
    y[:, 2] = 0.5
    res = evaluate(Echo(), y - 1e-6, y, make_bandwidth_objective())
    assert res.mean_loss < 1e-8 and res.best_case < 1e-8


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_bitwise(tmp_path):
    net = InpaintNet(seed=4)
    net(DiffTensor(np.random.default_rng(7).standard_normal((2, 8, 8, 16))))  # move running stats
    ck = model_checkpoint(net, TrainConfig(seed=4))
    save_checkpoint(tmp_path / "a.nnck", ck)
    back = load_checkpoint(tmp_path / "a.nnck")
    assert list(back.tensors) == list(ck.tensors)
    for k in ck.tensors:
        assert back.tensors[k].tobytes() == np.asarray(ck.tensors[k], np.float32).tobytes()
    assert back.metadata == ck.metadata
    rebuilt = model_from_checkpoint(back)
    for (k, a), (_, b) in zip(net.state_dict().items(), rebuilt.state_dict().items()):
        assert np.array_equal(a, b), k


def test_checkpoint_layout_and_errors():
    ck = Checkpoint({"a.w": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"k": "v"})
    raw = dumps(ck)
    assert raw[:4] == b"NNCK" and raw[4] == 1
    assert int.from_bytes(raw[5:9], "little") == 1
    assert len(raw) == 4 + 1 + 4 + 2 + 3 + 1 + 8 + 24 + 4 + 3
    with pytest.raises(FormatError, match="magic"):
        loads(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="version"):
        loads(raw[:4] + b"\x02" + raw[5:])
    for cut in (3, 10, 20, len(raw) - 1):
        with pytest.raises(FormatError):
            loads(raw[:cut])
    with pytest.raises(FormatError):
        loads(raw + b"\x00")
    bad_dims = bytearray(raw)
    bad_dims[15:19] = (5).to_bytes(4, "little")  # claims [5, 3]: payload runs short
    with pytest.raises(FormatError):
        loads(bytes(bad_dims))


def test_inpaint_checkpoint_feeds_transfer(tmp_path):
    net = InpaintNet(seed=5)
    save_checkpoint(tmp_path / "p.nnck", model_checkpoint(net))
    src = model_from_checkpoint(load_checkpoint(tmp_path / "p.nnck"))
    dst = transfer_encoder(src, BandwidthNet(seed=1))
    for (k, a), (_, b) in zip(net.encoder.state_dict().items(), dst.encoder.state_dict().items()):
        assert np.array_equal(a, b), k


def test_metrics_csv_format(tmp_path):
    from arrayssl.training import EpochRecord

    write_metrics_csv(tmp_path / "m.csv", [EpochRecord(0, 1.5, 1.25, 0.001, True)])
    assert (tmp_path / "m.csv").read_text() == "epoch,train_loss,val_loss,lr,saved\n0,1.5,1.25,0.001,1\n"


# ---------------------------------------------------------------- determinism

def test_pretrain_runs_are_bitwise_repeatable():
    x = np.random.default_rng(8).standard_normal((12, 8, 8, 16)).astype(np.float32)
    cfg = TrainConfig(max_epochs=2, batch_size=4, seed=3)
    _, r1 = pretrain(x, cfg)
    _, r2 = pretrain(x, cfg)
    assert [(r.train_loss, r.val_loss, r.lr) for r in r1.records] == \
        [(r.train_loss, r.val_loss, r.lr) for r in r2.records]
    assert r1.initial_val_loss == r2.initial_val_loss


def test_inpaint_objective_per_example():
    net = InpaintNet(seed=0)
    x = np.random.default_rng(9).standard_normal((3, 8, 8, 8)).astype(np.float32)
    net.eval()
    loss, per = inpaint_objective(net, x, x)
    assert per.shape == (3,)
    assert loss.item() == pytest.approx(per.mean(), rel=1e-5)
