import math

import numpy as np
import pytest

from pit import tensor as T
from pit.data import CIFAR_RECORD, Dataset, load_cifar10, parse_cifar_records, synthetic_dataset
from pit.errors import ContractError, DataError, FormatError
from pit.gradcheck import gradient_check
from pit.models import build, toy_config
from pit.tensor import Tensor
from pit.training import (METRICS_COLUMNS, SWEEP_COLUMNS, DivergenceError, MetricsLog, TrainConfig, accuracy,
                          adamw_step, cosine_lr, no_decay_names, shuffle_order, sweep, train, train_step)


# ---------------------------------------------------------------------------
# CIFAR-10 binary format


def test_zero_record():
    imgs, labels = parse_cifar_records(bytes(CIFAR_RECORD))
    assert labels.tolist() == [0] and imgs.shape == (1, 3, 32, 32) and not imgs.any()


def test_pixel_layout():
    rec = bytearray(CIFAR_RECORD)
    rec[0] = 7
    rec[1] = 51
    rec[1 + 1024 + 32 * 2 + 5] = 255  # green plane, row 2, col 5
    imgs, labels = parse_cifar_records(bytes(rec))
    assert labels[0] == 7
    assert imgs[0, 0, 0, 0] == np.float32(51 / 255)
    assert imgs[0, 1, 2, 5] == 1.0 and imgs.sum() == pytest.approx(1 + 51 / 255)


def test_truncated_record_offset():
    with pytest.raises(FormatError, match="offset 3073"):
        parse_cifar_records(bytes(CIFAR_RECORD + 10))


def test_bad_label_offset():
    buf = bytearray(2 * CIFAR_RECORD)
    buf[CIFAR_RECORD] = 12
    with pytest.raises(FormatError, match="offset 3073"):
        parse_cifar_records(bytes(buf))


def test_load_batches(tmp_path):
    root = tmp_path / "cifar-10-batches-bin"
    root.mkdir()
    for i in range(1, 6):
        (root / f"data_batch_{i}.bin").write_bytes(bytes([i % 10]) * CIFAR_RECORD * 3)
    (root / "test_batch.bin").write_bytes(bytes(CIFAR_RECORD * 2))
    train_ds, test_ds = load_cifar10(tmp_path)
    # 5 x 3 records and 1 x 2; full files would give 50000 / 10000
    assert (len(train_ds), len(test_ds)) == (15, 2)
    assert sorted(set(train_ds.labels.tolist())) == [1, 2, 3, 4, 5]


def test_load_missing(tmp_path):
    with pytest.raises(DataError):
        load_cifar10(tmp_path / "missing")
    with pytest.raises(DataError):
        load_cifar10(tmp_path)


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 3, 4, 4), np.float32), np.array([0, 5]), 3)


# ---------------------------------------------------------------------------
# synthetic data


def test_synthetic_deterministic():
    a, b = synthetic_dataset(4, 50), synthetic_dataset(4, 50)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()


def test_synthetic_balanced():
    ds = synthetic_dataset(0, 100, 10)
    assert np.bincount(ds.labels).tolist() == [10] * 10
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_synthetic_needs_one_per_class():
    with pytest.raises(ContractError):
        synthetic_dataset(0, 5, 10)


def test_synthetic_linear_probe_beats_chance():
    tr, te = synthetic_dataset(0, 300), synthetic_dataset(1, 200)
    x = tr.images.reshape(len(tr), -1).astype(np.float64)
    y = np.eye(10)[tr.labels]
    w = np.linalg.lstsq(np.c_[x, np.ones(len(x))], y, rcond=None)[0]
    xt = te.images.reshape(len(te), -1)
    acc = accuracy(np.c_[xt, np.ones(len(xt))] @ w, te.labels)
    assert acc > 0.3


# ---------------------------------------------------------------------------
# loss


def test_cross_entropy_uniform():
    assert T.cross_entropy(Tensor(np.zeros((4, 10))), np.arange(4)).item() == pytest.approx(math.log(10), abs=1e-12)


def test_cross_entropy_saturated():
    logits = np.zeros((2, 5))
    logits[[0, 1], [3, 1]] = 30
    assert T.cross_entropy(Tensor(logits), np.array([3, 1])).item() < 1e-9


def test_cross_entropy_gradient():
    logits = Tensor(np.random.default_rng(0).standard_normal((6, 4)))
    labels = np.array([0, 3, 1, 2, 2, 0])
    assert gradient_check(lambda t: T.cross_entropy(t, labels), logits) < 1e-6


def test_cross_entropy_label_range():
    with pytest.raises(ContractError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


# ---------------------------------------------------------------------------
# optimizer and schedule


def p64(a):
    return {"w": Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)}


def test_adamw_zero_grad_fixed_point():
    p = p64([1.0, -2.0])
    adamw_step(p, {"w": np.zeros(2)}, {}, lr=0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adamw_first_step_magnitude():
    p = p64([0.0, 0.0, 0.0])
    adamw_step(p, {"w": np.array([3.0, -0.5, 1e-3])}, {}, lr=0.01)
    np.testing.assert_allclose(p["w"].data, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adamw_decoupled_decay():
    p = p64([2.0])
    adamw_step(p, {"w": np.zeros(1)}, {}, lr=0.1, weight_decay=0.5)
    assert p["w"].data[0] == pytest.approx(2.0 * (1 - 0.05))
    q = p64([2.0])
    adamw_step(q, {"w": np.zeros(1)}, {}, lr=0.1, weight_decay=0.5, no_decay={"w"})
    assert q["w"].data[0] == 2.0


def test_adamw_shape_mismatch():
    with pytest.raises(ContractError):
        adamw_step(p64([1.0, 2.0]), {"w": np.zeros(3)}, {}, lr=0.1)


def test_adamw_quadratic_bowl():
    p = p64([3.0, -4.0])
    state: dict = {}
    losses = []
    for _ in range(200):
        w = p["w"].data
        losses.append(float(w @ w))
        adamw_step(p, {"w": 2 * w}, state, lr=0.02)
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 0.1 * losses[0]


def test_cosine_boundaries():
    assert cosine_lr(10, 100, 10, 1e-3, 1e-5) == 1e-3
    assert cosine_lr(100, 100, 10, 1e-3, 1e-5) == 1e-5
    assert cosine_lr(55, 100, 10, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2, abs=1e-15)
    assert cosine_lr(0, 100, 10, 1e-3) == 0.0
    assert cosine_lr(5, 100, 10, 1e-3) == pytest.approx(5e-4)


def test_train_config_validation():
    with pytest.raises(ContractError):
        TrainConfig(epochs=2, warmup_epochs=2)
    assert TrainConfig(batch_size=64).base_lr == pytest.approx(5e-4 / 8)


def test_no_decay_names(toy_pit):
    skip = no_decay_names(toy_pit)
    assert {"embed.pos", "embed.cls", "head.b", "stage0.block0.ln1.g"} <= skip
    assert "head.w" not in skip and "pool0.dw_kernel" not in skip


def test_shuffle_depends_on_seed_and_epoch():
    assert np.array_equal(shuffle_order(1, 2, 50), shuffle_order(1, 2, 50))
    assert not np.array_equal(shuffle_order(1, 2, 50), shuffle_order(1, 3, 50))
    assert sorted(shuffle_order(0, 1, 50)) == list(range(50))


def test_accuracy_tie_break():
    assert accuracy(np.array([[1.0, 1.0], [0.0, 0.0]]), np.array([0, 1])) == 0.5


# ---------------------------------------------------------------------------
# training loop


@pytest.fixture(scope="module")
def small_data():
    return synthetic_dataset(0, 64), synthetic_dataset(1, 32, split="test")


def test_lr_zero_step_is_identity(small_data):
    model = build(toy_config(), 0)
    before = {k: p.data.copy() for k, p in model.params.items()}
    tr, _ = small_data
    train_step(model, tr.images[:8], tr.labels[:8], {}, 0.0, 0.05, no_decay_names(model))
    assert all(before[k].tobytes() == p.data.tobytes() for k, p in model.params.items())


def test_train_deterministic_and_lr_column(tmp_path, small_data):
    tr, te = small_data
    cfg = TrainConfig(epochs=3, batch_size=16, base_lr=1e-3, warmup_epochs=1, seed=0)
    train(build(toy_config(), 0), tr, te, cfg, tmp_path / "a")
    log = train(build(toy_config(), 0), tr, te, cfg, tmp_path / "b")
    a, b = (tmp_path / "a" / "metrics.csv").read_bytes(), (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a == b
    assert a.decode().splitlines()[0] == ",".join(METRICS_COLUMNS)
    assert (tmp_path / "a" / "checkpoint" / "manifest.json").is_file()
    spe = 4
    for row in log.rows:
        expect = cosine_lr(row.epoch * spe, 3 * spe, spe, 1e-3, cfg.min_lr)
        assert abs(row.lr - expect) <= 1e-12
    assert MetricsLog.parse(a.decode()).rows == log.rows


@pytest.mark.slow
def test_loss_below_uniform_after_one_epoch():
    tr, te = synthetic_dataset(0, 2048), synthetic_dataset(1, 32)
    cfg = TrainConfig(epochs=1, batch_size=32, base_lr=3e-4, warmup_epochs=0, seed=0)
    log = train(build(toy_config(), 0), tr, te, cfg)
    assert log.rows[0].train_loss < math.log(10)


def test_train_rejects_wrong_image_size(small_data):
    tr, te = small_data
    with pytest.raises(DataError):
        train(build(toy_config(image_size=16), 0), tr, te, TrainConfig(epochs=1, warmup_epochs=0))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_context(small_data):
    tr, te = small_data
    model = build(toy_config(), 0)
    model.params["head.b"].data[0] = np.inf
    with pytest.raises(DivergenceError, match="epoch 1 step 1"):
        train(model, tr, te, TrainConfig(epochs=1, warmup_epochs=0, batch_size=16))


def test_sweep_rows(tmp_path):
    tr, te = synthetic_dataset(0, 32), synthetic_dataset(1, 16)
    cfg = TrainConfig(epochs=1, batch_size=16, warmup_epochs=0, seed=0)
    rows = sweep([0.5, 1.0], tr, te, cfg, out_path=tmp_path / "sweep.csv")
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == ",".join(SWEEP_COLUMNS) and len(lines) == 5
    assert [(r.family, r.width_scale) for r in rows] == [("vit", 0.5), ("pit", 0.5), ("vit", 1.0), ("pit", 1.0)]
    from pit.analysis import count_flops
    assert rows[1].flops == count_flops(toy_config(0.5, family="pit")).total_macs
    with pytest.raises(ContractError):
        sweep([1.0], tr, te, cfg)
