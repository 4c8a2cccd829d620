import copy
import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssadv import tensor as T
from ssadv.attacks import AttackConfig
from ssadv.data import augment, synthetic_dataset
from ssadv.evaluation import eval_standard
from ssadv.models import ArchConfig, build_model, load_checkpoint, save_checkpoint
from ssadv.optim import SGD
from ssadv.ss_tasks import SSTask
from ssadv.training import (
    ConfigError,
    EpochRecord,
    Streams,
    TrainConfig,
    TrainMode,
    _run,
    adv_train,
    compose_loss,
    mode_attack,
    prepare_batch,
    read_history,
    ss_pretrain,
    write_history,
)

SHAPE = (3, 8, 8)
ARCH = ArchConfig("tiny-cnn", 0.25, SHAPE, 10, 4)


@pytest.fixture(scope="module")
def data():
    return synthetic_dataset("striped-classes", 96, 0, SHAPE, 10)


def config(tag="T0", lambda1=0.0, epochs=2, **attack):
    atk = mode_attack(tag, AttackConfig(**{"steps": 2, **attack}))
    return TrainConfig(epochs=epochs, batch_size=32, lr=0.05, seed=5, mode=TrainMode(tag, lambda1, atk))


# --- loss composition ------------------------------------------------------------

def test_compose_loss_examples():
    assert compose_loss("T1", 0.5, 1.0, 0.5) == 1.25
    assert compose_loss("T1", 0.0, 0.7, 123.0) == 0.7
    assert compose_loss("T0", 0.0, 0.7) == 0.7
    with pytest.raises(ConfigError, match="lambda1"):
        compose_loss("T0", 0.5, 1.0)
    with pytest.raises(ValueError):
        compose_loss("T3", 0.5, 1.0)


def test_compose_loss_on_tensors():
    sup, ss = T.Tensor(1.0, requires_grad=True), T.Tensor(0.5, requires_grad=True)
    total = compose_loss("T3", 2.0, sup, ss)
    assert total.item() == 2.0
    assert [g.item() for g in T.grad(total, [sup, ss])] == [1.0, 2.0]


@given(st.sampled_from(["T1", "T2", "T3", "T_rotonly"]), st.floats(0, 10), st.floats(0, 100),
       st.floats(0, 100), st.floats(0, 100))
def test_compose_loss_linear_in_ss(tag, lam, sup, ss_a, ss_b):
    f = lambda s: compose_loss(tag, lam, sup, s)  # noqa: E731
    assert f(ss_a) - f(ss_b) == pytest.approx(lam * (ss_a - ss_b), abs=1e-9 * (1 + sup + lam * 100))
    assert f(0.0) == sup


# --- config ----------------------------------------------------------------------

def test_lr_schedule():
    cfg = TrainConfig()
    assert [cfg.lr_at(e) for e in (0, 39, 40, 80)] == pytest.approx([0.1, 0.1, 0.01, 0.001])


def test_mode_contradictions_name_both_keys():
    with pytest.raises(ConfigError, match="mode=T1 contradicts use_ss_loss=true"):
        TrainMode("T1", 0.5, AttackConfig(use_ss_loss=True, attack_ss=False)).validate()
    with pytest.raises(ConfigError, match="mode=T0 contradicts lambda1"):
        TrainMode("T0", 0.5, AttackConfig()).validate()
    with pytest.raises(ConfigError, match="mode=T3 contradicts attack_ss=false"):
        TrainMode("T3", 0.5, AttackConfig(use_ss_loss=True)).validate()
    for tag in ("T0", "T1", "T2", "T3", "T_rotonly"):
        TrainMode(tag, 0.0 if tag == "T0" else 1.0, mode_attack(tag, AttackConfig())).validate()


def test_streams_are_independent():
    a, b = Streams.from_seed(1), Streams.from_seed(1)
    a.ss.random(100)  # consuming one stream leaves the others untouched
    assert a.attack.random() == b.attack.random()
    assert a.data.random() == b.data.random()


# --- batches and routing -----------------------------------------------------------

def _batch(tag, data, eps=8 / 255, steps=2, seed=0):
    model = build_model(ARCH, 0)
    mode = TrainMode(tag, 1.0, mode_attack(tag, AttackConfig(epsilon=eps, steps=steps)))
    streams = Streams.from_seed(seed)
    ref = copy.deepcopy(streams.ss)
    X, y = data.images[:16], data.labels[:16]
    b = prepare_batch(model, X, y, mode, SSTask(), streams)
    X_ss, y_ss = SSTask().apply(X, ref)
    return b, X, X_ss, y_ss


def test_t1_ss_batch_is_clean_transform(data):
    b, X, X_ss, y_ss = _batch("T1", data)
    assert b.x_ss.tobytes() == X_ss.tobytes() and (b.y_ss == y_ss).all()
    assert not np.array_equal(b.x_sup, X)


@pytest.mark.parametrize("tag", ["T2", "T3"])
@pytest.mark.parametrize("seed", range(3))
def test_t2_t3_ss_batch_is_attacked(data, tag, seed):
    b, X, X_ss, y_ss = _batch(tag, data, seed=seed)
    assert (b.y_ss == y_ss).all()
    assert not np.array_equal(b.x_ss, X_ss)
    assert np.abs(b.x_ss - X_ss).max() <= 8 / 255 * (1 + 1e-5)


def test_t0_has_no_ss_batch(data):
    b, X, _, _ = _batch("T0", data)
    assert b.x_ss is None and b.y_ss is None


def test_rotonly_attacks_the_transformed_images(data):
    b, X, X_ss, y_ss = _batch("T_rotonly", data)
    assert np.abs(b.x_sup - X_ss).max() <= 8 / 255 * (1 + 1e-5)
    assert b.x_sup is b.x_ss


# --- training loop ------------------------------------------------------------------

def test_history_records(data):
    r0 = adv_train(config("T0"), data, data, arch=ARCH)
    r1 = adv_train(config("T1", 0.5), data, data, arch=ARCH)
    assert len(r0.history) == 2 and all(h.ss_loss is None for h in r0.history)
    assert all(h.ss_loss is not None and h.sup_loss is not None for h in r1.history)
    assert [h.lr for h in r0.history] == [0.05, 0.05]


@pytest.mark.parametrize("tag", ["T2", "T3", "T_rotonly"])
def test_all_modes_train(data, tag):
    r = adv_train(config(tag, 1.0, epochs=1), data, data, arch=ARCH)
    assert np.isfinite(r.history[0].sup_loss) and np.isfinite(r.history[0].ss_loss)


def test_zero_attack_equals_standard_training(data):
    cfg = config("T0", epochs=2, epsilon=0.0, steps=0, random_start=False)
    trained = adv_train(cfg, data, None, arch=ARCH).model

    # independent plain SGD loop consuming the same streams
    streams = Streams.from_seed(cfg.seed)
    model = build_model(ARCH, streams.init_seed)
    opt = SGD(model.params, cfg.momentum, cfg.weight_decay, model.decay_names)
    for epoch in range(cfg.epochs):
        order = streams.data.permutation(len(data))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            X = augment(data.images[idx], streams.data)
            model.train()
            opt.zero_grad()
            T.backward(T.cross_entropy_mean(model.predict_sup(X), data.labels[idx]))
            opt.step(cfg.lr_at(epoch))
    assert trained.checksum() == model.checksum()


def test_validation_does_not_mutate_model_or_optimizer(data):
    model = build_model(ARCH, 0)
    opt = SGD(model.params, 0.9, 5e-4, model.decay_names)
    for t in model.params.values():
        t.grad = np.ones_like(t.data)
    opt.step(0.1)
    state = model.copy_state()
    velocity = {k: v.copy() for k, v in opt.velocity.items()}
    eval_standard(model.train(), data)
    assert model.training
    assert all(model.state_dict()[k].tobytes() == v.tobytes() for k, v in state.items())
    assert all(opt.velocity[k].tobytes() == v.tobytes() for k, v in velocity.items())


def test_best_epoch_is_earliest_maximum(data):
    scores = iter([50.0, 70.0, 70.0, 60.0])
    marks = []

    def epoch_fn(model, ds, cfg, opt, streams, lr):
        model.params["sup_head.bias"].data[0] = len(marks)
        marks.append(1)
        return 1.0, None

    cfg = config("T0", epochs=4)
    res = _run(cfg, data, data, build_model(ARCH, 0), epoch_fn, lambda m, d: next(scores), None, False, {}, True)
    assert res.best_epoch == 1 and res.best_val_ta == 70.0
    assert res.model.params["sup_head.bias"].data[0] == 1


def test_training_is_deterministic(data):
    a = adv_train(config("T3", 1.0), data, data, arch=ARCH)
    b = adv_train(config("T3", 1.0), data, data, arch=ARCH)
    assert a.best_epoch == b.best_epoch and a.model.checksum() == b.model.checksum()


def test_checkpoints_and_resume(tmp_path, data):
    full = adv_train(config("T1", 0.5, epochs=4), data, data, arch=ARCH, out_dir=tmp_path / "full")
    adv_train(config("T1", 0.5, epochs=2), data, data, arch=ARCH, out_dir=tmp_path / "part")
    resumed = adv_train(config("T1", 0.5, epochs=4), data, data, arch=ARCH, out_dir=tmp_path / "part", resume=True)
    assert resumed.model.checksum() == full.model.checksum()
    assert resumed.best_epoch == full.best_epoch
    strip = lambda hs: [dataclasses.replace(h, seconds=0.0) for h in hs]  # noqa: E731
    assert strip(resumed.history) == strip(full.history)
    best, meta, _ = load_checkpoint(tmp_path / "full" / "best.ckpt")
    assert best.checksum() == full.model.checksum()
    assert meta["mode"] == "T1" and meta["lambda1"] == 0.5 and meta["epoch"] == full.best_epoch
    assert (tmp_path / "full" / "history.csv").exists()


def test_history_csv_round_trip(tmp_path):
    hist = [EpochRecord(0, 0.1, 1.5, None, 42.0, 1.25), EpochRecord(1, 0.1, 1.25, None, None, 2.0)]
    write_history(hist, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,lr,sup_loss,ss_loss,val_ta,seconds"
    assert read_history(tmp_path / "h.csv") == hist


def test_ss_head_size_must_match_task(data):
    cfg = dataclasses.replace(config("T1", 1.0), task=SSTask("jigsaw", 2, 24))
    with pytest.raises(ConfigError):
        adv_train(cfg, data, None, model=build_model(ARCH, 0))


# --- pretraining --------------------------------------------------------------------

def test_pretrain_loss_decreases():
    ds = synthetic_dataset("striped-classes", 5000, 1, SHAPE, 10)
    cfg = TrainConfig(epochs=5, batch_size=128, lr=0.05, seed=0,
                      mode=TrainMode("T0", 0.0, AttackConfig(steps=2)))
    res = ss_pretrain(cfg, ds, None, norm="l2", arch=ARCH)
    losses = [h.ss_loss for h in res.history]
    assert losses[-1] < losses[0]


def test_pretrained_trunk_initializes_training(tmp_path, data):
    cfg = TrainConfig(epochs=1, batch_size=32, lr=0.05, seed=0, mode=TrainMode("T0", 0.0, AttackConfig(steps=1)))
    pre = ss_pretrain(cfg, data, data, norm="linf", arch=ARCH, out_dir=tmp_path)
    assert pre.best_epoch == 0 and pre.history[0].val_ta is not None
    _, meta, _ = load_checkpoint(tmp_path / "best.ckpt")
    assert meta["norm"] == "linf" and meta["kind"] == "pretrain"
    start = adv_train(dataclasses.replace(config("T0"), epochs=0), data, None, arch=ARCH,
                      init_checkpoint=tmp_path / "best.ckpt")
    for k, t in pre.model.params.items():
        if k.startswith("trunk."):
            assert start.model.params[k].data.tobytes() == t.data.tobytes()


def test_pretrain_head_mismatch_reinitializes_head(tmp_path, data):
    jig = ArchConfig("tiny-cnn", 0.25, SHAPE, 10, 24)
    save_checkpoint(tmp_path / "p.ckpt", build_model(jig, 3))
    res = adv_train(dataclasses.replace(config("T1", 1.0), epochs=0), data, None, arch=ARCH,
                    init_checkpoint=tmp_path / "p.ckpt")
    assert res.model.params["ss_head.weight"].shape == (ARCH_FEATURES(), 4)


def ARCH_FEATURES():  # noqa: N802
    return build_model(ARCH, 0).feature_dim
