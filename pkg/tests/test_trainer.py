import math

import numpy as np
import pytest

from drdeeg import autodiff as ad
from drdeeg import trainer as trainer_mod
from drdeeg.data import SegmentDataset
from drdeeg.decoder import DecoderArch, DecoderObjective, init_params
from drdeeg.evolve import EvolutionConfig
from drdeeg.seeding import streams
from drdeeg.trainer import (
    TrainConfig,
    TrainingError,
    loso_split,
    read_history,
    stratified_subsample,
    train,
    train_step,
    write_history,
)
from toys import ScalarCoupled, ScalarParabola

TOY = DecoderArch(4, 16, 3, f1=3, f2=4, f3=4, temporal_kernel=5)
QUIET = EvolutionConfig(noise=False)


def _batch(seed, n=4, arch=TOY):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, arch.window, arch.n_channels)), rng.integers(0, arch.n_classes, n)


def _toy_dataset(n_subjects=3, per_subject=12, seed=0):
    rng = np.random.default_rng(seed)
    n = n_subjects * per_subject
    y = np.arange(n) % 3
    pattern = rng.standard_normal((3, 1, 4))
    x = pattern[y] + 0.5 * rng.standard_normal((n, 16, 4))
    return SegmentDataset(x, y, np.repeat(np.arange(n_subjects), per_subject), 3, 250.0)


# -- train_step -------------------------------------------------------------

@pytest.mark.parametrize("method", trainer_mod.METHODS)
def test_zero_rate_leaves_theta(method):
    x, y = _batch(0)
    theta = init_params(TOY, 0).flat
    out = train_step(DecoderObjective(TOY), theta, x, y, TrainConfig(eta=0.0, method=method))
    assert np.array_equal(out.theta, theta)


def test_base_step_on_scalar_parabola():
    out = train_step(ScalarParabola(), np.zeros(1), np.zeros((3, 1)), np.zeros(3),
                     TrainConfig(eta=0.1, method="base"))
    assert out.theta[0] == pytest.approx(0.1, abs=1e-15)
    assert out.loss == pytest.approx(0.5)


def test_identity_evolution_doubles_the_base_step():
    x, y = _batch(1)
    theta = init_params(TOY, 1).flat
    evo = EvolutionConfig(alpha=0.0, noise=False)
    drd = train_step(DecoderObjective(TOY), theta, x, y, TrainConfig(eta=0.05, method="drd-ld", evolution=evo))
    base = train_step(DecoderObjective(TOY), theta, x, y, TrainConfig(eta=0.1, method="base"))
    np.testing.assert_array_equal(drd.x_extra, x)
    np.testing.assert_allclose(drd.theta, base.theta, rtol=0, atol=1e-12)
    assert drd.loss == pytest.approx(2 * base.loss, rel=1e-12)


@pytest.mark.parametrize("method", ["base", "drd-ld", "drd-hmc", "freq-shift"])
def test_update_is_minus_eta_times_mean_gradient(method):
    x, y = _batch(2, n=3)
    theta = init_params(TOY, 2).flat
    eta = 0.01
    obj = DecoderObjective(TOY)
    out = train_step(obj, theta, x, y, TrainConfig(eta=eta, method=method, aug_prob=1.0),
                     streams(5, "t", indices=range(3)))
    xs = [x] if out.x_extra is None else [x, out.x_extra]

    def batch_loss(th):
        return sum(float(np.mean(obj(th, xi, y, wrt="none")[0])) for xi in xs)

    fd = ad.finite_diff_grad(batch_loss, theta, h=1e-6)
    step = (theta - out.theta) / eta
    assert np.max(np.abs(step - fd)) / np.max(np.abs(fd)) < 1e-5
    assert out.loss == pytest.approx(batch_loss(theta), rel=1e-12)


def _scalar_gap(gamma, alpha):
    theta = np.array([0.3])
    x = np.array([[1.0], [-0.5], [2.0]])
    evo = EvolutionConfig(alpha=alpha, beta=0.003, gamma=gamma, distance="wb", noise=False)
    drd = train_step(ScalarCoupled(), theta, x, np.zeros(3), TrainConfig(eta=0.1, method="drd-ld", evolution=evo))
    # step on mean 2 L(x) for L = (theta - x)^2 / 2
    ref = theta - 0.1 * 2 * np.mean(theta[0] - x[:, 0])
    return abs(drd.theta[0] - ref[0])


def test_large_penalty_recovers_the_doubled_base_update():
    # explicit Euler needs 2 alpha gamma <= 1, so alpha shrinks with the largest gamma
    gaps = [_scalar_gap(g, alpha=2.5e-7) for g in (0.0, 1e2, 1e4, 1e6)]
    assert gaps[-1] < 1e-3
    assert all(b <= a for a, b in zip(gaps, gaps[1:]))
    moderate = [_scalar_gap(g, alpha=0.01) for g in (0.0, 1.0, 10.0, 40.0)]
    assert all(b < a for a, b in zip(moderate, moderate[1:]))


def test_base_method_never_evolves(monkeypatch):
    calls = []
    real = trainer_mod.evolve_batch
    monkeypatch.setattr(trainer_mod, "evolve_batch", lambda *a, **k: calls.append(1) or real(*a, **k))
    ds = _toy_dataset()
    train(ds, TOY, TrainConfig(eta=0.01, epochs=1, batch_size=8, method="base"))
    assert calls == []
    train(ds, TOY, TrainConfig(eta=0.01, epochs=1, batch_size=8, method="drd-hmc", evolution=QUIET))
    assert len(calls) == math.ceil(len(ds) / 8)


def test_augmented_step_uses_both_terms():
    x, y = _batch(3)
    theta = init_params(TOY, 3).flat
    obj = DecoderObjective(TOY)
    out = train_step(obj, theta, x, y, TrainConfig(eta=0.0, method="bandstop", aug_prob=1.0), fs=64.0)
    assert out.x_extra.shape == x.shape and not np.allclose(out.x_extra, x)
    expected = np.mean(obj(theta, x, y, "none")[0]) + np.mean(obj(theta, out.x_extra, y, "none")[0])
    assert out.loss == pytest.approx(expected, rel=1e-12)


def test_nonfinite_loss_aborts():
    def broken(theta, x, y, wrt="both"):
        return np.full(len(x), np.nan), np.zeros_like(theta), None

    with pytest.raises(TrainingError, match="non-finite"):
        train_step(broken, np.zeros(2), np.zeros((2, 1)), np.zeros(2), TrainConfig())


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        train_step(ScalarParabola(), np.zeros(1), np.zeros((0, 1)), np.zeros(0), TrainConfig())


def test_config_validation():
    for bad in (dict(eta=-1.0), dict(epochs=0), dict(fraction=0.0), dict(fraction=1.5),
                dict(method="adam"), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert TrainConfig().eta == 1e-3 and TrainConfig().batch_size == 32
    assert TrainConfig(method="drd-hmc").evolution_for_method().dynamics == "hmc"


# -- train / split ----------------------------------------------------------

def test_training_is_deterministic():
    ds = _toy_dataset()
    tr, te = loso_split(ds, 2)
    cfg = TrainConfig(eta=0.05, epochs=2, batch_size=8, method="drd-ld", seed=4)
    p1, h1 = train(tr, TOY, cfg, te)
    p2, h2 = train(tr, TOY, cfg, te)
    assert np.array_equal(p1.flat, p2.flat)
    assert h1.train_loss == h2.train_loss and h1.holdout_acc == h2.holdout_acc
    assert len(h1) == len(h1.seconds) == 2
    p3, _ = train(tr, TOY, TrainConfig(eta=0.05, epochs=2, batch_size=8, method="drd-ld", seed=5), te)
    assert not np.array_equal(p1.flat, p3.flat)


@pytest.mark.parametrize("fraction", [1 / 8, 1 / 4, 1 / 2, 1.0])
def test_stratified_fraction_grid(fraction):
    y = np.repeat(np.arange(4), 40)
    idx = stratified_subsample(y, fraction, np.random.default_rng(0))
    assert np.all(np.bincount(y[idx], minlength=4) == round(40 * fraction))
    assert len(set(idx.tolist())) == len(idx)


def test_subsample_to_nothing_is_an_error():
    ds = _toy_dataset(per_subject=3)
    with pytest.raises(ValueError, match="no training examples"):
        train(ds, TOY, TrainConfig(fraction=0.01, epochs=1))


def test_fraction_reduces_the_work(monkeypatch):
    sizes = []
    real = trainer_mod.train_step
    monkeypatch.setattr(trainer_mod, "train_step", lambda obj, th, x, *a, **k: sizes.append(len(x)) or real(obj, th, x, *a, **k))
    train(_toy_dataset(per_subject=16), TOY, TrainConfig(eta=0.01, epochs=1, batch_size=100, fraction=0.25))
    assert sizes == [12]


def test_separable_data_is_learned():
    rng = np.random.default_rng(0)
    arch = DecoderArch(4, 32, 2, f1=4, f2=4, f3=4, temporal_kernel=5)
    n = 120
    y = np.arange(n) % 2
    direction = rng.standard_normal(4)
    x = (2 * y - 1)[:, None, None] * direction + 0.3 * rng.standard_normal((n, 32, 4))
    ds = SegmentDataset(x, y, np.arange(n) // 40, 2, 250.0)
    tr, te = loso_split(ds, 2)
    _, hist = train(tr, arch, TrainConfig(eta=0.1, epochs=20, batch_size=16, method="base"), te)
    assert max(hist.holdout_acc) >= 0.95
    assert hist.holdout_acc[-1] >= 0.95


def test_loso_nine_subjects():
    n = 9 * 5
    ds = SegmentDataset(np.zeros((n, 2, 1)), np.zeros(n, dtype=int), np.repeat(np.arange(9), 5), 1, 250.0)
    tr, te = loso_split(ds, 3)
    assert set(te.subjects.tolist()) == {3}
    assert set(tr.subjects.tolist()) == set(range(9)) - {3}
    assert len(tr) + len(te) == n


def test_loso_partition_is_exact():
    ds = _toy_dataset()
    ds = SegmentDataset(np.arange(len(ds))[:, None, None] * np.ones((1, 16, 4)), ds.y, ds.subjects, 3, 250.0)
    tr, te = loso_split(ds, 1)
    ids = np.concatenate([tr.x[:, 0, 0], te.x[:, 0, 0]])
    assert sorted(ids.tolist()) == list(range(len(ds)))


def test_loso_errors():
    ds = _toy_dataset(n_subjects=1)
    with pytest.raises(ValueError, match="at least 2"):
        loso_split(ds, 0)
    with pytest.raises(ValueError, match="unknown subject"):
        loso_split(_toy_dataset(), 7)


def test_history_csv_round_trip(tmp_path):
    ds = _toy_dataset()
    tr, te = loso_split(ds, 0)
    _, hist = train(tr, TOY, TrainConfig(eta=0.05, epochs=3, batch_size=8), te)
    write_history(hist, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,holdout_acc"
    assert len(lines) == 4
    back = read_history(tmp_path / "h.csv")
    assert back.train_loss == hist.train_loss and back.holdout_acc == hist.holdout_acc
    write_history(hist, tmp_path / "t.csv", with_seconds=True)
    assert (tmp_path / "t.csv").read_text().splitlines()[0].endswith(",seconds")
