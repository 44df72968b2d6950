import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch import nn

from tpnet.errors import ConfigError, DivergenceError, NumericError
from tpnet.trainer import (TrainConfig, evaluate, gradcheck, gradcheck_detail, gradcheck_report,
                           lr_at_epoch, make_optimizer, train)

import oracles
from helpers import segments, tiny_data, tiny_model, tiny_tpn


@pytest.mark.parametrize("epoch,factor", [(0, 1), (99, 1), (100, 0.1), (124, 0.1), (125, 0.01),
                                          (149, 0.01)])
def test_lr_schedule(epoch, factor):
    cfg = TrainConfig(lr=0.1, epochs=150, milestones=(100, 125))
    assert lr_at_epoch(cfg, epoch) == pytest.approx(0.1 * factor, rel=1e-12)
    assert lr_at_epoch(cfg, epoch) == pytest.approx(oracles.step_lr(0.1, [100, 125], epoch))


def _scalar_model(w0):
    m = nn.Linear(1, 1, bias=False).double()
    with torch.no_grad():
        m.weight.fill_(w0)
    return m


def _step(opt, m, g):
    opt.zero_grad()
    (m.weight.sum() * g).backward()
    opt.step()
    return m.weight.item()


def test_plain_sgd_step():
    m = _scalar_model(1.5)
    opt = make_optimizer(m, TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.0))
    assert _step(opt, m, 2.0) == 1.5 - 0.1 * 2.0


def test_momentum_recurrence():
    m = _scalar_model(1.0)
    opt = make_optimizer(m, TrainConfig(lr=0.1, momentum=0.9, weight_decay=0.0))
    w, v = 1.0, 0.0
    for g in (2.0, -1.0, 0.5):
        v = 0.9 * v + g
        w = w - 0.1 * v
        assert _step(opt, m, g) == pytest.approx(w, abs=1e-7)


def test_weight_decay_before_momentum():
    m = _scalar_model(2.0)
    opt = make_optimizer(m, TrainConfig(lr=0.1, momentum=0.9, weight_decay=0.01))
    w, v = 2.0, 0.0
    for g in (1.0, 1.0):
        v = 0.9 * v + (g + 0.01 * w)
        w = w - 0.1 * v
        assert _step(opt, m, g) == pytest.approx(w, abs=1e-7)


def test_train_config_validation():
    with pytest.raises(ConfigError, match="milestones"):
        TrainConfig(epochs=10, milestones=(5, 3)).validate()
    with pytest.raises(ConfigError, match="milestones"):
        TrainConfig(epochs=10, milestones=(10,)).validate()
    with pytest.raises(ConfigError, match="lr"):
        TrainConfig(lr=0).validate()


def _cfg(**kw):
    base = dict(lr=0.05, epochs=2, milestones=(1,), batch_size=4, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_epochs_keeps_initialization():
    data, _ = tiny_data()
    model = tiny_model()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    _, history = train(model, data, _cfg(epochs=0, milestones=()), segments())
    assert history == []
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
    assert not model.trained


def test_history_and_determinism():
    data, val = tiny_data()
    runs = []
    for _ in range(2):
        model = tiny_model(tiny_tpn())
        _, hist = train(model, data, _cfg(), segments(), val)
        runs.append((hist, model.state_dict()))
    (h1, s1), (h2, s2) = runs
    assert h1 == h2
    assert [r["epoch"] for r in h1] == [0, 1]
    assert [r["lr"] for r in h1] == [0.05, 0.005]
    assert all(set(r) == {"epoch", "lr", "train_loss", "val_top1"} for r in h1)
    assert all(torch.equal(s1[k], s2[k]) for k in s1)


def test_zero_lambda_matches_aux_free_training():
    data, val = tiny_data()
    with_aux = tiny_model(tiny_tpn(lambdas=(0.0,)))
    without = tiny_model(tiny_tpn(lambdas=(0.0,), aux_head=False))
    _, h1 = train(with_aux, data, _cfg(), segments(), val)
    _, h2 = train(without, data, _cfg(), segments(), val)
    assert h1 == h2
    s1, s2 = with_aux.state_dict(), without.state_dict()
    assert set(s2) < set(s1)
    assert all(torch.equal(s1[k], s2[k]) for k in s2)


def test_divergence_reports_epoch_and_lr(monkeypatch):
    data, _ = tiny_data()
    model = tiny_model()
    monkeypatch.setattr(model, "loss", lambda out, labels: out[0].sum() * float("nan"))
    with pytest.raises(DivergenceError, match=r"epoch 0 \(lr=0.05\)"):
        train(model, data, _cfg(), segments())


def test_class_count_mismatch():
    data, _ = tiny_data(num_classes=3)
    with pytest.raises(ConfigError):
        train(tiny_model(num_classes=4), data, _cfg(), segments())


def test_evaluate_examples():
    data, _ = tiny_data(num_classes=2, per_class=3)
    rep = evaluate(tiny_model(num_classes=2), data, segments())
    assert rep.top5 == 1.0 and rep.num_samples == 6
    assert 0 <= rep.top1 <= rep.top5
    assert set(rep.per_class_top1) == {0, 1}

    dup = data.subset([0, 0, 1])
    rep = evaluate(tiny_model(num_classes=2), dup, segments())
    assert np.array_equal(rep.probs[0], rep.probs[1])
    assert np.allclose(rep.probs.sum(1), 1, atol=1e-6)
    with pytest.raises(ValueError):
        evaluate(tiny_model(), data.subset([]), segments())


def test_untrained_model_is_at_chance():
    data, _ = tiny_data(num_classes=4, per_class=50, val=0)
    rep = evaluate(tiny_model(num_classes=4, seed=11), data, segments())
    assert rep.num_samples == 200
    assert abs(rep.top1 - 0.25) <= 0.1


def test_ten_crop_evaluation_averages_views():
    data, _ = tiny_data(num_classes=2, per_class=1, val=0)
    model = tiny_model(num_classes=2)
    one = evaluate(model, data, segments(), "ten_crop", crop_size=32)
    assert one.num_samples == 2 and one.top5 == 1.0


def test_gradcheck_quadratic_is_exact():
    torch.manual_seed(0)
    model = nn.Linear(3, 2)
    x = torch.randn(5, 3)
    loss = lambda m, b: (m(b[0]) ** 2).sum()                       # noqa: E731
    assert gradcheck(model, (x,), loss_fn=loss) < 1e-8


def test_gradcheck_independent_parameter():
    model = nn.Sequential(nn.Linear(2, 2), nn.Linear(2, 2))
    loss = lambda m, b: (m[0](b[0]) ** 2).sum()                    # noqa: E731
    errs = gradcheck_detail(model, (torch.randn(3, 2),), loss_fn=loss)
    assert errs["1.weight"] == 0.0 and errs["1.bias"] == 0.0


def test_gradcheck_nonfinite_names_parameter():
    model = nn.Linear(2, 1)
    loss = lambda m, b: torch.sqrt(m.bias - m.bias.detach()).sum()  # noqa: E731
    with pytest.raises(NumericError, match="bias"):
        gradcheck(model, (None,), loss_fn=loss)


def test_gradcheck_subsample_and_rng_isolation():
    model = tiny_model(tiny_tpn(), activation="silu")
    x = torch.randn(2, 4, 3, 32, 32)
    y = torch.tensor([0, 1])
    state = torch.get_rng_state()
    err = gradcheck(model, (x, y), max_coords=60)
    assert torch.equal(state, torch.get_rng_state())
    # max-pool ties can cost a little accuracy here; the strict check lives in acceptance
    assert err < 1e-3
    assert len(gradcheck_detail(model, (x, y), max_coords=5)) <= 5


def _kinked(op):
    model = nn.Linear(2, 1, bias=False)
    with torch.no_grad():
        model.weight.copy_(torch.tensor([[0.0005, 0.0]]))
    return model, (lambda m, b: op(m.weight)), (None,)


KINKS = {
    "relu": lambda w: F.relu(w[0, 0]),
    "max_pool": lambda w: F.max_pool1d(w.view(1, 1, 2), 2).sum(),
    "amax": lambda w: w.amax(dim=1).sum(),
}


@pytest.mark.parametrize("kind", sorted(KINKS))
def test_gradcheck_skips_kink_crossings(kind):
    model, loss, batch = _kinked(KINKS[kind])
    # +-1e-3 around 5e-4 crosses the kink at 0: central differences give 0.75, autograd 1
    naive = gradcheck_report(model, batch, loss_fn=loss, skip_kinks=False)
    assert naive.skipped == 0 and naive.max_error > 0.1
    aware = gradcheck_report(model, batch, loss_fn=loss)
    assert aware.skipped >= 1 and aware.checked + aware.skipped == 2
    assert aware.max_error < 1e-8


def test_gradcheck_keeps_coordinates_away_from_kinks():
    model, loss, batch = _kinked(KINKS["relu"])
    with torch.no_grad():
        model.weight.fill_(0.5)
    report = gradcheck_report(model, batch, loss_fn=loss)
    assert report.skipped == 0 and report.checked == 2 and report.max_error < 1e-8
