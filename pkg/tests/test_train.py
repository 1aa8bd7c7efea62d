import math

import numpy as np
import pytest

from dmm import ndcore as nd
from dmm.codebook import ConfigurationError, ema_update
from dmm.losses import LossWeights
from dmm.networks import Dims, snapshot
from dmm.synthdata import gen_shapes
from dmm.train import (DESK_SCHEDULE, PAPER_SCHEDULE, Adam, TrainConfig, TrainingDiverged,
                       forward_losses, init_state, lr_at, paper_preset, read_telemetry,
                       steps_per_epoch, train, train_step)
from conftest import TINY, tiny_batch, tiny_model
from oracles import REL_TOL, central_difference, reference_loss, rel_error

SMALL = Dims(H=16, W=16, L=8, m=8, N=8, encoder_hidden=(24, 16), generator_hidden=(16, 24))


def small_config(**kw):
    base = dict(epochs=3, warmup_epochs=1, batch_size=8, dims=SMALL, seed=5,
                lr_schedule=((0, 1e-3), (2, 5e-4)))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small_data():
    return gen_shapes(24, 16, seed=1)


# ---------------------------------------------------------------- schedule and config


def test_lr_at_paper_examples():
    assert lr_at(PAPER_SCHEDULE, 0) == 1e-4
    assert lr_at(PAPER_SCHEDULE, 299) == 1e-4
    assert lr_at(PAPER_SCHEDULE, 300) == 5e-5
    assert lr_at(PAPER_SCHEDULE, 899) == 5e-5
    assert lr_at(PAPER_SCHEDULE, 1200) == 5e-6
    assert lr_at(DESK_SCHEDULE, 10_000) == 1e-4
    with pytest.raises(ConfigurationError):
        lr_at([], 0)
    with pytest.raises(ValueError):
        lr_at(PAPER_SCHEDULE, -1)


@pytest.mark.parametrize("sched", [((1, 1e-3),), ((0, 1e-3), (5, 1e-4), (5, 1e-5)), ()])
def test_schedule_validation(sched):
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_schedule=sched).validate()


def test_config_validation_and_round_trip():
    with pytest.raises(ConfigurationError):
        TrainConfig(warmup_epochs=-1).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(dims=Dims(m=8, N=16)).validate()
    cfg = paper_preset()
    assert cfg.dims.N == cfg.dims.m == 256 and cfg.lr_schedule == PAPER_SCHEDULE
    assert (cfg.batch_size, cfg.warmup_epochs) == (32, 20)
    assert (cfg.weights.beta, cfg.weights.gamma) == (0.25, 0.01)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_epoch_length_counts_pairs(small_data):
    # 24 entries x 4 labels / batch 8
    assert steps_per_epoch(small_data, 8) == 12
    assert steps_per_epoch(small_data, 7) == math.ceil(96 / 7)


# ---------------------------------------------------------------- composed gradient oracle


def composed_probe_check(model, x, y, weights, warmup, n_probes, seed, log_recon=False):
    """Tape gradient of the full objective against central differences of the
    plain-numpy surrogate; returns the worst relative error."""
    cb = model.codebook
    for t in model.trainable().values():
        t.grad = None
    with nd.Tape() as tape:
        total, _, idx, z, code = forward_losses(x, y, model, weights, warmup, log_recon)
    nd.backward(tape, total)
    assert model.etf.M.grad is None
    frozen = (idx, code.data.copy(), z.data.copy())
    P = {k: v.data for k, v in model.params.items()}
    codes = cb.codes.data
    w = (weights.alpha, weights.beta, weights.gamma)

    def value():
        return reference_loss(P, codes, model.etf.M.data, x, y, model.dims, w, cb.tau,
                              frozen=frozen, warmup=warmup, log_recon=log_recon)[0]

    ref_total, ref_idx, _ = reference_loss(P, codes, model.etf.M.data, x, y, model.dims, w,
                                           cb.tau, warmup=warmup, log_recon=log_recon)
    assert np.array_equal(ref_idx, idx)
    assert total.item() == pytest.approx(ref_total, rel=1e-10)

    targets = [(k, t) for k, t in model.trainable().items()]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_probes):
        name, t = targets[i % len(targets)]
        idx_ = tuple(int(rng.integers(s)) for s in t.data.shape)
        num = central_difference(value, t.data, idx_)
        ana = 0.0 if t.grad is None else t.grad[idx_]
        worst = max(worst, rel_error(ana, num))
    return worst


@pytest.mark.parametrize("log_recon", [False, True])
def test_composed_loss_matches_surrogate_finite_differences(log_recon):
    model = tiny_model(seed=2)
    # push two codes together so the covariance term is live
    c = model.codebook.codes.data
    c[:, 1] = 0.8 * c[:, 0] + 0.2 * c[:, 1]
    x, y = tiny_batch(5, batch=4)
    worst = composed_probe_check(model, x, y, LossWeights(), warmup=False, n_probes=120, seed=0,
                                  log_recon=log_recon)
    assert worst < REL_TOL


# ---------------------------------------------------------------- routing contract


def step_once(model, x, y, weights, lr=1e-2, fixed_codebook=False):
    opt = Adam(model.trainable(fixed_codebook=fixed_codebook))
    return opt, train_step(x, y, model, weights, opt, lr, warmup=False,
                           fixed_codebook=fixed_codebook)


def test_zero_learning_rate_is_noop_apart_from_ema():
    model = tiny_model()
    x, y = tiny_batch()
    before = snapshot(model)
    opt = Adam(model.trainable(fixed_codebook=True))
    for _ in range(2):
        train_step(x, y, model, LossWeights(), opt, 0.0, False, fixed_codebook=True)
    after = snapshot(model)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_gamma_zero_codebook_changes_only_by_ema():
    model = tiny_model()
    x, y = tiny_batch(1)
    weights = LossWeights(gamma=0.0)
    with nd.Tape() as tape:
        total, _, idx, z, _ = forward_losses(x, y, model, weights, False)
    nd.backward(tape, total)
    assert model.codebook.codes.grad is None
    # the same EMA update applied to an identical untouched model
    probe = tiny_model()
    ema_update(probe.codebook, idx, z.data)
    step_once(model, x, y, weights)
    assert np.allclose(model.codebook.codes.data, probe.codebook.codes.data, atol=1e-12)


def test_beta_zero_pair_encoder_sees_only_copied_gradient():
    model = tiny_model(seed=4)
    x, y = tiny_batch(2)
    with nd.Tape() as tape:
        total, _, _, z, code = forward_losses(x, y, model, LossWeights(beta=0.0), False)
    nd.backward(tape, total)
    assert np.array_equal(z.grad, code.grad)


def test_etf_never_receives_gradient():
    model = tiny_model()
    x, y = tiny_batch()
    step_once(model, x, y, LossWeights())
    assert model.etf.M.grad is None
    assert "etf" not in model.trainable()


def test_batch_gradient_is_mean_of_sample_gradients():
    x, y = tiny_batch(6, batch=3)
    weights = LossWeights()

    def grads(xs, ys):
        model = tiny_model(seed=1)
        with nd.Tape() as tape:
            total, *_ = forward_losses(xs, ys, model, weights, False)
        nd.backward(tape, total)
        return {k: v.grad for k, v in model.params.items()}

    full = grads(x, y)
    per = [grads(x[i:i + 1], y[i:i + 1]) for i in range(3)]
    for k in full:
        avg = sum(p[k] for p in per) / 3
        assert np.allclose(full[k], avg, atol=1e-5), k


def test_nan_loss_aborts_with_state():
    model = tiny_model()
    model.params["generator.out.b"].data[:] = np.nan
    x, y = tiny_batch()
    with pytest.raises(TrainingDiverged) as err:
        step_once(model, x, y, LossWeights())
    assert "adam_step" in err.value.state


# ---------------------------------------------------------------- loop


def test_training_is_deterministic(small_data, tmp_path):
    a = train(small_config(), small_data, telemetry_path=tmp_path / "a.csv")
    b = train(small_config(), small_data, telemetry_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert len(read_telemetry(tmp_path / "a.csv")) == 3
    assert np.array_equal(a.model.codebook.codes.data, b.model.codebook.codes.data)


def test_warmup_records_but_ignores_ce(small_data):
    state = train(small_config(log_recon=False), small_data)
    first, later = state.telemetry[0], state.telemetry[1]
    for row in (first, later):
        assert all(math.isfinite(getattr(row, c)) for c in ("total", "recon", "ce", "zreg", "cov"))
    assert first.ce > 0
    w = small_config().weights
    # per-step totals average linearly; warmup omits exactly the CE mean
    assert first.total == pytest.approx(first.recon + w.beta * first.zreg + w.gamma * first.cov,
                                        rel=1e-5)
    assert later.total == pytest.approx(later.recon + w.alpha * later.ce + w.beta * later.zreg
                                        + w.gamma * later.cov, rel=1e-5)
    assert [r.learning_rate for r in state.telemetry] == [1e-3, 1e-3, 5e-4]


def test_log_recon_epoch_total_obeys_jensen(small_data):
    # the mean of per-step log(recon) never exceeds log of the mean recon
    state = train(small_config(epochs=2), small_data)
    w = small_config().weights
    for row, alpha in zip(state.telemetry, (0.0, w.alpha)):
        rest = alpha * row.ce + w.beta * row.zreg + w.gamma * row.cov
        assert row.total <= math.log(row.recon) + rest + 1e-9


def test_fixed_codebook_stays_at_init(small_data):
    cfg = small_config(fixed_codebook=True, epochs=2)
    init = init_state(cfg).model.codebook.codes.data.copy()
    state = train(cfg, small_data)
    assert np.array_equal(state.model.codebook.codes.data, init)


def test_learnable_classifier_receives_gradient():
    model = tiny_model(learnable_classifier=True)
    x, y = tiny_batch()
    before = model.params["classifier"].data.copy()
    with nd.Tape() as tape:
        total, *_ = forward_losses(x, y, model, LossWeights(), False)
    nd.backward(tape, total)
    assert np.abs(model.params["classifier"].grad).max() > 0
    step_once(model, x, y, LossWeights())
    assert not np.array_equal(model.params["classifier"].data, before)


def test_checkpoint_callback_cadence(small_data):
    seen = []
    train(small_config(epochs=5, checkpoint_every=2), small_data,
          checkpoint_fn=lambda s: seen.append(s.epoch))
    assert seen == [2, 4, 5]


def test_empty_or_mismatched_dataset(small_data):
    with pytest.raises(ValueError):
        train(small_config(), small_data.subset([]))
    with pytest.raises(ConfigurationError):
        train(small_config(dims=TINY), small_data)
