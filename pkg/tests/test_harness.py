"""Metrics, optimizers, the training loop, and seeded sweep reports."""

import json

import numpy as np
import pytest

from physiobench import harness as hn
from physiobench.attention import AttentionKind, MsaConfig
from physiobench.backbones import ModelConfig
from physiobench.core import nn
from physiobench.core import tensor as T
from physiobench.datapipe import generate_synthetic, split_by_case

TINY_MSA = ModelConfig("msa_only", 1, AttentionKind.MSA, 0, msa=MsaConfig(16, 2, 32, 1))


# ---------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------

def test_train_spec_validation():
    with pytest.raises(ValueError):
        hn.TrainSpec(loss="mse", optimizer="adam", epochs=1)
    with pytest.raises(ValueError):
        hn.TrainSpec(loss="bce", optimizer="sgd", epochs=1)
    with pytest.raises(ValueError):
        hn.TrainSpec(loss="bce", optimizer="adam", epochs=-1)
    with pytest.raises(ValueError):
        hn.TrainSpec(loss="bce", optimizer="adam", epochs=1, batch_size=0)
    with pytest.raises(ValueError):
        hn.TrainSpec(loss="bce", optimizer="adam", epochs=1, time_mode="cpu")


def test_spec_for_config_optimizer_rule():
    inc_cls = ModelConfig("inception", 4, task="classification")
    inc_reg = ModelConfig("inception", 4, task="regression")
    res_cls = ModelConfig("resnet", 6, task="classification")
    assert hn.TrainSpec.for_config(inc_cls, 5).optimizer == "rmsprop"
    assert hn.TrainSpec.for_config(inc_reg, 5).optimizer == "adam"
    assert hn.TrainSpec.for_config(res_cls, 5).optimizer == "adam"
    assert hn.TrainSpec.for_config(inc_cls, 5).loss == "bce"
    assert hn.TrainSpec.for_config(inc_reg, 5).loss == "rmse"
    spec = hn.TrainSpec.for_config(res_cls, 7, seed=3, lr0=0.01, batch_size=32)
    assert (spec.epochs, spec.seed, spec.lr0, spec.batch_size) == (7, 3, 0.01, 32)


def test_lr_schedule_boundaries():
    spec = hn.TrainSpec(loss="bce", optimizer="adam", epochs=1)
    assert hn.lr_at(0, spec) == 1e-3
    assert hn.lr_at(19, spec) == 1e-3
    assert hn.lr_at(20, spec) == pytest.approx(1e-4)
    assert hn.lr_at(39, spec) == pytest.approx(1e-4)
    assert hn.lr_at(40, spec) == pytest.approx(1e-5)
    custom = hn.TrainSpec(loss="bce", optimizer="adam", epochs=1,
                          lr0=0.5, decay_every=2, decay_factor=0.5)
    assert hn.lr_at(3, custom) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        hn.lr_at(-1, spec)


# ---------------------------------------------------------------------
# optimizers: single steps against hand arithmetic
# ---------------------------------------------------------------------

def _param_with_grad(value, grad):
    p = nn.Parameter(np.array([value]))
    p.grad[...] = grad
    return p


def test_adam_two_steps_hand_math():
    p = _param_with_grad(1.0, 0.5)
    opt = hn.Adam([p], lr=1e-3)
    opt.step()
    # m=0.05/c1=0.1 -> 0.5; v=2.5e-4/c2=1e-3 -> 0.25
    step1 = 1e-3 * 0.5 / (np.sqrt(0.25) + 1e-8)
    assert p.data[0] == pytest.approx(1.0 - step1, rel=1e-12)
    p.grad[...] = 0.5
    opt.step()
    m2 = 0.9 * 0.05 + 0.1 * 0.5
    v2 = 0.999 * 2.5e-4 + 0.001 * 0.25
    step2 = 1e-3 * (m2 / (1 - 0.9 ** 2)) / (np.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
    assert p.data[0] == pytest.approx(1.0 - step1 - step2, rel=1e-12)


def test_rmsprop_step_hand_math():
    p = _param_with_grad(1.0, 0.5)
    opt = hn.RMSProp([p], lr=1e-3)
    opt.step()
    expected = 1.0 - 1e-3 * 0.5 / (np.sqrt(0.1 * 0.25) + 1e-7)
    assert p.data[0] == pytest.approx(expected, rel=1e-12)


def test_optimizers_skip_frozen():
    p = _param_with_grad(1.0, 0.5)
    p.freeze()
    for opt in (hn.Adam([p]), hn.RMSProp([p])):
        opt.step()
        assert p.data[0] == 1.0


def test_make_optimizer_dispatch():
    p = _param_with_grad(0.0, 0.0)
    adam = hn.make_optimizer(hn.TrainSpec("bce", "adam", 1, lr0=0.2), [p])
    rms = hn.make_optimizer(hn.TrainSpec("bce", "rmsprop", 1, lr0=0.3), [p])
    assert isinstance(adam, hn.Adam) and adam.lr == 0.2
    assert isinstance(rms, hn.RMSProp) and rms.lr == 0.3


# ---------------------------------------------------------------------
# losses and metrics
# ---------------------------------------------------------------------

def test_bce_closed_forms():
    zeros = T.Tensor(np.zeros((4, 1)))
    assert hn.bce_with_logits(zeros, np.zeros(4)).item() == pytest.approx(np.log(2.0))
    two = T.Tensor(np.full((1, 1), 2.0))
    assert hn.bce_with_logits(two, np.ones(1)).item() == pytest.approx(np.log1p(np.exp(-2.0)))
    assert hn.bce_with_logits(two, np.zeros(1)).item() == pytest.approx(
        2.0 + np.log1p(np.exp(-2.0)))


def test_rmse_closed_form():
    pred = T.Tensor(np.array([[3.0], [4.0]]))
    assert hn.rmse_loss(pred, np.zeros(2)).item() == pytest.approx(np.sqrt(12.5))


def _brute_auroc(labels, scores):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (greater + 0.5 * ties) / (pos.size * neg.size)


def test_auroc_extremes():
    labels = np.array([0, 0, 1, 1])
    assert hn.auroc(labels, [0.1, 0.2, 0.8, 0.9]) == 1.0
    assert hn.auroc(labels, [0.9, 0.8, 0.2, 0.1]) == 0.0
    assert hn.auroc(labels, [0.5, 0.5, 0.5, 0.5]) == 0.5


def test_auroc_matches_brute_force_with_ties():
    rng = np.random.default_rng(12)
    for _ in range(100):
        n = int(rng.integers(4, 200))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        # coarse integer scores force plenty of ties
        scores = rng.integers(0, 5, size=n).astype(float)
        if rng.random() < 0.5:
            scores += rng.normal(0, 0.1, size=n)
        assert hn.auroc(labels, scores) == pytest.approx(
            _brute_auroc(labels, scores), abs=1e-12)


def test_auroc_validation():
    with pytest.raises(ValueError, match="both classes"):
        hn.auroc([1, 1], [0.1, 0.2])
    with pytest.raises(ValueError, match="0/1"):
        hn.auroc([0, 2], [0.1, 0.2])
    with pytest.raises(ValueError, match="equal length"):
        hn.auroc([0, 1], [0.1])


def test_mape_closed_form_and_validation():
    assert hn.mape([100.0, 50.0], [110.0, 45.0]) == pytest.approx(10.0)
    with pytest.raises(ValueError, match="zero"):
        hn.mape([0.0, 1.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        hn.mape([1.0], [1.0, 2.0])


def test_convergence_time_first_crossing():
    hist = [(1.0, 0.5), (2.0, 0.7), (3.0, 0.9)]
    assert hn.convergence_time(hist, 0.7, "ge") == 2.0
    assert hn.convergence_time([(1.0, 30.0), (2.0, 27.0)], 27.0, "le") == 2.0
    assert hn.convergence_time(hist, 0.95, "ge") is None
    # first crossing counts even if the metric dips afterwards
    dip = [(1.0, 0.8), (2.0, 0.6), (3.0, 0.9)]
    assert hn.convergence_time(dip, 0.7, "ge") == 1.0
    assert hn.convergence_time([], 0.7, "ge") is None
    with pytest.raises(ValueError):
        hn.convergence_time(hist, 0.7, "gt")


# ---------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------

def test_prepare_standardizes_demographics(cls_bundle):
    ages = cls_bundle.demo_train[:, 0]
    assert abs(ages.mean()) < 1e-6 and ages.std() == pytest.approx(1.0, abs=1e-6)
    assert set(np.unique(cls_bundle.demo_train[:, 1])) <= {0.0, 1.0}  # sex untouched
    assert cls_bundle.demo_mean is not None and cls_bundle.demo_std is not None


def test_prepare_rejects_task_mismatch():
    cls = generate_synthetic(4, 1, "classification", seed=0)
    reg = generate_synthetic(4, 1, "regression", seed=0)
    with pytest.raises(ValueError, match="task mismatch"):
        hn.prepare(cls, reg)


def test_predict_batching_and_mode_restore(cls_bundle):
    model = hn.LinearBaseline(np.random.default_rng(0))
    model.train(True)
    small = hn.predict(model, cls_bundle.x_test, cls_bundle.demo_test, batch_size=7)
    big = hn.predict(model, cls_bundle.x_test, cls_bundle.demo_test, batch_size=512)
    assert model.training  # restored
    assert small.shape == (len(cls_bundle.x_test),)
    np.testing.assert_allclose(small, big, rtol=1e-12)


def test_linear_baseline_param_count():
    model = hn.LinearBaseline(np.random.default_rng(0))
    assert model.num_params() == 2 * 2000 + 4 + 1


# ---------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------

def _linear_spec(**kw):
    kw.setdefault("loss", "bce")
    kw.setdefault("optimizer", "adam")
    kw.setdefault("epochs", 3)
    kw.setdefault("time_mode", "virtual")
    return hn.TrainSpec(**kw)


def test_train_rejects_loss_task_mismatch(cls_bundle):
    model = hn.LinearBaseline(np.random.default_rng(0))
    with pytest.raises(ValueError, match="does not fit"):
        hn.train(model, cls_bundle, _linear_spec(loss="rmse"))


def test_train_is_bitwise_deterministic(cls_bundle):
    runs = []
    for _ in range(2):
        model = hn.LinearBaseline(np.random.default_rng(42))
        runs.append(hn.train(model, cls_bundle, _linear_spec(seed=11)))
    a, b = runs
    assert a.losses == b.losses
    assert a.metrics == b.metrics
    assert a.epoch_seconds == b.epoch_seconds == [1.0, 2.0, 3.0]


def test_train_reduces_loss(cls_bundle, reg_bundle):
    cls_model = hn.LinearBaseline(np.random.default_rng(1))
    res = hn.train(cls_model, cls_bundle, _linear_spec(epochs=4, lr0=1e-2))
    assert res.losses[-1] < res.losses[0]
    assert res.metric_name == "auroc"
    assert res.test_prevalence == pytest.approx(float(cls_bundle.y_test.mean()))
    reg_model = hn.LinearBaseline(np.random.default_rng(1))
    res = hn.train(reg_model, reg_bundle, _linear_spec(loss="rmse", epochs=4, lr0=1e-2))
    assert res.losses[-1] < res.losses[0]
    assert res.metric_name == "mape"
    assert res.test_prevalence is None


def test_train_zero_epochs_evaluates_only(cls_bundle):
    model = hn.LinearBaseline(np.random.default_rng(0))
    res = hn.train(model, cls_bundle, _linear_spec(epochs=0))
    assert res.epochs_run == 0 and res.losses == [] and res.metrics == []
    assert 0.0 <= res.final_metric <= 1.0
    assert res.convergence_s is None and not res.aborted


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
def test_train_aborts_on_nonfinite_loss(cls_bundle):
    model = hn.LinearBaseline(np.random.default_rng(0))
    model.dense.weight.data[...] = 1e308  # forces an overflow on batch one
    res = hn.train(model, cls_bundle, _linear_spec())
    assert res.aborted and "non-finite loss at epoch 1" in res.abort_reason
    assert res.epochs_run == 0 and res.losses == []


def test_train_stop_threshold_classification(cls_bundle):
    model = hn.LinearBaseline(np.random.default_rng(3))
    res = hn.train(model, cls_bundle, _linear_spec(epochs=30, lr0=1e-2),
                   stop_threshold=0.8)
    assert res.epochs_run < 30
    assert res.final_metric >= 0.8
    assert res.metrics[-1] >= 0.8 and all(m < 0.8 for m in res.metrics[:-1])


def test_train_records_convergence_clock(cls_bundle):
    model = hn.LinearBaseline(np.random.default_rng(3))
    res = hn.train(model, cls_bundle, _linear_spec(epochs=30, lr0=1e-2),
                   stop_threshold=0.9)
    crossing = next(i for i, m in enumerate(res.metrics) if m >= hn.CONVERGE_AUROC)
    assert res.convergence_s == res.epoch_seconds[crossing]


def test_train_wall_clock_is_monotone(cls_bundle):
    model = hn.LinearBaseline(np.random.default_rng(0))
    res = hn.train(model, cls_bundle, _linear_spec(epochs=2, time_mode="wall"))
    assert res.epoch_seconds[0] > 0
    assert res.epoch_seconds[1] > res.epoch_seconds[0]
    assert res.wall_seconds >= res.epoch_seconds[-1]


# ---------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------

def test_paper13_matrix_layout():
    configs = hn.paper13_matrix()
    assert len(configs) == 22
    identities = {(c.family, c.attention) for c in configs}
    assert len(identities) == 13
    fractions = {(c.family, c.attention.value, c.fraction) for c in configs}
    assert ("resnet", "se", 50) in fractions and ("resnet", "se", 100) in fractions
    msa = [c for c in configs if c.family == "msa_only"]
    assert len(msa) == 1 and msa[0].msa == MsaConfig(32, 4, 128, 2)
    reg = hn.paper13_matrix(task="regression", levels={"resnet": 2})
    assert all(c.task == "regression" for c in reg)
    assert {c.level for c in reg if c.family == "resnet"} == {2}


def test_msa_grid_entries_carry_invalid_cells():
    entries = hn.msa_grid_entries()
    assert len(entries) == 108
    invalid = [e for e in entries if e.error is not None]
    assert len(invalid) == 27
    assert all("h=6" in e.label for e in invalid)
    assert all(e.config is None for e in invalid)
    assert all(e.config is not None for e in entries if e.error is None)


@pytest.fixture(scope="module")
def tiny_sweep_report(cls_bundle):
    return hn.run_sweep([TINY_MSA], cls_bundle, epochs=2, seeds=[0, 1],
                        batch_size=64)


def test_sweep_csv_is_reproducible(cls_bundle, tiny_sweep_report):
    again = hn.run_sweep([TINY_MSA], cls_bundle, epochs=2, seeds=[0, 1],
                         batch_size=64)
    assert hn.report_to_csv(again) == hn.report_to_csv(tiny_sweep_report)


def test_sweep_csv_shape(tiny_sweep_report):
    text = hn.report_to_csv(tiny_sweep_report)
    lines = text.splitlines()
    assert lines[0] == hn.CSV_HEADER
    fields = lines[1].split(",")
    assert fields[0] == "msa_only" and fields[1] == "msa"
    assert fields[4] == "2"                      # seed_count
    float(fields[5])                             # metric_mean parses
    assert len(fields[5].split(".")[1]) == 6     # %.6f
    assert fields[8] == "0"                      # no aborts


def test_sweep_identical_seeds_have_zero_std(cls_bundle):
    report = hn.run_sweep([TINY_MSA], cls_bundle, epochs=1, seeds=[7, 7],
                          batch_size=64)
    assert report.rows[0].metric_std == 0.0


def test_sweep_single_seed_std_is_zero(cls_bundle):
    report = hn.run_sweep([TINY_MSA], cls_bundle, epochs=1, seeds=[3],
                          batch_size=64)
    row = report.rows[0]
    assert row.seed_count == 1 and row.metric_std == 0.0


def test_sweep_invalid_entry_becomes_aborted_row(cls_bundle):
    bad = next(e for e in hn.msa_grid_entries() if e.error is not None)
    report = hn.run_sweep([bad], cls_bundle, epochs=1, seeds=[0, 1], batch_size=64)
    row = report.rows[0]
    assert row.aborted == 2 and row.metric_mean is None
    line = hn.report_to_csv(report).splitlines()[1]
    assert line.endswith(",,,,2")  # empty metric cells, aborted count
    jsonl = hn.report_to_jsonl(report).splitlines()
    assert len(jsonl) == 1 and "error" in json.loads(jsonl[0])


def test_sweep_jsonl_carries_histories(tiny_sweep_report):
    lines = hn.report_to_jsonl(tiny_sweep_report).splitlines()
    assert len(lines) == 2  # one per seed
    for line in lines:
        rec = json.loads(line)
        assert rec["epochs_run"] == 2
        assert rec["epoch_seconds"] == [1.0, 2.0]  # virtual clock
        assert rec["wall_seconds"] > 0
        assert rec["metric_name"] == "auroc"


def test_sweep_accepts_raw_configs_and_workers(cls_bundle, tiny_sweep_report):
    forked = hn.run_sweep([TINY_MSA], cls_bundle, epochs=2, seeds=[0, 1],
                          batch_size=64, workers=2)
    assert hn.report_to_csv(forked) == hn.report_to_csv(tiny_sweep_report)
