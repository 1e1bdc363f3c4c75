import numpy as np
import pytest

from moskit import (
    GradientAccumulator,
    ModelConfig,
    OptimizerState,
    SequenceData,
    TrainRunConfig,
    backward,
    cyclical_lr,
    finetune,
    forward,
    init_params,
    loss_regression,
    sgd_momentum_step,
    train_classification,
    train_regression,
)
from moskit.batching import pad_and_mask
from moskit.errors import InvalidInputError
from moskit.model import parameter_names
from moskit.training import CyclicalLr, classification_phases, history_to_csv
from conftest import grid_targets, synthetic_sequences


class TestCyclicalLr:
    @pytest.mark.parametrize("iteration, expected", [
        (0, 0.0005), (50, 0.00275), (100, 0.005), (150, 0.00275), (200, 0.0005),
    ])
    def test_paper_constants(self, iteration, expected):
        assert cyclical_lr(iteration) == pytest.approx(expected, rel=1e-12)

    def test_periodic_and_bounded(self):
        values = np.array([cyclical_lr(i) for i in range(1000)])
        assert values.min() == pytest.approx(0.0005)
        assert values.max() == pytest.approx(0.005)
        assert np.allclose(values[:200], values[200:400])

    def test_dataclass_callable(self):
        sched = CyclicalLr()
        assert sched(100) == pytest.approx(0.005)
        with pytest.raises(InvalidInputError):
            CyclicalLr(cycle_len=7)


class TestSgdMomentum:
    def _setup(self, seed=0):
        cfg = ModelConfig(input_dim=4, lstm_hidden=3, lstm_layers=1, dense_hidden=3)
        params = init_params(cfg, seed)
        grads = {k: np.ones_like(v) for k, v in params.tensors.items()}
        return params, grads

    def test_zero_lr_no_change(self):
        params, grads = self._setup()
        before = {k: v.copy() for k, v in params.tensors.items()}
        state = OptimizerState.fresh(params)
        sgd_momentum_step(params, grads, state, lr=0.0)
        assert all(np.array_equal(params.tensors[k], before[k]) for k in before)

    def test_zero_momentum_is_plain_sgd(self):
        params, grads = self._setup()
        before = {k: v.copy() for k, v in params.tensors.items()}
        state = OptimizerState.fresh(params, momentum=0.0)
        sgd_momentum_step(params, grads, state, lr=0.1)
        for k in before:
            assert np.allclose(params.tensors[k], before[k] - 0.1 * grads[k])

    def test_momentum_accumulates(self):
        params, grads = self._setup()
        before = {k: v.copy() for k, v in params.tensors.items()}
        state = OptimizerState.fresh(params, momentum=0.5)
        sgd_momentum_step(params, grads, state, lr=0.1)
        sgd_momentum_step(params, grads, state, lr=0.1)
        # v1 = g, v2 = 1.5 g -> total displacement 2.5 lr g
        for k in before:
            assert np.allclose(params.tensors[k], before[k] - 0.25 * grads[k])

    def test_unknown_frozen_layer_rejected(self):
        params, grads = self._setup()
        state = OptimizerState.fresh(params)
        with pytest.raises(InvalidInputError, match="unknown layers"):
            sgd_momentum_step(params, grads, state, lr=0.1, frozen={"projektion"})

    def test_frozen_layer_untouched(self):
        params, grads = self._setup()
        before = params.tensors["proj_W"].copy()
        state = OptimizerState.fresh(params)
        for _ in range(100):
            sgd_momentum_step(params, grads, state, lr=0.01, frozen={"projection"})
        assert np.array_equal(params.tensors["proj_W"], before)
        assert (state.buffers["proj_W"] == 0).all()
        assert not np.array_equal(params.tensors["dense_W"],
                                  init_params(params.config, 0).tensors["dense_W"])


class TestAccumulation:
    def test_matches_large_batch(self):
        cfg = ModelConfig(input_dim=4, lstm_hidden=5, lstm_layers=2, dense_hidden=5,
                          dropout_enabled=False)
        params = init_params(cfg, 0)
        rng = np.random.default_rng(1)
        seqs = [rng.normal(size=(6, 4)) for _ in range(40)]
        targets = rng.uniform(1, 5, size=40)

        acc = GradientAccumulator(steps=5)
        effective = None
        for k in range(0, 40, 8):
            x, valid = pad_and_mask(seqs[k : k + 8])
            preds, trace = forward(params, x, valid, mode="train", rng=rng)
            _, lgrad = loss_regression(preds, targets[k : k + 8])
            out = acc.add(backward(trace, lgrad), 8)
            if out is not None:
                effective = out
        assert effective is not None

        x, valid = pad_and_mask(seqs)
        preds, trace = forward(params, x, valid, mode="train", rng=rng)
        _, lgrad = loss_regression(preds, targets)
        whole = backward(trace, lgrad)
        for name in whole:
            denom = max(np.abs(whole[name]).max(), 1e-30)
            assert np.abs(effective[name] - whole[name]).max() / denom < 1e-10

    def test_single_step_passthrough(self):
        acc = GradientAccumulator(steps=1)
        g = {"w": np.array([2.0, 4.0])}
        out = acc.add(g, 2)
        assert np.array_equal(out["w"], g["w"])

    def test_window_resets(self):
        acc = GradientAccumulator(steps=2)
        assert acc.add({"w": np.array([1.0])}, 1) is None
        first = acc.add({"w": np.array([3.0])}, 1)
        assert first["w"][0] == 2.0
        assert acc.add({"w": np.array([5.0])}, 1) is None
        second = acc.add({"w": np.array([7.0])}, 1)
        assert second["w"][0] == 6.0

    def test_weighted_by_sample_count(self):
        acc = GradientAccumulator(steps=2)
        acc.add({"w": np.array([1.0])}, 3)
        out = acc.add({"w": np.array([5.0])}, 1)
        assert out["w"][0] == pytest.approx(2.0)  # (3*1 + 1*5) / 4


def quick_cfg(**kw):
    defaults = dict(micro_batch=4, accumulation_steps=2, seed=0, max_epochs=3,
                    patience=1, max_restarts=0, eval_batch=8)
    defaults.update(kw)
    return TrainRunConfig(**defaults)


def tiny_model_cfg(dim=6, head="regression", dropout=False):
    return ModelConfig(input_dim=dim, projection_dim=dim, lstm_hidden=8, lstm_layers=2,
                       dense_hidden=8, head=head,
                       dropout_enabled=dropout if head == "regression" else False)


class TestTrainRegression:
    def test_runs_and_logs(self):
        data, _, _ = synthetic_sequences(16, 6, 4, 9, seed=3)
        val, _, _ = synthetic_sequences(8, 6, 4, 9, seed=4)
        result = train_regression(data, val, tiny_model_cfg(), quick_cfg())
        assert result.history
        assert result.history[0].phase == "reg"
        assert np.isfinite(result.best_val_loss)
        csv_text = history_to_csv(result.history)
        assert csv_text.splitlines()[0] == "iteration,lr,train_loss,val_loss,phase,batch_size"

    def test_deterministic(self):
        data, _, _ = synthetic_sequences(16, 6, 4, 9, seed=3)
        val, _, _ = synthetic_sequences(8, 6, 4, 9, seed=4)
        a = train_regression(data, val, tiny_model_cfg(), quick_cfg())
        b = train_regression(data, val, tiny_model_cfg(), quick_cfg())
        assert history_to_csv(a.history) == history_to_csv(b.history)
        for name in parameter_names(a.params.config):
            assert np.array_equal(a.params.tensors[name], b.params.tensors[name])

    def test_patience_zero_stops_at_first_stale_eval(self):
        data, _, _ = synthetic_sequences(16, 6, 4, 9, seed=3)
        val = SequenceData(ids=data.ids, features=data.features,
                           targets={i: 3.0 for i in data.ids})
        cfg = quick_cfg(patience=0, max_epochs=50, seed=5)
        result = train_regression(data, val, tiny_model_cfg(), cfg)
        improving = 0
        best = np.inf
        for row in result.history:
            if row.val_loss < best:
                best = row.val_loss
                improving += 1
        # the run must have ended right after its first non-improving epoch
        assert len(result.history) == improving + 1 or len(result.history) == 50

    def test_restart_triggers_when_range_not_covered(self):
        data, _, _ = synthetic_sequences(16, 6, 4, 9, seed=3)
        # all targets near 3: trained model cannot cover [1.5, 4.5]
        narrow = SequenceData(ids=data.ids, features=data.features,
                              targets={i: 3.0 for i in data.ids})
        cfg = quick_cfg(max_restarts=2, max_epochs=2, patience=0)
        result = train_regression(narrow, narrow, tiny_model_cfg(), cfg)
        assert result.restarts == 2
        phases = {row.phase for row in result.history}
        assert {"reg", "reg_restart1", "reg_restart2"} <= phases

    def test_divergence_returns_last_good_checkpoint(self):
        data, _, _ = synthetic_sequences(12, 6, 4, 9, seed=3)
        # squared error keeps amplifying the updates until activations
        # overflow; the loop must hand back the last finite snapshot
        cfg = quick_cfg(schedule="constant", constant_lr=1e6, max_epochs=40,
                        patience=30, accumulation_steps=1, loss="mse")
        with np.errstate(invalid="ignore", over="ignore"):
            result = train_regression(data, data, tiny_model_cfg(), cfg)
        assert result.diverged
        for tensor in result.params.tensors.values():
            assert np.isfinite(tensor).all()

    def test_wrong_head_rejected(self):
        data, _, _ = synthetic_sequences(4, 6, 4, 6, seed=0)
        with pytest.raises(InvalidInputError):
            train_regression(data, data, tiny_model_cfg(head="classification"), quick_cfg())

    def test_adaptive_optimizers_are_a_stub(self):
        data, _, _ = synthetic_sequences(4, 6, 4, 6, seed=0)
        with pytest.raises(InvalidInputError, match="optimizer"):
            train_regression(data, data, tiny_model_cfg(), quick_cfg(optimizer="adam"))

    def test_plain_sgd_variant_runs(self):
        data, _, _ = synthetic_sequences(8, 6, 4, 6, seed=0)
        result = train_regression(data, data, tiny_model_cfg(),
                                  quick_cfg(optimizer="sgd", max_epochs=1))
        assert result.history


class TestTrainClassification:
    def _data(self):
        data, _, _ = synthetic_sequences(20, 6, 4, 9, seed=8)
        return grid_targets(data)

    def test_three_phases_logged_with_paper_settings(self):
        data = self._data()
        reg = init_params(tiny_model_cfg(), 1)
        cfg = quick_cfg(max_epochs=2, patience=0)
        result = train_classification(data, data, reg, tiny_model_cfg(head="classification"),
                                      cfg)
        names = [row.phase for row in result.history]
        assert {"cls1", "cls2", "cls3"} == set(names)
        by_phase = {row.phase: row for row in result.history}
        assert by_phase["cls1"].batch_size == 100
        assert by_phase["cls2"].batch_size == 150
        assert by_phase["cls2"].lr == pytest.approx(0.0001)
        assert by_phase["cls3"].batch_size == 8

    def test_projection_frozen_through_phases_one_and_two(self):
        data = self._data()
        reg = init_params(tiny_model_cfg(), 1)
        cfg = quick_cfg(max_epochs=2, patience=0)
        snapshots = {}
        result = train_classification(
            data, data, reg, tiny_model_cfg(head="classification"), cfg,
            phase_end=lambda name, params: snapshots.__setitem__(
                name, params.tensors["proj_W"].copy()),
        )
        assert np.array_equal(snapshots["cls1"], reg.tensors["proj_W"])
        assert np.array_equal(snapshots["cls2"], reg.tensors["proj_W"])

    def test_phase_three_updates_every_layer(self):
        data = self._data()
        reg = init_params(tiny_model_cfg(), 1)
        cfg = quick_cfg(max_epochs=3, patience=2)
        changed = {}

        def observe(name, params):
            if name == "cls2":
                changed["before3"] = {k: v.copy() for k, v in params.tensors.items()}
            if name == "cls3":
                changed["after3"] = {k: v.copy() for k, v in params.tensors.items()}

        train_classification(data, data, reg, tiny_model_cfg(head="classification"), cfg,
                             phase_end=observe)
        moved = [k for k in changed["before3"]
                 if not np.array_equal(changed["before3"][k], changed["after3"][k])]
        assert "proj_W" in moved

    def test_phase_constants(self):
        phases = classification_phases(0.0005, 100)
        assert [p.batch_size for p in phases] == [100, 150, 8]
        assert phases[1].lr == pytest.approx(0.0001)
        assert phases[0].frozen == {"projection"}
        assert phases[2].frozen == frozenset()


class TestFinetune:
    def test_zero_epochs_returns_input_unchanged(self):
        data, _, _ = synthetic_sequences(8, 6, 4, 6, seed=2)
        params = init_params(tiny_model_cfg(), 3)
        result = finetune(params, data, data, quick_cfg(max_epochs=0))
        for name in parameter_names(params.config):
            assert np.array_equal(result.params.tensors[name], params.tensors[name])

    def test_defaults(self):
        from moskit.training import FINETUNE_BATCH, FINETUNE_LR

        assert FINETUNE_LR == 0.0001
        assert FINETUNE_BATCH == 10

    def test_does_not_hurt_on_source_domain(self):
        data, _, _ = synthetic_sequences(24, 6, 4, 9, seed=11)
        base_cfg = quick_cfg(max_epochs=6, patience=2, seed=7)
        trained = train_regression(data, data, tiny_model_cfg(), base_cfg)
        tuned = finetune(trained.params, data, data, quick_cfg(max_epochs=3, patience=1))
        assert tuned.best_val_loss <= trained.best_val_loss * 1.05 + 1e-9

    def test_classification_checkpoint_rejected(self):
        data, _, _ = synthetic_sequences(4, 6, 4, 6, seed=2)
        params = init_params(tiny_model_cfg(head="classification"), 0)
        with pytest.raises(InvalidInputError):
            finetune(params, data, data, quick_cfg())
