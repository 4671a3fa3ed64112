import csv
import json
import logging
import os
import warnings

import numpy as np
import pytest
import torch

from tpnica.config import ExperimentConfig, TrainConfig
from tpnica.exceptions import ConfigError, ManifestVersionError, NonFiniteError
from tpnica.experiment import build_model
from tpnica.optimizer import (
    CHECKPOINT_META,
    TRACE_COLUMNS,
    Trainer,
    minibatch_order,
    read_checkpoint_meta,
    steps_per_epoch,
    train,
    write_trace,
)


def make_trainer(model_kind="tp", **train_options):
    options = dict(minibatch_size=2, epochs=2)
    options.update(train_options)
    config = ExperimentConfig(
        lattice_shape=(3, 3),
        n_components=2,
        n_observed=3,
        sample_count=5,
        n_pseudo=4,
        noise_fraction=0.1,
        model_kind=model_kind,
        train=TrainConfig(**options),
    )
    observations = np.random.default_rng(0).standard_normal((5, 3, 9))
    model, family = build_model(config, observations)
    return Trainer(model, family, config.train), observations


def without_wallclock(trace):
    return [tuple(row)[:-1] for row in trace]


def snapshot(trainer):
    return {name: p.detach().clone() for name, p in trainer.named_parameters().items()}


class TestSchedule:
    def test_steps_per_epoch(self):
        assert steps_per_epoch(5, 2) == 3
        assert steps_per_epoch(8, 8) == 1
        assert steps_per_epoch(1024, 8) == 128

    def test_minibatch_order_is_a_seeded_permutation(self):
        order = minibatch_order(0, 0, 10)
        assert sorted(order.tolist()) == list(range(10))
        assert np.array_equal(order, minibatch_order(0, 0, 10))
        assert not np.array_equal(order, minibatch_order(0, 1, 10))


class TestTrainer:
    def test_trace_covers_every_step(self):
        trainer, observations = make_trainer()
        result = trainer.train(observations)
        assert [row.step for row in result.trace] == [1, 2, 3, 4, 5, 6]
        assert [row.epoch for row in result.trace] == [1, 1, 1, 2, 2, 2]
        assert all(np.isfinite(row.elbo) for row in result.trace)
        assert result.checkpoint is None

    def test_zero_learning_rates_freeze_parameters(self):
        trainer, observations = make_trainer(lr_variational=0.0, lr_model=0.0)
        before = snapshot(trainer)
        trainer.train(observations)
        for name, value in snapshot(trainer).items():
            assert torch.equal(value, before[name]), name

    def test_states_outside_the_minibatch_are_untouched(self):
        trainer, observations = make_trainer(epochs=1)
        before = snapshot(trainer)
        batch = set(minibatch_order(0, 0, 5)[:2].tolist())
        trainer._step(torch.as_tensor(observations), 0, np.array(sorted(batch)), 0.0)

        after = snapshot(trainer)
        for i in range(5):
            name = "family.states.{}.m_tilde".format(i)
            assert torch.equal(after[name], before[name]) == (i not in batch)

    def test_same_seed_reproduces_the_trace(self):
        first, observations = make_trainer()
        second, _ = make_trainer()
        assert without_wallclock(first.train(observations).trace) == without_wallclock(
            second.train(observations).trace
        )

    def test_gaussian_model_has_zero_tau_kl(self):
        trainer, observations = make_trainer(model_kind="gp")
        trace = trainer.train(observations).trace
        assert [row.kl_tau for row in trace] == [0.0] * len(trace)

    def test_training_does_not_convert_graph_tensors(self):
        trainer, observations = make_trainer(epochs=1)
        with warnings.catch_warnings():
            warnings.filterwarnings("error", message=".*requires_grad.*")
            result = trainer.train(observations)
        assert all(isinstance(row.elbo, float) for row in result.trace)

    def test_later_epochs_improve_the_mean_elbo(self):
        trainer, observations = make_trainer(epochs=30)
        trace = trainer.train(observations).trace

        def epoch_mean(epoch):
            return np.mean([row.elbo for row in trace if row.epoch == epoch])

        assert epoch_mean(30) > epoch_mean(1)

    def test_adam_settings_converge_on_a_quadratic(self):
        config = TrainConfig()
        p = torch.nn.Parameter(torch.zeros((), dtype=torch.float64))
        optimizer = torch.optim.Adam([p], lr=1e-2, betas=config.betas, eps=config.eps)
        for _ in range(5000):
            optimizer.zero_grad()
            loss = (p - 1.0) ** 2
            loss.backward()
            optimizer.step()
        assert float(((p - 1.0) ** 2).detach()) < 1e-6

    def test_clipping_logs_a_warning(self, caplog):
        trainer, observations = make_trainer(epochs=1, clip_norm=1e-6)
        with caplog.at_level(logging.WARNING, logger="tpnica.optimizer"):
            trainer.train(observations)
        assert "Clipped gradient norm" in caplog.text

    def test_rejects_sample_count_mismatch(self):
        trainer, observations = make_trainer()
        with pytest.raises(ConfigError):
            trainer.train(observations[:4])

    def test_non_finite_objective_writes_no_checkpoint(self, tmp_path):
        trainer, observations = make_trainer(checkpoint_interval=1)
        with torch.no_grad():
            trainer.model.decoder.layers[0].bias[0] = float("nan")
        with pytest.raises(NonFiniteError):
            trainer.train(observations, checkpoint_dir=str(tmp_path))
        assert os.listdir(str(tmp_path)) == []


class TestCheckpoints:
    def test_final_checkpoint_meta(self, tmp_path):
        trainer, observations = make_trainer()
        trainer.metadata = {"experiment": {"seed": 0}}
        result = trainer.train(observations, checkpoint_dir=str(tmp_path))

        assert os.path.basename(result.checkpoint) == "step-00000006"
        meta = read_checkpoint_meta(result.checkpoint)
        assert meta["schema_version"] == 1
        assert meta["step"] == 6
        assert meta["train_config"] == trainer.config.to_dict()
        assert meta["experiment"] == {"seed": 0}
        assert len(meta["trace"]) == 6
        assert os.path.isfile(os.path.join(result.checkpoint, "params", "model.log_noise"))

    def test_interval_checkpoints(self, tmp_path):
        trainer, observations = make_trainer(checkpoint_interval=2)
        trainer.train(observations, checkpoint_dir=str(tmp_path))
        assert sorted(os.listdir(str(tmp_path))) == [
            "step-00000002",
            "step-00000004",
            "step-00000006",
        ]

    def test_resume_matches_an_uninterrupted_run(self, tmp_path):
        uninterrupted, observations = make_trainer(checkpoint_interval=2)
        full = uninterrupted.train(observations, checkpoint_dir=str(tmp_path))

        resumed, _ = make_trainer(checkpoint_interval=2)
        resumed.restore(str(tmp_path / "step-00000002"))
        assert resumed.step == 2
        continued = resumed.train(observations)

        assert without_wallclock(continued.trace) == without_wallclock(full.trace)
        final, expected = snapshot(resumed), snapshot(uninterrupted)
        for name, value in final.items():
            assert torch.equal(value, expected[name]), name

    def test_restored_adam_step_is_a_scalar(self, tmp_path):
        trainer, observations = make_trainer(epochs=1)
        path = trainer.train(observations, checkpoint_dir=str(tmp_path)).checkpoint

        fresh, _ = make_trainer(epochs=1)
        fresh.restore(path)
        steps = [state["step"] for state in fresh.optimizer.state.values()]
        assert steps
        assert all(step.shape == torch.Size([]) for step in steps)

    def test_train_function_resumes(self, tmp_path):
        trainer, observations = make_trainer(checkpoint_interval=3)
        trainer.train(observations, checkpoint_dir=str(tmp_path))

        fresh, _ = make_trainer(checkpoint_interval=3)
        result = train(
            observations,
            fresh.model,
            fresh.family,
            fresh.config,
            resume=str(tmp_path / "step-00000003"),
        )
        assert [row.step for row in result.trace] == [1, 2, 3, 4, 5, 6]

    def test_unsupported_schema_version(self, tmp_path):
        trainer, observations = make_trainer(epochs=1)
        path = trainer.train(observations, checkpoint_dir=str(tmp_path)).checkpoint

        meta_path = os.path.join(path, CHECKPOINT_META)
        with open(meta_path) as handle:
            meta = json.load(handle)
        meta["schema_version"] = 99
        with open(meta_path, "w") as handle:
            json.dump(meta, handle)

        fresh, _ = make_trainer(epochs=1)
        with pytest.raises(ManifestVersionError):
            fresh.restore(path)

    def test_not_a_checkpoint(self, tmp_path):
        with pytest.raises(ConfigError):
            read_checkpoint_meta(str(tmp_path))


class TestWriteTrace:
    def test_columns_and_rows(self, tmp_path):
        trainer, observations = make_trainer(epochs=1)
        trace = trainer.train(observations).trace
        path = str(tmp_path / "elbo_trace.csv")
        write_trace(path, trace)

        with open(path, newline="") as handle:
            rows = list(csv.reader(handle))
        assert tuple(rows[0]) == TRACE_COLUMNS
        assert len(rows) == 1 + len(trace)
        assert float(rows[1][2]) == trace[0].elbo
