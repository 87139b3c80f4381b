"""
Testes da orquestração: determinismo, modos de treino, ablações,
contrato sempre esparso e artefatos gravados em disco.

As execuções usam redes pequenas e poucos passos para rodar rápido.
"""

import json
import math
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

# Adicionar o diretório raiz ao path
sys.path.insert(0, str(Path(__file__).parent.parent))

import sparsetrain.runner as runner_module
from sparsetrain.config import ExperimentConfig
from sparsetrain.dynsparse import update_steps
from sparsetrain.errors import DivergenceError
from sparsetrain.nn import weight_name
from sparsetrain.runner import (
    Trainer,
    emit_pareto,
    pareto_point_from_summary,
    rng_streams,
    run,
    run_experiment,
    sweep_lr,
)
from sparsetrain.tensor import count_kernel_ops


def make_config(**overrides):
    """Configuração pequena: rede 8-16-16-4, 60 passos, avaliação a cada 20."""
    data = {
        "mode": "dynsparse_random",
        "model": {"layer_widths": [8, 16, 16, 4], "init_std": 0.1},
        "dynsparse": {"sparsity": 0.5, "updates": 4, "max_pruning_ratio": 0.5},
        "schedule": {"peak_lr": 1e-2},
        "steps": 60,
        "batch_size": 8,
        "eval_interval": 20,
        "eval_batches": 4,
        "seeds": [0, 1],
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return ExperimentConfig.model_validate(data)


class TestRngStreams:
    """Testes dos geradores por finalidade"""

    def test_same_seed_same_draws(self):
        a, b = rng_streams(3), rng_streams(3)
        for ga, gb in zip(a, b):
            assert ga.random() == gb.random()

    def test_streams_differ(self):
        streams = rng_streams(3)
        assert streams.batches.random() != streams.realloc.random()


class TestDeterminism:
    """Mesma (config, semente) produz os mesmos resultados"""

    def test_identical_runs(self):
        config = make_config()
        a, b = run(config, 0), run(config, 0)
        pd.testing.assert_frame_equal(a.metrics.to_frame(), b.metrics.to_frame())
        assert [r.to_json_dict() for r in a.updates] == [r.to_json_dict() for r in b.updates]
        assert a.final_loss == b.final_loss

    def test_different_seeds_differ(self):
        config = make_config()
        assert run(config, 0).final_loss != run(config, 1).final_loss


class TestModes:
    """Testes dos modos de treino básicos"""

    def test_dynsparse_updates_and_sparsity(self):
        result = run(make_config(), 0)
        assert result.status == "ok"
        assert [r.step for r in result.updates] == [15, 30, 45]
        assert [r.index for r in result.updates] == [0, 1, 2]
        assert result.achieved_sparsity == {1: 0.5}
        for record in result.updates:
            assert len(record.pruned[1]) == len(record.grown[1])

    def test_metrics_rows(self):
        frame = run(make_config(), 0).metrics.to_frame()
        assert frame["step"].tolist() == [0, 20, 40, 60]
        assert frame["lr"].iloc[-1] == 0.0
        assert np.all(np.diff(frame["dof_mean"]) >= 0)
        assert np.all(frame["dof_mean"] <= 1.0)
        assert frame["removed_new_ratio"].between(0.0, 1.0).all()
        assert np.all(np.diff(frame["flops_cumulative"]) > 0)

    def test_static_dof_constant(self):
        frame = run(make_config(mode="static"), 0).metrics.to_frame()
        assert frame["dof_mean"].tolist() == [0.5] * 4

    def test_dynsparse_explores_more_than_static(self):
        dynamic = run(make_config(), 0).metrics.to_frame()
        assert dynamic["dof_mean"].iloc[-1] > 0.5

    def test_zero_pruning_equals_static(self):
        static = run(make_config(mode="static"), 0)
        frozen_topology = run(make_config(dynsparse={"max_pruning_ratio": 0.0}), 0)
        single_segment = run(make_config(dynsparse={"updates": 1}), 0)
        pd.testing.assert_series_equal(static.metrics.to_frame()["loss"],
                                       frozen_topology.metrics.to_frame()["loss"])
        pd.testing.assert_series_equal(static.metrics.to_frame()["loss"],
                                       single_segment.metrics.to_frame()["loss"])

    def test_dense_equals_zero_sparsity_static(self):
        dense = run(make_config(mode="dense"), 0)
        static = run(make_config(mode="static", dynsparse={"sparsity": 0.0}), 0)
        assert dense.final_loss == static.final_loss
        assert dense.sparsity == 0.0

    def test_training_reduces_loss(self):
        frame = run(make_config(mode="dense", steps=200, dynsparse={"updates": 4}), 0).metrics.to_frame()
        assert frame["loss"].iloc[-1] < frame["loss"].iloc[0]

    def test_flops_accounting(self):
        result = run(make_config(mode="static"), 0)
        assert result.flops_per_step == pytest.approx(6 * 16 * 8 * 16 * 0.5)
        assert result.flops_total == pytest.approx(60 * result.flops_per_step)

    def test_lr_scaled_with_sparsity(self):
        config = make_config(scale_lr_with_sparsity=True)
        trainer = Trainer(config, 0, 0.5)
        assert trainer.schedule.peak_lr > config.schedule.peak_lr


class TestAlwaysSparse:
    """Contrato sempre esparso verificado pelos contadores dos kernels"""

    def test_random_mode_never_densifies(self):
        with count_kernel_ops() as counters:
            result = run(make_config(), 0)
        assert result.status == "ok"
        assert counters.dense_materializations == 0
        assert counters.block_accesses > 0

    def test_gradient_mode_materializes_dense_grads(self):
        with count_kernel_ops() as counters:
            result = run(make_config(mode="dynsparse_gradient"), 0)
        assert counters.dense_materializations == 3
        assert all(r.used_dense_grad for r in result.updates)
        assert result.notes

    def test_gradient_mode_counts_extra_flops(self):
        random_mode = run(make_config(), 0)
        gradient_mode = run(make_config(mode="dynsparse_gradient"), 0)
        assert gradient_mode.flops_total > random_mode.flops_total


class TestAblations:
    """Testes das ablações de congelamento, zero vs. não treinado e alternância"""

    def test_frozen_entries_never_change(self):
        config = make_config(mode="dense")
        trainer = Trainer(config, 0, 0.0)
        layer = trainer.model.layers[1]
        frozen = np.zeros(layer.weight_values.shape, dtype=bool)
        frozen.reshape(-1)[::3] = True
        layer.frozen = frozen
        before = layer.weight_values.copy()
        for _ in range(10):
            trainer.train_step()
        after = trainer.model.layers[1].weight_values
        np.testing.assert_array_equal(after[frozen], before[frozen])
        assert not np.array_equal(after[~frozen], before[~frozen])

    def test_zero_freeze_fraction_equals_dense(self):
        dense = run(make_config(mode="dense"), 0)
        for mode in ("freeze_half", "unfreeze_half"):
            ablation = run(make_config(mode=mode, freeze_fraction=0.0), 0)
            assert ablation.final_loss == dense.final_loss
            assert ablation.notes

    def test_freeze_modes_run(self):
        for mode in ("freeze_half", "unfreeze_half"):
            assert run(make_config(mode=mode), 0).status == "ok"

    def test_zero_vs_untrained_differ(self):
        zero = run(make_config(mode="zero_vs_untrained", treatment="zero"), 0)
        untrained = run(make_config(mode="zero_vs_untrained", treatment="untrained"), 0)
        assert zero.status == untrained.status == "ok"
        assert zero.final_loss != untrained.final_loss

    @pytest.mark.parametrize("selection", ["fixed", "magnitude", "random"])
    @pytest.mark.parametrize("non_active", ["zero", "untrained"])
    def test_alternating(self, selection, non_active):
        result = run(make_config(mode="alternating", selection=selection, non_active=non_active,
                                 active_fraction=0.25), 0)
        assert result.status == "ok"
        assert np.isfinite(result.final_loss)


class TestDivergence:
    """Execuções com loss não finita terminam com status diverged"""

    def test_diverged_status(self, monkeypatch):
        def exploding(*args, **kwargs):
            raise DivergenceError("Loss não finita: nan")

        monkeypatch.setattr(runner_module, "loss_and_grads", exploding)
        result = run(make_config(), 0)
        assert result.status == "diverged"
        assert "nan" in result.failure
        assert result.summary()["status"] == "diverged"

    def test_diverged_run_reports_no_stale_loss(self, monkeypatch, tmp_path):
        calls = {"n": 0}
        original = runner_module.loss_and_grads

        def explodes_after_30_steps(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] > 30:
                raise DivergenceError("Loss não finita: inf")
            return original(*args, **kwargs)

        monkeypatch.setattr(runner_module, "loss_and_grads", explodes_after_30_steps)
        diverged = run(make_config(mode="dense"), 0)
        monkeypatch.undo()

        assert diverged.status == "diverged"
        assert math.isnan(diverged.final_loss)
        assert np.isfinite(diverged.best_loss)
        assert pareto_point_from_summary(diverged.summary()).status == "diverged"

        static = run(make_config(mode="static"), 0)
        frame = emit_pareto([diverged, static], tmp_path / "pareto.csv").set_index("label")
        assert frame.loc[diverged.label, "status"] == "diverged"
        assert not frame.loc[diverged.label, "on_frontier"]
        assert frame.loc[static.label, "on_frontier"]
        summary = json.loads((tmp_path / "pareto.json").read_text())
        assert summary["failed"] == [diverged.label]


class TestSchedulerAudit:
    """Auditoria de todas as atualizações de uma execução completa"""

    def test_every_update_preserves_counts_and_zeroes_grown_blocks(self):
        config = make_config(steps=200, eval_interval=100,
                             dynsparse={"sparsity": 0.9, "updates": 40, "max_pruning_ratio": 0.5})
        trainer = Trainer(config, 0, config.dynsparse.sparsity)
        update_at = {step: k for k, step in enumerate(update_steps(config.dynsparse))}
        active = {i: mask.n_active for i, mask in trainer.model.masks().items()}
        ratios = []
        grown_total = 0
        grads = None
        for t in range(config.steps):
            if t in update_at:
                record = trainer.sparsity_update(update_at[t], grads)
                ratios.append(record.pruning_ratio)
                for i, grown in record.grown.items():
                    layer = trainer.model.layers[i]
                    assert layer.weight.mask.n_active == active[i]
                    positions = layer.weight.mask.positions(grown)
                    moments = trainer.state.moments[weight_name(i)]
                    assert np.all(layer.weight.values[positions] == 0.0)
                    assert np.all(moments.m[positions] == 0.0)
                    assert np.all(moments.v[positions] == 0.0)
                    grown_total += len(grown)
            _, grads = trainer.train_step()

        assert len(ratios) == 39
        assert ratios[0] == pytest.approx(0.5)
        assert all(a >= b for a, b in zip(ratios, ratios[1:]))
        assert grown_total > 0


class TestGroupLassoMetric:
    """A penalidade Group Lasso vira coluna do metrics.csv quando ativa"""

    def test_penalty_column_when_enabled(self, tmp_path):
        result = run(make_config(group_lasso={"lambda_group": 1e-3}), 0)
        frame = result.metrics.to_frame()
        assert (frame["group_lasso_penalty"] > 0).all()
        result.write(tmp_path)
        assert "group_lasso_penalty" in pd.read_csv(tmp_path / "metrics.csv").columns

    def test_no_column_when_disabled(self):
        assert "group_lasso_penalty" not in run(make_config(), 0).metrics.to_frame().columns


class TestArtifacts:
    """Testes dos arquivos gravados e da tabela de Pareto"""

    def test_run_experiment_writes_artifacts(self, tmp_path):
        results = run_experiment(make_config(), tmp_path)
        assert [r.seed for r in results] == [0, 1]
        for seed in (0, 1):
            directory = tmp_path / f"seed_{seed}"
            frame = pd.read_csv(directory / "metrics.csv")
            assert list(frame.columns[:7]) == ["step", "loss", "lr", "dof_mean", "removed_new_ratio",
                                               "pruning_ratio", "flops_cumulative"]
            lines = (directory / "updates.jsonl").read_text().splitlines()
            assert len(lines) == 3
            assert json.loads(lines[0])["index"] == 0
            summary = json.loads((directory / "summary.json").read_text())
            assert summary["status"] == "ok"
            assert summary["config"]["mode"] == "dynsparse_random"

    def test_parallel_matches_sequential(self, tmp_path):
        config = make_config()
        parallel = run_experiment(config, tmp_path)
        assert parallel[1].final_loss == run(config, 1).final_loss

    def test_emit_pareto(self, tmp_path):
        dense = run(make_config(mode="dense"), 0)
        sparse = run(make_config(mode="static"), 0)
        frame = emit_pareto([dense, sparse], tmp_path / "pareto.csv")
        assert frame["flops"].tolist() == sorted([dense.flops_per_step, sparse.flops_per_step])
        assert (tmp_path / "pareto.json").exists()

    def test_emit_pareto_from_summaries(self, tmp_path):
        summaries = [run(make_config(mode=mode), 0).summary() for mode in ("dense", "static")]
        points = [pareto_point_from_summary(s) for s in summaries]
        frame = emit_pareto(points, tmp_path / "pareto.csv")
        assert len(frame) == 2

    def test_emit_pareto_needs_two_results(self, tmp_path):
        with pytest.raises(ValueError):
            emit_pareto([run(make_config(mode="dense"), 0)], tmp_path / "pareto.csv")

    def test_sweep_lr(self):
        results = sweep_lr(make_config(mode="static"), 0, [0, 1])
        assert [lr for lr, _ in results] == [1e-2, 2e-2]
        assert all(r.config.schedule.peak_lr == lr for lr, r in results)
