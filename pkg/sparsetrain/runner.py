"""
Orquestração dos experimentos: laços de treino denso, estático, DynSparse
e as ablações de congelamento, zero vs. não treinado e alternância.

Cada execução é determinada por (config, semente). Os geradores
aleatórios são separados por finalidade (professor, avaliação, pesos,
máscaras, batches, realocação, ablação), então ligar um recurso não
altera a sequência de outro.

Fluxo de um passo:
    1. Atualização de esparsidade, se o passo for uma fronteira
    2. Batch novo, loss e gradientes
    3. Clipping, Adam, Group Lasso e aplicação respeitando congelamentos
    4. Avaliação a cada eval_interval passos
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd

from sparsetrain.config import MAX_WORKERS, ExperimentConfig
from sparsetrain.dynsparse import UpdateRecord, dynsparse_update, update_steps
from sparsetrain.errors import DivergenceError
from sparsetrain.flops import (
    ParetoPoint,
    dense_train_flops,
    lr_grid,
    lr_sparse_from_dense,
    model_train_flops,
    write_pareto_table,
)
from sparsetrain.metrics import (
    ExplorationState,
    MetricsLog,
    MetricsRow,
    dof_explored,
    layer_mean,
    removed_new_ratio,
)
from sparsetrain.nn import (
    LayerGrads,
    Model,
    bias_name,
    init_model,
    loss_and_grads,
    make_batch,
    make_task,
    mse_loss,
    weight_name,
)
from sparsetrain.optim import (
    OptimState,
    adam_update,
    apply_updates,
    clip_gradients,
    group_lasso_adjust,
    group_lasso_penalty,
    lr_at,
)

logger = logging.getLogger(__name__)

Hook = Callable[["Trainer"], None]


class RngStreams(NamedTuple):
    task: np.random.Generator
    eval: np.random.Generator
    init: np.random.Generator
    masks: np.random.Generator
    batches: np.random.Generator
    realloc: np.random.Generator
    ablation: np.random.Generator


def rng_streams(seed: int) -> RngStreams:
    """Um gerador independente por finalidade, todos derivados da semente."""
    children = np.random.SeedSequence(seed).spawn(len(RngStreams._fields))
    return RngStreams(*(np.random.default_rng(child) for child in children))


@dataclass
class RunResult:
    """
    Resultado de uma execução.

    Attributes:
        config: Configuração usada
        seed: Semente
        status: ok ou diverged
        final_loss: Loss de avaliação no último passo (nan se divergiu)
        best_loss: Menor loss de avaliação registrada
        metrics: Série temporal de métricas
        updates: Registros das atualizações de esparsidade
        achieved_sparsity: Esparsidade obtida por camada esparsa
        flops_per_step: FLOPs de treino (sem embeddings) por passo
        flops_total: FLOPs acumulados
        wall_clock: Duração em segundos
        notes: Observações registradas no summary.json
        failure: Mensagem de erro quando diverged
    """
    config: ExperimentConfig
    seed: int
    status: str
    final_loss: float
    best_loss: float
    metrics: MetricsLog
    updates: list[UpdateRecord]
    achieved_sparsity: dict[int, float]
    flops_per_step: float
    flops_total: float
    wall_clock: float
    notes: list[str] = field(default_factory=list)
    failure: Optional[str] = None

    @property
    def sparsity(self) -> float:
        values = list(self.achieved_sparsity.values())
        return float(np.mean(values)) if values else 0.0

    @property
    def label(self) -> str:
        return f"{self.config.mode}_s{self.sparsity:.3f}_B{self.config.model.block_size}"

    def pareto_point(self) -> ParetoPoint:
        return ParetoPoint(
            label=self.label,
            flops=self.flops_per_step,
            loss=self.final_loss,
            sparsity=self.sparsity,
            block_size=self.config.model.block_size,
            status=self.status,
        )

    def summary(self) -> dict:
        return {
            "status": self.status,
            "failure": self.failure,
            "seed": self.seed,
            "mode": self.config.mode,
            "label": self.label,
            "final_loss": self.final_loss,
            "best_loss": self.best_loss,
            "achieved_sparsity": {str(i): s for i, s in self.achieved_sparsity.items()},
            "flops_per_step": self.flops_per_step,
            "flops_total": self.flops_total,
            "wall_clock_seconds": self.wall_clock,
            "notes": self.notes,
            "pareto": {
                "label": self.label,
                "flops": self.flops_per_step,
                "loss": self.final_loss,
                "sparsity": self.sparsity,
                "block_size": self.config.model.block_size,
                "status": self.status,
            },
            "config": self.config.model_dump(mode="json"),
        }

    def write(self, out_dir: Union[str, Path]) -> Path:
        """Grava metrics.csv, updates.jsonl e summary.json em out_dir."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.metrics.to_csv(out_dir / "metrics.csv")
        with open(out_dir / "updates.jsonl", "w") as f:
            for record in self.updates:
                f.write(json.dumps(record.to_json_dict(), sort_keys=True) + "\n")
        (out_dir / "summary.json").write_text(json.dumps(self.summary(), indent=2))
        return out_dir


class Trainer:
    """
    Estado mutável de uma execução: modelo, otimizador, tarefa e métricas.

    Apenas o laço de treino escreve nele.
    """

    def __init__(self, config: ExperimentConfig, seed: int, sparsity: float) -> None:
        self.config = config
        self.seed = seed
        self.rngs = rng_streams(seed)
        self.task = make_task(config.task, config.model, self.rngs.task)
        self.eval_set = [
            make_batch(self.task, config.batch_size, self.rngs.eval) for _ in range(config.eval_batches)
        ]
        self.model: Model = init_model(config.model, sparsity, self.rngs.init, self.rngs.masks)
        self.state = OptimState.zeros_like(self.model.parameters())
        self.dynsparse = config.dynsparse
        self.schedule = config.schedule
        if config.scale_lr_with_sparsity and sparsity > 0:
            peak = lr_sparse_from_dense(config.schedule.peak_lr, sparsity)
            self.schedule = config.schedule.model_copy(update={"peak_lr": peak})
            logger.info("peak_lr escalado de %.3g para %.3g (s=%.2f)", config.schedule.peak_lr, peak, sparsity)

        self.metrics = MetricsLog()
        self.records: list[UpdateRecord] = []
        self.exploration = ExplorationState.from_masks(self.model.masks())
        self.notes: list[str] = []
        self.step = 0
        self.flops_cumulative = 0.0
        self.best_loss = math.inf
        self.last_loss = math.nan
        self.need_dense_grads = False

    @property
    def flops_per_step(self) -> float:
        return model_train_flops(self.config.model, self.model.achieved_sparsity(), self.config.batch_size)

    def decay_rates(self) -> dict[str, float]:
        """Weight decay por parâmetro; zero nos vieses e nas camadas com Group Lasso."""
        rates = {}
        for i, layer in enumerate(self.model.layers):
            rates[bias_name(i)] = 0.0
            uses_group_lasso = layer.is_sparse and self.config.group_lasso.enabled
            rates[weight_name(i)] = 0.0 if uses_group_lasso else self.config.adam.weight_decay
        return rates

    def evaluate(self) -> float:
        return float(np.mean([mse_loss(self.model, batch) for batch in self.eval_set]))

    def train_step(self) -> tuple[float, list[LayerGrads]]:
        batch = make_batch(self.task, self.config.batch_size, self.rngs.batches)
        loss, grads = loss_and_grads(self.model, batch, dense_grads=self.need_dense_grads)

        named = {}
        for i, g in enumerate(grads):
            named[weight_name(i)] = g.weight
            named[bias_name(i)] = g.bias
        named, _ = clip_gradients(named, self.config.adam.clip_global_norm)

        lr = lr_at(self.schedule, self.step + 1)
        params = self.model.parameters()
        frozen = self.model.frozen_masks()
        deltas = adam_update(params, named, self.state, self.config.adam, lr, frozen, self.decay_rates())
        if self.config.group_lasso.enabled:
            for i in self.model.sparse_indices():
                name = weight_name(i)
                deltas[name] = group_lasso_adjust(deltas[name], self.model.layers[i].weight,
                                                  self.config.group_lasso, lr)
        self.model.set_parameters(apply_updates(params, deltas, frozen))

        self.step += 1
        self.flops_cumulative += self.flops_per_step
        if self.need_dense_grads:
            for i in self.model.sparse_indices():
                shape = self.config.model.layer_shape(i)
                self.flops_cumulative += dense_train_flops(shape.cols, shape.rows, self.config.batch_size) / 3
        return loss, grads

    def sparsity_update(self, k: int, grads: Optional[list[LayerGrads]]) -> UpdateRecord:
        previous = self.records[-1] if self.records else None
        record = dynsparse_update(self.model, self.state, self.dynsparse, k, self.rngs.realloc,
                                  grads=grads, previous=previous, step=self.step)
        self.state.audit(self.model.parameters())
        self.exploration.observe(self.model.masks())
        self.records.append(record)
        return record

    def log_metrics(self) -> None:
        loss = self.evaluate()
        self.last_loss = loss
        self.best_loss = min(self.best_loss, loss)
        dof_layers = {i: dof_explored(self.exploration, i) for i in self.exploration.layers}
        last = self.records[-1] if self.records else None
        previous = self.records[-2] if len(self.records) > 1 else None
        penalty = None
        if self.config.group_lasso.enabled:
            penalty = sum(group_lasso_penalty(self.model.layers[i].weight, self.config.group_lasso)
                          for i in self.model.sparse_indices())
            logger.debug("Penalidade Group Lasso no passo %d: %.6g", self.step, penalty)
        self.metrics.append(MetricsRow(
            step=self.step,
            loss=loss,
            lr=lr_at(self.schedule, self.step),
            dof_mean=layer_mean(dof_layers) if dof_layers else 1.0,
            removed_new_ratio=removed_new_ratio(last, previous) if last is not None else 0.0,
            pruning_ratio=last.pruning_ratio if last is not None else 0.0,
            flops_cumulative=self.flops_cumulative,
            dof_layers=dof_layers,
            group_lasso_penalty=penalty,
        ))


def _execute(trainer: Trainer, update_at: Mapping[int, int],
             events: Optional[Mapping[int, Iterable[Hook]]] = None) -> RunResult:
    config = trainer.config
    events = events or {}
    gradient_mode = trainer.dynsparse.realloc_mode == "gradient" and bool(update_at)
    started = time.perf_counter()
    status, failure = "ok", None
    logger.info("Iniciando %s (semente %d, %d passos), esparsidade obtida %s", config.mode, trainer.seed,
                config.steps, trainer.model.achieved_sparsity())
    try:
        trainer.log_metrics()
        grads: Optional[list[LayerGrads]] = None
        for t in range(config.steps):
            for hook in events.get(t, ()):
                hook(trainer)
            if t in update_at:
                trainer.sparsity_update(update_at[t], grads)
            trainer.need_dense_grads = gradient_mode and (t + 1) in update_at
            _, grads = trainer.train_step()
            if trainer.step % config.eval_interval == 0 or trainer.step == config.steps:
                trainer.log_metrics()
    except DivergenceError as e:
        status, failure = "diverged", str(e)
        logger.error("Execução divergiu no passo %d: %s", trainer.step, e)

    result = RunResult(
        config=config,
        seed=trainer.seed,
        status=status,
        final_loss=trainer.last_loss if status == "ok" else math.nan,
        best_loss=trainer.best_loss,
        metrics=trainer.metrics,
        updates=trainer.records,
        achieved_sparsity=trainer.model.achieved_sparsity(),
        flops_per_step=trainer.flops_per_step,
        flops_total=trainer.flops_cumulative,
        wall_clock=time.perf_counter() - started,
        notes=trainer.notes,
        failure=failure,
    )
    logger.info("Fim de %s (semente %d): loss final %.5f", config.mode, trainer.seed, result.final_loss)
    return result


def run(config: ExperimentConfig, seed: int) -> RunResult:
    """
    Executa o modo configurado para uma semente.

    Args:
        config: Configuração do experimento
        seed: Semente da execução

    Returns:
        RunResult da execução (status diverged se a loss deixar de ser finita)
    """
    mode = config.mode
    if mode in ("freeze_half", "unfreeze_half"):
        return run_freeze_ablation(config, seed, freeze_first_half=mode == "unfreeze_half")
    if mode == "zero_vs_untrained":
        return run_zero_vs_untrained(config, seed, config.treatment)
    if mode == "alternating":
        return run_alternating(config, seed, config.selection, config.non_active)

    sparsity = 0.0 if mode == "dense" else config.dynsparse.sparsity
    trainer = Trainer(config, seed, sparsity)
    update_at: dict[int, int] = {}
    if mode in ("dynsparse_random", "dynsparse_gradient"):
        realloc = "gradient" if mode == "dynsparse_gradient" else "random"
        trainer.dynsparse = config.dynsparse.model_copy(update={"realloc_mode": realloc})
        update_at = {step: k for k, step in enumerate(update_steps(trainer.dynsparse))}
        if realloc == "gradient":
            logger.warning("Realocação por gradiente materializa gradientes densos; o treino deixa de ser sempre esparso")
            trainer.notes.append("Realocação por gradiente: gradientes densos calculados nas fronteiras")
    return _execute(trainer, update_at)


def _random_subset(trainer: Trainer, fraction: float) -> dict[int, np.ndarray]:
    """Sorteia, por camada esparsa, uma fração das entradas do peso (True = sorteada)."""
    subsets = {}
    for i in trainer.model.sparse_indices():
        shape = trainer.model.layers[i].weight_values.shape
        size = int(np.prod(shape))
        count = int(math.floor(fraction * size + 0.5))
        chosen = np.zeros(size, dtype=bool)
        chosen[trainer.rngs.ablation.choice(size, size=count, replace=False)] = True
        subsets[i] = chosen.reshape(shape)
    return subsets


def _largest_fraction(values: np.ndarray, fraction: float) -> np.ndarray:
    magnitudes = np.abs(values).ravel()
    count = int(math.floor(fraction * magnitudes.size + 0.5))
    chosen = np.zeros(magnitudes.size, dtype=bool)
    chosen[np.argsort(-magnitudes, kind="stable")[:count]] = True
    return chosen.reshape(values.shape)


def run_freeze_ablation(config: ExperimentConfig, seed: int, freeze_first_half: bool) -> RunResult:
    """
    Congela um subconjunto aleatório dos pesos durante metade do treino.

    Com freeze_first_half=True o subconjunto começa não treinável e é
    liberado em T/2 (unfreeze); caso contrário é congelado em T/2 (freeze).
    Os valores congelados são mantidos, não zerados.
    """
    trainer = Trainer(config, seed, 0.0)
    subset = _random_subset(trainer, config.freeze_fraction)

    def freeze(tr: Trainer) -> None:
        for i, chosen in subset.items():
            tr.model.layers[i].frozen = chosen.copy()

    def unfreeze(tr: Trainer) -> None:
        for i in subset:
            tr.model.layers[i].frozen = None

    half = config.steps // 2
    events = {0: [freeze], half: [unfreeze]} if freeze_first_half else {half: [freeze]}
    trainer.notes.append(
        "Mesma agenda de learning rate nas duas metades; o decaimento linear torna as metades assimétricas"
    )
    return _execute(trainer, {}, events)


def run_zero_vs_untrained(config: ExperimentConfig, seed: int, treatment: str) -> RunResult:
    """
    Remove do treino uma fração s dos pesos, zerando-os (zero) ou
    mantendo os valores iniciais (untrained), e treina o complemento.
    """
    trainer = Trainer(config, seed, 0.0)
    subset = _random_subset(trainer, config.dynsparse.sparsity)
    for i, chosen in subset.items():
        layer = trainer.model.layers[i]
        if treatment == "zero":
            layer.set_weight_values(np.where(chosen, 0.0, layer.weight_values))
        layer.frozen = chosen
    trainer.notes.append(f"Tratamento dos pesos removidos: {treatment}")
    return _execute(trainer, {})


def run_alternating(config: ExperimentConfig, seed: int, selection: str, non_active: str) -> RunResult:
    """
    Alterna fases restritas e densas de mesmo comprimento.

    O treino é dividido em n = dynsparse.updates trechos; os de índice par
    são restritos e os ímpares densos. Em cada fase restrita só a fração
    active_fraction dos pesos treina, escolhida por selection (fixed,
    magnitude ou random); o resto recebe o tratamento non_active.
    """
    trainer = Trainer(config, seed, 0.0)
    fixed = _random_subset(trainer, config.active_fraction)
    fraction = config.active_fraction

    def restrict(tr: Trainer) -> None:
        fresh = _random_subset(tr, fraction) if selection == "random" else None
        for i in tr.model.sparse_indices():
            layer = tr.model.layers[i]
            if selection == "fixed":
                active = fixed[i]
            elif selection == "magnitude":
                active = _largest_fraction(layer.weight_values, fraction)
            else:
                active = fresh[i]
            if non_active == "zero":
                layer.set_weight_values(np.where(active, layer.weight_values, 0.0))
            layer.frozen = ~active

    def release(tr: Trainer) -> None:
        for i in tr.model.sparse_indices():
            tr.model.layers[i].frozen = None

    n = config.dynsparse.updates
    events = {(j * config.steps) // n: [restrict if j % 2 == 0 else release] for j in range(n)}
    trainer.notes.append(f"Alternância com {n} fases, seleção {selection}, inativos {non_active}")
    return _execute(trainer, {}, events)


def run_experiment(config: ExperimentConfig, out_dir: Union[str, Path],
                   seeds: Optional[Sequence[int]] = None) -> list[RunResult]:
    """
    Executa várias sementes em paralelo, cada uma gravando em out_dir/seed_<semente>.

    Returns:
        Resultados na ordem das sementes
    """
    seeds = list(config.seeds if seeds is None else seeds)
    out_dir = Path(out_dir)
    workers = max(1, min(MAX_WORKERS, len(seeds)))

    def job(seed: int) -> RunResult:
        result = run(config, seed)
        result.write(out_dir / f"seed_{seed}")
        return result

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, seeds))


def sweep_lr(config: ExperimentConfig, seed: int, m_values: Iterable[int]) -> list[tuple[float, RunResult]]:
    """Executa a configuração para cada learning rate da grade peak_lr·2^m."""
    results = []
    for lr in lr_grid(config.schedule.peak_lr, m_values):
        schedule = config.schedule.model_copy(update={"peak_lr": lr})
        results.append((lr, run(config.model_copy(update={"schedule": schedule}), seed)))
    return results


def pareto_point_from_summary(summary: Mapping) -> ParetoPoint:
    return ParetoPoint(**summary["pareto"])


def emit_pareto(results: Sequence[Union[RunResult, ParetoPoint]], out_path: Union[str, Path]) -> pd.DataFrame:
    """
    Junta FLOPs por passo e loss final de cada execução numa tabela de Pareto.

    Execuções que divergiram entram com loss nan e status diverged, fora da
    fronteira.

    Args:
        results: Execuções (ou pontos já montados), pelo menos duas
        out_path: Caminho do CSV; um JSON com o mesmo nome é gravado ao lado

    Returns:
        Tabela ordenada por FLOPs

    Raises:
        ValueError: Se houver menos de dois resultados
    """
    if len(results) < 2:
        raise ValueError("A tabela de Pareto precisa de pelo menos dois resultados")
    points = [r.pareto_point() if isinstance(r, RunResult) else r for r in results]
    return write_pareto_table(points, out_path)
