"""
CLI do toolkit de treinamento esparso dinâmico.

Comandos:
    run      --config <json> [--seed N] [--out DIR]   executa um experimento
    pareto   --inputs <glob> --out <csv>              monta a tabela de Pareto
    lr-rule  --dense-lr F --sparsity S                aplica a regra de learning rate
    flops    --config <json>                          contabiliza FLOPs do modelo
    sweep-lr --config <json> [--seed N] [--m 0 1 2]   varre peak_lr·2^m
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from sparsetrain.config import LOG_LEVEL, ExperimentConfig, load_config
from sparsetrain.errors import SparseTrainError
from sparsetrain.flops import (
    LayerFlopsSpec,
    dense_train_flops,
    epsilon_critical,
    lr_param_fit,
    lr_sparse_factor,
    lr_sparse_from_dense,
    lr_static_fit,
    model_param_count,
    model_train_flops,
    sparse_train_flops,
)
from sparsetrain.runner import emit_pareto, pareto_point_from_summary, run, run_experiment, sweep_lr
from sparsetrain.tensor import random_mask

logger = logging.getLogger(__name__)


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    out = Path(args.out or config.output_dir)
    if args.seed is not None:
        result = run(config, args.seed)
        result.write(out)
        results = [result]
    else:
        results = run_experiment(config, out)
    for result in results:
        print(f"semente {result.seed}: status={result.status} loss_final={result.final_loss:.6f} "
              f"loss_melhor={result.best_loss:.6f} flops_total={result.flops_total:.4g}")
    return 0 if all(r.status == "ok" for r in results) else 1


def cmd_pareto(args: argparse.Namespace) -> int:
    paths = sorted(glob.glob(args.inputs, recursive=True))
    if not paths:
        print(f"Nenhum summary.json encontrado em {args.inputs}", file=sys.stderr)
        return 1
    points = [pareto_point_from_summary(json.loads(Path(p).read_text())) for p in paths]
    frame = emit_pareto(points, args.out)
    print(frame.to_string(index=False))
    return 0


def cmd_lr_rule(args: argparse.Namespace) -> int:
    sparse_lr = lr_sparse_from_dense(args.dense_lr, args.sparsity)
    print(f"fator:            {lr_sparse_factor(args.sparsity):.6g}")
    print(f"lr esparso:       {sparse_lr:.6g}")
    print(f"ajuste estático:  {lr_static_fit(args.sparsity):.6g}")
    return 0


def achieved_sparsity(config: ExperimentConfig) -> dict[int, float]:
    """Esparsidade que as máscaras realmente obtêm em cada camada esparsa."""
    requested = 0.0 if config.mode == "dense" else config.dynsparse.sparsity
    rng = np.random.default_rng(0)
    return {
        index: random_mask(config.model.layer_shape(index), config.model.block_size, requested, rng).sparsity
        for index in config.model.sparse_layers
    }


def cmd_flops(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    requested = 0.0 if config.mode == "dense" else config.dynsparse.sparsity
    sparsity = achieved_sparsity(config)
    batch = config.batch_size
    print(f"{'camada':>6} {'I':>6} {'O':>6} {'s':>8} {'f':>8} {'FLOPs esparso':>16} {'FLOPs denso':>14}")
    for index in config.model.sparse_layers:
        shape = config.model.layer_shape(index)
        spec = LayerFlopsSpec(shape.cols, shape.rows, batch, 1.0 - sparsity[index])
        print(f"{index:>6} {shape.cols:>6} {shape.rows:>6} {sparsity[index]:>8.4f} {spec.density:>8.4f} "
              f"{sparse_train_flops(spec):>16.6g} {dense_train_flops(shape.cols, shape.rows, batch):>14}")
    total_sparse = model_train_flops(config.model, sparsity, batch)
    total_dense = model_train_flops(config.model, 0.0, batch)
    n_params = model_param_count(config.model, sparsity)
    mean_sparsity = float(np.mean(list(sparsity.values())))
    print(f"esparsidade:      pedida {requested:.4f}, obtida {mean_sparsity:.4f}")
    print(f"FLOPs por passo:  {total_sparse:.6g} (denso {total_dense:.6g})")
    print(f"FLOPs do treino:  {total_sparse * config.steps:.6g}")
    print(f"epsilon_critical: {epsilon_critical(total_dense, total_sparse):.4f}")
    if n_params >= 1:
        print(f"lr pelo ajuste em N={n_params:.0f}: {lr_param_fit(n_params):.4g}")
    return 0


def cmd_sweep_lr(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    seed = args.seed if args.seed is not None else config.seeds[0]
    results = sweep_lr(config, seed, args.m)
    for lr, result in results:
        print(f"lr={lr:.6g} status={result.status} loss_final={result.final_loss:.6f}")
    ok = [(lr, r) for lr, r in results if r.status == "ok"]
    if not ok:
        print("Todas as execuções divergiram", file=sys.stderr)
        return 1
    best_lr, best = min(ok, key=lambda item: item[1].final_loss)
    print(f"✅ melhor lr: {best_lr:.6g} (loss {best.final_loss:.6f})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsetrain", description="Treinamento esparso dinâmico em escala de mesa")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="executa um experimento")
    p.add_argument("--config", required=True, help="arquivo JSON do ExperimentConfig")
    p.add_argument("--seed", type=int, default=None, help="semente única (padrão: todas as do config)")
    p.add_argument("--out", default=None, help="diretório de saída")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("pareto", help="monta a tabela de Pareto a partir de summary.json")
    p.add_argument("--inputs", required=True, help="glob dos summary.json")
    p.add_argument("--out", required=True, help="caminho do CSV (JSON gravado ao lado)")
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("lr-rule", help="learning rate esparso a partir do denso")
    p.add_argument("--dense-lr", type=float, required=True)
    p.add_argument("--sparsity", type=float, required=True)
    p.set_defaults(func=cmd_lr_rule)

    p = sub.add_parser("flops", help="FLOPs de treino por camada e totais")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("sweep-lr", help="varre o learning rate na grade peak_lr·2^m")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--m", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.set_defaults(func=cmd_sweep_lr)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SparseTrainError as e:
        print(f"Erro: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"Erro: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
