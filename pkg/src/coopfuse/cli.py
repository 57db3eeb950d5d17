"""Command-line entry points.

    coopfuse run    --config cfg.json --out dir [--scenario s.json] [--params p.catp]
    coopfuse train  --config cfg.json --out dir
    coopfuse ablate --config cfg.json --out dir
    coopfuse sweep  --axis latency|retention|drop --config cfg.json --out dir

All subcommands accept --seed to override the config seed. Outputs land in
the --out directory: metrics.csv always; train additionally writes
loss_curve.csv and params.catp; run writes trace.csv.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .pipeline import (ConfigError, Pipeline, PipelineConfig, config_label,
                       evaluate, load_config)
from .sweeps import (ablation_suite, history_loss_sweep, latency_sweep,
                     metric_row, retention_sweep, write_loss_curve_csv,
                     write_metrics_csv, write_trace_csv, DEFAULT_RETENTIONS)
from .training import DivergenceError, train
from .world import load_scenario


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coopfuse",
                                     description="multi-agent fusion desk-scale harness")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="pipeline config JSON")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")

    p_run = sub.add_parser("run", help="evaluate one configuration")
    common(p_run)
    p_run.add_argument("--scenario", type=Path, default=None, help="scenario JSON")
    p_run.add_argument("--params", type=Path, default=None, help="trained params (.catp)")

    p_train = sub.add_parser("train", help="train and serialize parameters")
    common(p_train)

    p_ablate = sub.add_parser("ablate", help="run the 7-combination stage ablation")
    common(p_ablate)

    p_sweep = sub.add_parser("sweep", help="latency / retention / drop sweeps")
    common(p_sweep)
    p_sweep.add_argument("--axis", choices=("latency", "retention", "drop"),
                         required=True)
    return parser


def _load_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig().validate()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.training.seed = args.seed
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "run":
            pipe = Pipeline(cfg)
            if args.params:
                pipe.load(args.params)
            scenario = load_scenario(args.scenario) if args.scenario else None
            trace: list = []
            rec = evaluate(pipe, config_id=config_label(cfg), scenario=scenario,
                           trace_rows=trace)
            write_metrics_csv(args.out / "metrics.csv",
                              [metric_row(rec, cfg.channel, cfg.retention)])
            write_trace_csv(args.out / "trace.csv", trace)
            print(f"iou={rec.occupancy_iou:.4f} mse={rec.mse_to_clean:.6f}")
        elif args.command == "train":
            result = train(cfg)
            result.pipeline.save(args.out / "params.catp")
            write_loss_curve_csv(args.out / "loss_curve.csv", result.loss_curve)
            rec = evaluate(result.pipeline, config_id=config_label(cfg))
            write_metrics_csv(args.out / "metrics.csv",
                              [metric_row(rec, cfg.channel, cfg.retention)])
            first, last = result.loss_curve[0][1], result.loss_curve[-1][1]
            print(f"trained {cfg.training.steps} steps: loss {first:.4f} -> {last:.4f}; "
                  f"iou={rec.occupancy_iou:.4f}")
        elif args.command == "ablate":
            _, rows = ablation_suite(cfg)
            write_metrics_csv(args.out / "metrics.csv", rows)
            print(f"wrote {len(rows)} ablation rows")
        elif args.command == "sweep":
            if args.axis == "latency":
                _, rows = latency_sweep(cfg, [0, 1, 2, 3, 4, 5])
            elif args.axis == "retention":
                _, rows = retention_sweep(cfg, list(DEFAULT_RETENTIONS))
            else:
                _, rows = history_loss_sweep(cfg, [0.0, 0.2, 0.4, 0.6, 0.8])
            write_metrics_csv(args.out / "metrics.csv", rows)
            print(f"wrote {len(rows)} sweep rows")
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return 3
    except (ConfigError, ValueError, KeyError, OSError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
