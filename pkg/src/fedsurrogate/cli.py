"""Command-line interface: ``run``, ``sweep``, and ``ablate``.

Flags mirror the experiment configuration; a YAML config file may supply
any subset of fields and explicit command-line flags override it. The
``FEDSURROGATE_OUTPUT_DIR`` environment variable overrides the output
directory. Exit status is nonzero on any validation failure.

BLAS thread pools are pinned to a single thread before numpy is first
imported so results are bit-identical regardless of host parallelism.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys

for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    os.environ.setdefault(_var, "1")

import yaml  # noqa: E402

from .attacks import AttackConfig  # noqa: E402
from .defense import AggregationWeights, FilterConfig, LcaConfig  # noqa: E402
from .harness import (  # noqa: E402
    ATTACKS,
    DEFENSES,
    DONOR_METRICS,
    DatasetSpec,
    ExperimentConfig,
    ablate,
    config_hash,
    emit_report,
    run_experiment,
    sweep,
)

OUTPUT_DIR_ENV = "FEDSURROGATE_OUTPUT_DIR"

_SCALARS = {
    "n_clients": int, "mcr": float, "pdr": float, "alpha": float,
    "rounds": int, "benign_epochs": int, "malicious_epochs": int,
    "lr": float, "batch": int, "attack_kind": str, "defense": str,
    "donor_metric": str, "variant": str, "seed": int,
    "warmup_epochs": int, "warmup_per_class": int,
}
_ATTACK_FIELDS = {
    "poison_rate": float, "neurotoxin_ratio": float, "csa_lambda": float,
    "cla_top_k": int, "boost": float,
}
_FILTER_FIELDS = {"zeta": float, "iqr_multiplier": float}
_DATASET_FIELDS = {
    "num_classes": int, "dim": int, "per_class": int, "test_per_class": int,
    "spread": float, "background": float, "images_path": str,
    "labels_path": str, "test_images_path": str, "test_labels_path": str,
}


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file; flags override it")
    p.add_argument("--output-dir", default=".",
                   help=f"output directory (overridden by ${OUTPUT_DIR_ENV})")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    for name, typ in _SCALARS.items():
        flag = "--" + name.replace("_", "-")
        if name == "attack_kind":
            p.add_argument(flag, type=typ, choices=ATTACKS)
        elif name == "defense":
            p.add_argument(flag, type=typ, choices=DEFENSES)
        elif name == "donor_metric":
            p.add_argument(flag, type=typ, choices=DONOR_METRICS)
        else:
            p.add_argument(flag, type=typ)
    for name, typ in _ATTACK_FIELDS.items():
        p.add_argument("--" + name.replace("_", "-"), type=typ)
    for name, typ in _FILTER_FIELDS.items():
        p.add_argument("--" + name.replace("_", "-"), type=typ)
    for name, typ in _DATASET_FIELDS.items():
        p.add_argument("--dataset-" + name.replace("_", "-"), type=typ,
                       dest="dataset_" + name)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsurrogate",
        description="Deterministic federated-learning backdoor-defense simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one experiment")
    _add_common_flags(p_run)
    p_sweep = sub.add_parser("sweep", help="run a parameter sweep")
    _add_common_flags(p_sweep)
    p_sweep.add_argument("--parameter", required=True,
                         help="config field to sweep (e.g. zeta, mcr, n_clients)")
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated sweep values")
    p_ablate = sub.add_parser("ablate", help="run the pipeline ablation variants")
    _add_common_flags(p_ablate)
    return parser


def _merge_section(file_cfg: dict, args: argparse.Namespace, fields: dict,
                   section: str | None = None, prefix: str = "") -> dict:
    out: dict = {}
    file_section = file_cfg.get(section, {}) if section else file_cfg
    if section and not isinstance(file_section, dict):
        raise ValueError(f"config section {section!r} must be a mapping")
    for name, typ in fields.items():
        if name in file_section:
            out[name] = typ(file_section[name])
        cli_val = getattr(args, prefix + name, None)
        if cli_val is not None:
            out[name] = cli_val
    return out


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Build an ExperimentConfig from the config file plus CLI overrides."""
    file_cfg: dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ValueError("config file must contain a mapping")
        file_cfg = loaded
    known = (
        set(_SCALARS) | {"attack", "filter", "dataset", "zeta", "iqr_multiplier"}
    )
    unknown = set(file_cfg) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")

    kwargs = _merge_section(file_cfg, args, _SCALARS)
    attack_kwargs = _merge_section(file_cfg, args, _ATTACK_FIELDS, "attack")
    filter_kwargs = _merge_section(file_cfg, args, _FILTER_FIELDS, "filter")
    dataset_kwargs = _merge_section(file_cfg, args, _DATASET_FIELDS, "dataset",
                                    prefix="dataset_")
    default = ExperimentConfig()
    if attack_kwargs:
        kwargs["attack"] = dataclasses.replace(default.attack, **attack_kwargs)
    if filter_kwargs:
        kwargs["filter"] = dataclasses.replace(default.filter, **filter_kwargs)
    if dataset_kwargs:
        kwargs["dataset"] = dataclasses.replace(default.dataset, **dataset_kwargs)
    return dataclasses.replace(default, **kwargs)


def _parse_values(parameter: str, raw: str) -> list:
    values: list = []
    for chunk in raw.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if parameter in ("donor_metric", "attack_kind", "defense"):
            values.append(chunk)
        elif parameter in ("n_clients", "seed"):
            values.append(int(chunk))
        else:
            values.append(float(chunk))
    if not values:
        raise ValueError("empty sweep value list")
    return values


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out_dir = os.environ.get(OUTPUT_DIR_ENV) or args.output_dir
        os.makedirs(out_dir, exist_ok=True)
        ext = args.format
        if args.command == "run":
            report = run_experiment(cfg)
            path = os.path.join(out_dir, f"run_{config_hash(cfg)}.{ext}")
            emit_report(report, path, format=ext)
            print(f"wrote {path}")
            print(f"final MTA {report.final_mta:.4f}  final ASR {report.final_asr:.4f}  "
                  f"TPR {report.tpr:.4f}  FPR {report.fpr:.4f}")
        elif args.command == "sweep":
            values = _parse_values(args.parameter, args.values)
            reports = sweep(cfg, args.parameter, values)
            for value, report in zip(values, reports):
                tag = str(value).replace(".", "p")
                path = os.path.join(
                    out_dir, f"sweep_{args.parameter}_{tag}_{config_hash(report.config)}.{ext}"
                )
                emit_report(report, path, format=ext)
                print(f"{args.parameter}={value}: ASR {report.final_asr:.4f} "
                      f"TPR {report.tpr:.4f} FPR {report.fpr:.4f} -> {path}")
        else:
            reports = ablate(cfg)
            for report in reports:
                path = os.path.join(
                    out_dir,
                    f"ablate_{report.config.variant}_{config_hash(report.config)}.{ext}",
                )
                emit_report(report, path, format=ext)
                print(f"variant={report.config.variant}: MTA {report.final_mta:.4f} "
                      f"ASR {report.final_asr:.4f} -> {path}")
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
