"""Command-line front end.

Commands: init-model, generate, calibrate, ablate. Every command writes its
artifacts as files plus a manifest.json capturing the resolved parameters,
seeds, and input digests; identical manifests imply byte-identical outputs
(latency.csv, being wall-clock, is the one documented exception).

Exit codes: 0 success, 2 validation failure, 3 calibration found no layer,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analytics import layer_attention_table, output_attention_table, vtw_cost_report
from .calibration import CalibrationConfig, search_withdrawal_layer
from .dataset import load_records, record_sequence
from .model import ModelConfig, init_model
from .numerics import OpCounter, kl_divergence, softmax_row
from .sequence import SegmentType
from .validation import ValidationError
from .weights_io import container_checksum, load_weights, save_weights, tensor_checksums
from .withdrawal import (
    ABLATION_MODES,
    WithdrawalPolicy,
    run_ablation,
    vtw_decode,
    vtw_prefill,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NOT_FOUND = 3
EXIT_IO = 4


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, params: dict, inputs: dict,
                    seeds: dict) -> None:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "parameters": params,
        "seeds": seeds,
        "inputs": {
            name: {"path": str(p), "sha256": _sha256_file(Path(p))}
            for name, p in inputs.items()
        },
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _load_model(path: str):
    return load_weights(path)


def cmd_init_model(args) -> int:
    doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    config = ModelConfig.from_dict(doc)
    weights = init_model(config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(weights, out)
    for name, shape, digest in tensor_checksums(weights):
        print(f"{name}  {'x'.join(map(str, shape))}  {digest}")
    print(f"container  {container_checksum(weights)}")
    _write_manifest(
        out.parent, "init-model",
        params={"out_name": out.name}, inputs={"config": args.config},
        seeds={"model_seed": config.seed},
    )
    return EXIT_OK


def cmd_generate(args) -> int:
    weights = _load_model(args.model)
    config = weights.config
    records = load_records(args.dataset)
    k = args.k if args.k is not None else config.num_layers + 1
    policy = WithdrawalPolicy(k=k, pe_policy=args.pe)
    policy.validate(config.num_layers)
    stop_id = config.vocab_size - 1 if args.stop_id is None else args.stop_id
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    merged_profile = None
    cost_reports = []
    latencies = []
    lines = []
    for index, record in enumerate(records):
        seq = record_sequence(record, weights)
        budget = record.max_new_tokens if args.max_new is None else args.max_new
        counter = OpCounter() if args.count_flops else None
        started = time.perf_counter()
        state = vtw_prefill(weights, seq, policy, capture=args.profile, counter=counter)
        state.counter = None  # measured cost covers the prefill only
        ids = vtw_decode(weights, state, budget, stop_id)
        elapsed = time.perf_counter() - started
        lines.append(json.dumps(
            {"record_index": index, "generated_ids": ids}, sort_keys=True
        ))
        if args.profile:
            if merged_profile is None:
                merged_profile = state.profile
            else:
                merged_profile.extend(state.profile)
        if args.count_flops:
            base_counter = OpCounter()
            vtw_prefill(weights, seq, None, counter=base_counter)
            report = vtw_cost_report(
                config, len(seq), seq.n_vis, k, measured=(base_counter, counter)
            )
            cost_reports.append(json.loads(report.to_json()))
        if args.latency:
            latencies.append((index, elapsed))

    (out_dir / "generations.jsonl").write_text(
        "\n".join(lines) + "\n", encoding="utf-8"
    )
    if args.profile and merged_profile is not None:
        (out_dir / "layer_attention.csv").write_text(
            layer_attention_table(merged_profile), encoding="utf-8"
        )
        (out_dir / "output_attention.csv").write_text(
            output_attention_table(merged_profile), encoding="utf-8"
        )
    if args.count_flops:
        (out_dir / "cost_report.json").write_text(
            json.dumps(cost_reports, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    if args.latency:
        rows = "".join(f"{i},{ms * 1000.0:.3f}\n" for i, ms in latencies)
        (out_dir / "latency.csv").write_text("record_index,wall_ms\n" + rows,
                                             encoding="utf-8")

    _write_manifest(
        out_dir, "generate",
        params={
            "k": k, "pe": args.pe, "max_new": args.max_new, "stop_id": stop_id,
            "profile": args.profile, "count_flops": args.count_flops,
            "latency": args.latency,
        },
        inputs={"model": args.model, "dataset": args.dataset},
        seeds={"model_seed": config.seed},
    )
    return EXIT_OK


def cmd_calibrate(args) -> int:
    weights = _load_model(args.model)
    records = load_records(args.dataset)
    config = CalibrationConfig(
        subset_size=args.subset_size, eta=args.eta, sampling_seed=args.seed
    )
    report = search_withdrawal_layer(weights, records, config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "calibration.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / "per_k.csv").write_text(report.per_k_csv(), encoding="utf-8")
    _write_manifest(
        out_dir, "calibrate",
        params={"eta": args.eta, "subset_size": args.subset_size},
        inputs={"model": args.model, "dataset": args.dataset},
        seeds={"model_seed": weights.config.seed, "sampling_seed": args.seed},
    )
    if report.chosen_k is None:
        print(
            "no withdrawal layer satisfied the threshold; "
            f"largest candidate mean divergence was "
            f"{max(report.per_k.values()):.6g} vs eta {args.eta}; raise eta",
            file=sys.stderr,
        )
        return EXIT_NOT_FOUND
    print(f"chosen_k {report.chosen_k}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    weights = _load_model(args.model)
    config = weights.config
    records = load_records(args.dataset)
    k = args.k if args.k is not None else config.num_layers + 1
    if args.mode != "no_image":
        WithdrawalPolicy(k=k).validate(config.num_layers)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = ["record_index,kl_vs_baseline"]
    for index, record in enumerate(records):
        baseline = vtw_prefill(weights, record_sequence(record, weights)).last_logits
        logits = run_ablation(weights, record, args.mode, k)
        div = kl_divergence(softmax_row(baseline), softmax_row(logits))
        rows.append(f"{index},{div!r}")
    (out_dir / "ablation.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    _write_manifest(
        out_dir, "ablate",
        params={"mode": args.mode, "k": k},
        inputs={"model": args.model, "dataset": args.dataset},
        seeds={"model_seed": config.seed},
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vtwlite",
        description="Toy multimodal decoder with vision-token withdrawal",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-model", help="create a seeded weight container")
    p.add_argument("--config", required=True, help="model config JSON path")
    p.add_argument("--out", required=True, help="output .vtwm path")
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("generate", help="greedy generation over a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--k", type=int, default=None,
                   help="withdrawal layer; omit for no withdrawal")
    p.add_argument("--pe", choices=["keep", "rearrange"], default="keep")
    p.add_argument("--max-new", type=int, default=None,
                   help="override per-record token budgets")
    p.add_argument("--stop-id", type=int, default=None,
                   help="stop token id (default: vocab_size - 1)")
    p.add_argument("--profile", action="store_true",
                   help="write attention share tables")
    p.add_argument("--count-flops", action="store_true",
                   help="write per-record cost reports")
    p.add_argument("--latency", action="store_true",
                   help="write wall-clock per record (non-deterministic)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("calibrate", help="search the withdrawal layer")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--eta", type=float, default=0.003)
    p.add_argument("--subset-size", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("ablate", help="per-record divergence under a setting")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=list(ABLATION_MODES), required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
