"""Command-line entry point: ``mamba-ghost <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import ghm1
from .baselines import magnitude_score
from .data import load_text_calibration
from .errors import GhostError
from .evaluate import divergence
from .export import dumps, save_mask, write_channel_loss_csv, write_score_csv
from .model import PRECISIONS, ModelConfig, init_model, state_memory_bytes
from .pipeline import GHOST_MODES, METHODS, compact_state_bytes, sequential_prune
from .scorer import ghost_tables, pool_and_threshold, prune_count

log = logging.getLogger("mamba_ghost")

THREADS_ENV = "MAMBA_GHOST_THREADS"


def _json_arg(value: str) -> dict:
    """Accept either a path to a JSON file or an inline JSON object."""
    path = Path(value)
    text = path.read_text(encoding="utf-8") if path.is_file() else value
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GhostError(f"not a JSON file or JSON object: {value!r} ({exc})") from None
    if not isinstance(data, dict):
        raise GhostError("config JSON must be an object")
    return data


def _load_model(path: str, precision: str):
    return ghm1.load(path, dtype=PRECISIONS[precision])


def _calib_tokens(args, config: ModelConfig):
    calib = load_text_calibration(args.calib, args.seq_len, args.max_samples, config.vocab)
    log.info("calibration: %d x %d bytes from %s", calib.n_samples, calib.seq_len, calib.source)
    return calib.tokens


def _write_text(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8", newline="")


def cmd_init(args) -> int:
    config = ModelConfig.from_dict(_json_arg(args.config_json)) if args.config_json else ModelConfig()
    weights = init_model(config, args.seed)
    ghm1.save(weights, args.out)
    print(f"wrote {args.out} ({config.n_layers} layers, fingerprint {config.fingerprint()[:12]})")
    return 0


def cmd_score(args) -> int:
    weights = _load_model(args.model, args.precision)
    cfg = weights.config
    if args.method in GHOST_MODES:
        if not args.calib:
            raise GhostError(f"--calib is required for --method {args.method}")
        tables = ghost_tables(weights, _calib_tokens(args, cfg), GHOST_MODES[args.method])
        method_col = None
    else:
        tables = [magnitude_score(lw, cfg, j) for j, lw in enumerate(weights.layers)]
        method_col = args.method
    keeps = [pool_and_threshold(t, args.sparsity)[0] for t in tables]
    _write_text(args.out, write_score_csv(None, tables, keeps, method_col))
    return 0


def cmd_prune(args) -> int:
    weights = _load_model(args.model, args.precision)
    cfg = weights.config
    tokens = _calib_tokens(args, cfg)
    eval_tokens = None
    if args.eval_set:
        eval_tokens = load_text_calibration(args.eval_set, args.seq_len, args.max_samples, cfg.vocab).tokens
    pruned, mask, report = sequential_prune(weights, tokens, args.method, args.sparsity, args.seed,
                                            batch_size=args.batch_size, eval_tokens=eval_tokens)
    if args.compact:
        dense_bytes, _ = state_memory_bytes(cfg, 4)
        report.extra["compact"] = {
            "dense_state_bytes": dense_bytes * cfg.n_layers,
            "pruned_state_bytes": compact_state_bytes(cfg, mask, 4),
        }
    if args.out_model:
        ghm1.save(pruned.astype(np.float32), args.out_model)
    if args.out_mask:
        save_mask(args.out_mask, mask, cfg)
    if args.out_report:
        Path(args.out_report).write_text(dumps(report.to_dict()), encoding="utf-8", newline="")
    print(report.table())
    return 0


def cmd_eval(args) -> int:
    dense = _load_model(args.dense, args.precision)
    pruned = _load_model(args.pruned, args.precision)
    tokens = load_text_calibration(args.eval_set, args.seq_len, args.max_samples, dense.config.vocab).tokens
    rep = divergence(dense, pruned, tokens)
    _write_text(args.out, dumps(rep.to_dict()))
    return 0


def cmd_oracle(args) -> int:
    from . import oracle

    config = ModelConfig.from_dict(_json_arg(args.config_json)) if args.config_json else ModelConfig()
    if args.check == "identity":
        result = oracle.check_identity(config, args.seed, args.samples, args.seq_len)
        rows = result.pop("rows")
        if args.out_csv:
            write_channel_loss_csv(args.out_csv, rows)
        line = f"max_rel_err={result['max_rel_err']:.3e} tol={result['tolerance']:.0e} channels={result['channels']}"
    elif args.check == "lti":
        result = oracle.check_lti(seed=args.seed)
        line = (f"empirical={result['empirical']:.6f} expected={result['expected']:.6f} "
                f"rel_err={result['rel_err']:.3e} tol={result['tolerance']}")
    else:
        result = oracle.check_phantom(config, args.seed, args.samples, args.seq_len)
        line = (f"mse_ghost={result['mse_ghost']:.6g} mse_magnitude={result['mse_magnitude']:.6g} "
                f"ghost_keeps_phantom={result['ghost_keeps_phantom']} "
                f"magnitude_prunes_phantom={result['magnitude_prunes_phantom']}")
    print(f"{'PASS' if result['passed'] else 'FAIL'} {args.check}: {line}")
    return 0 if result["passed"] else 1


def cmd_footprint(args) -> int:
    if args.config:
        cfg = ModelConfig.from_dict(_json_arg(args.config))
        heads, head_dim, state_dim, layers = cfg.heads, cfg.head_dim, cfg.state_dim, cfg.n_layers
        groups = cfg.groups
    else:
        heads, head_dim, state_dim, layers = args.heads, args.head_dim, args.state_dim, args.layers
        groups = args.groups
        if heads % groups:
            raise GhostError("--heads must be divisible by --groups")
        cfg = ModelConfig(model_dim=heads * head_dim, expand=1, heads=heads, head_dim=head_dim,
                          groups=groups, state_dim=state_dim, n_layers=layers)
    per_layer, total = state_memory_bytes(cfg, args.bytes_per_scalar)
    rows = [("heads", heads), ("head_dim", head_dim), ("state_dim", state_dim), ("layers", layers),
            ("bytes_per_scalar", args.bytes_per_scalar),
            ("per_layer_bytes", per_layer), ("per_layer_MB", f"{per_layer / 1e6:.1f}"),
            ("total_bytes", total), ("total_MB", f"{total / 1e6:.1f}")]
    if args.sparsity is not None:
        m = prune_count(args.sparsity, groups * state_dim)
        kept = (groups * state_dim - m) * (heads // groups) * head_dim * args.bytes_per_scalar
        rows += [("sparsity", args.sparsity), ("pruned_per_layer_bytes", kept),
                 ("pruned_total_bytes", kept * layers)]
    for key, value in rows:
        print(f"{key}\t{value}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--precision", choices=sorted(PRECISIONS), default=argparse.SUPPRESS,
                        help="fast = float32 compute, oracle = float64 (default: fast)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help=f"BLAS thread cap (env {THREADS_ENV} also works)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for all randomness (default 0)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="mamba-ghost", parents=[common],
                                     description="Mamba2 state-dimension pruning with GHOST saliency")
    sub = parser.add_subparsers(dest="command", required=True)

    def calib_flags(p, required):
        p.add_argument("--calib", required=required, help="text file chunked into byte sequences")
        p.add_argument("--seq-len", type=int, default=256)
        p.add_argument("--max-samples", type=int, default=128)

    p = sub.add_parser("init", parents=[common], help="write a random model as GHM1")
    p.add_argument("--config-json", help="config as a JSON file or inline JSON object")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("score", parents=[common], help="per-channel score CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--method", choices=("ghost", "ghost-p", "ghost-q", "magnitude"), default="ghost")
    p.add_argument("--sparsity", type=float, default=0.5, help="kappa used for the 'kept' column")
    p.add_argument("--out", default="-")
    calib_flags(p, required=False)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("prune", parents=[common], help="sequential layer-wise pruning")
    p.add_argument("--model", required=True)
    p.add_argument("--method", choices=METHODS, default="ghost")
    p.add_argument("--sparsity", type=float, default=0.5)
    p.add_argument("--out-model")
    p.add_argument("--out-mask")
    p.add_argument("--out-report")
    p.add_argument("--eval-set", help="optional text file for before/after divergence in the report")
    p.add_argument("--batch-size", type=int, default=None, help="calibration shard size")
    p.add_argument("--compact", action="store_true",
                   help="add the hypothetical compacted state footprint to the report")
    calib_flags(p, required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", parents=[common], help="dense vs pruned divergence JSON")
    p.add_argument("--dense", required=True)
    p.add_argument("--pruned", required=True)
    p.add_argument("--eval-set", required=True)
    p.add_argument("--seq-len", type=int, default=256)
    p.add_argument("--max-samples", type=int, default=128)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", parents=[common], help="run an independent correctness check")
    p.add_argument("--check", choices=("identity", "lti", "phantom"), required=True)
    p.add_argument("--config-json")
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=256)
    p.add_argument("--out-csv", help="identity: write the per-channel loss table here")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("footprint", parents=[common], help="recurrent-state memory per token")
    p.add_argument("--config", help="model config JSON (file or inline)")
    p.add_argument("--heads", type=int, default=64)
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--state-dim", type=int, default=128)
    p.add_argument("--groups", type=int, default=1)
    p.add_argument("--layers", type=int, default=48)
    p.add_argument("--bytes-per-scalar", type=int, default=4, choices=(2, 4, 8))
    p.add_argument("--sparsity", type=float, default=None)
    p.set_defaults(func=cmd_footprint)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.precision = getattr(args, "precision", "fast")
    args.seed = getattr(args, "seed", 0)
    threads = getattr(args, "threads", None) or os.environ.get(THREADS_ENV)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=int(threads)):
                return args.func(args)
        return args.func(args)
    except (GhostError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
