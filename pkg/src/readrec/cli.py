"""``readrec`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 artifact/digest error.
"""

from __future__ import annotations

import argparse
import logging
import sys

import yaml

from .errors import ConfigError, ReadError

SUBCOMMANDS = ("prepare", "train", "build-memory", "train-retrieval", "eval", "inspect")
SWEEP_KEYS = {"k": "K", "lambda": "lambda", "lam": "lambda", "rho": "rho"}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_sweep(text: str) -> tuple[str, list]:
    if "=" not in text:
        raise ConfigError(f"--sweep expects AXIS=V1,V2,..., got {text!r}")
    axis, values = text.split("=", 1)
    key = SWEEP_KEYS.get(axis.strip().lower())
    if key is None:
        raise ConfigError(f"unknown sweep axis {axis!r}; use K, lambda or rho")
    try:
        parsed = [int(v) if key == "K" else float(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad sweep values {values!r}") from None
    if not parsed:
        raise ConfigError("sweep grid is empty")
    return key, parsed


def _overrides(args: argparse.Namespace) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    if args.seeds is not None:
        out["eval.seeds"] = list(range(args.seeds))
    if args.threads is not None:
        out["threads"] = args.threads
    if args.literal_alpha:
        out["fusion.literal_alpha"] = True
    if args.fixed_alpha is not None:
        out["fusion.fixed_alpha"] = args.fixed_alpha
    if args.attention is not None:
        out["retrieval.attention"] = args.attention
    if args.lam is not None:
        out["retrieval.lam"] = args.lam
    if args.k is not None:
        out["retrieval.k"] = args.k
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--force", action="store_true", help="overwrite existing stage outputs")
    common.add_argument("--seeds", type=int, help="use seeds 0..N-1")
    common.add_argument("--threads", type=int, help="cap on intra-op threads")
    common.add_argument("--literal-alpha", action="store_true",
                        help="use the asymmetric printed fusion-weight formula instead of the symmetric one")
    common.add_argument("--fixed-alpha", type=float, help="fixed fusion weight (disables the entropy gate)")
    common.add_argument("--attention", choices=("learned", "cosine"),
                        help="'cosine' replaces learned projections with a softmax over cosine similarities")
    common.add_argument("--lambda", dest="lam", type=float, help="alignment-loss weight")
    common.add_argument("-k", "--k", dest="k", type=int, help="number of retrieved neighbours")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key, e.g. fusion.rho=0.05")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="readrec", description="Retrieve-then-adapt pipeline for sequential recommendation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("prepare", parents=[common], help="filter and split a raw interaction log")
    sub.add_parser("train", parents=[common], help="train the backbone encoder")
    sub.add_parser("build-memory", parents=[common], help="build the collaborative memory")
    sub.add_parser("train-retrieval", parents=[common], help="train the cross-attention projections")
    ev = sub.add_parser("eval", parents=[common], help="full-ranking evaluation")
    ev.add_argument("--mode", choices=("backbone", "read"), default="read")
    ev.add_argument("--sweep", metavar="AXIS=V1,V2,...", help="sweep K, lambda or rho")
    ins = sub.add_parser("inspect", parents=[common], help="neighbour report for one user")
    ins.add_argument("user", help="raw user id as it appears in the interaction file")
    ins.add_argument("--seed", type=int, default=None, help="which seed's artifacts (default: first configured)")
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    # deferred so `--help` stays fast
    from .config import load_config
    from .pipeline import Pipeline

    try:
        cfg = load_config(args.config, _overrides(args))
        pipe = Pipeline(cfg)
        seeds = cfg.eval.seeds
        if args.command == "prepare":
            ds = pipe.prepare(force=args.force)
            print(f"wrote {pipe.layout.dataset}")
            print(ds.stats.format())
        elif args.command == "train":
            logs = pipe.train(seeds, force=args.force)
            for seed, records in logs.items():
                best = max((r for r in records if "ND@10" in r), key=lambda r: r["ND@10"], default=None)
                print(f"seed {seed}: {len(records)} epochs, best validation {best}")
        elif args.command == "build-memory":
            for seed, size in pipe.build_memory(seeds, force=args.force).items():
                print(f"seed {seed}: memory with {size} entries")
        elif args.command == "train-retrieval":
            for seed, records in pipe.train_retrieval(seeds, force=args.force).items():
                last = records[-1] if records else {}
                print(f"seed {seed}: {len(records)} epochs, last {last}")
        elif args.command == "eval":
            axis, values = _parse_sweep(args.sweep) if args.sweep else (None, None)
            result = pipe.evaluate(args.mode, seeds, axis, values)
            print(result.to_text(), end="")
        elif args.command == "inspect":
            seed = args.seed if args.seed is not None else seeds[0]
            print(pipe.inspect(args.user, seed), end="")
    except ReadError as exc:
        print(f"readrec {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
