"""``libra-toy`` command line.

Every command writes ``effective_config.json`` into its output directory.
Failures print one JSON line on stderr (``{"error": ..., "message": ...}``)
and exit 1; argument errors exit 2 with usage text.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from . import pipeline

log = logging.getLogger("libra_toy")


def _common(p: argparse.ArgumentParser, out_required=True) -> None:
    p.add_argument("--config", type=Path, help="JSON or key=value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=out_required, help="output directory")


def _routing(p: argparse.ArgumentParser) -> None:
    p.add_argument("--route-specials", action="store_true", help="route <BOI>/<EOI> through the vision side")
    p.add_argument("--route-output-proj", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--route-norms", action=argparse.BooleanOptionalAction, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="libra-toy", description="Toy decoupled vision-language model.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write synthetic train/eval corpora")
    _common(p)
    p.add_argument("--n", type=int, help="training images")
    p.add_argument("--n-eval", type=int, help="held-out images")

    p = sub.add_parser("train-tokenizer", help="fit the LFQ image tokenizer")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--eval-data", type=Path)

    for name, default in (("pretrain", "pretrain"), ("sft", "sft")):
        p = sub.add_parser(name, help=f"{name} stage (backbone frozen)" if name == "pretrain"
                           else "instruction tuning on answers")
        _common(p)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--eval-data", type=Path)
        p.add_argument("--tokenizer", type=Path, help="tokenizer checkpoint (sft: default beside --ckpt)")
        p.add_argument("--ckpt", type=Path,
                       help="pretrain: backbone checkpoint to reuse; sft: pretrained model checkpoint")
        p.add_argument("--stage", choices=("pretrain", "sft"), default=default)
        p.add_argument("--disable-contiguous", action="store_true", help="train on discrete patch inputs only")
        _routing(p)

    p = sub.add_parser("generate", help="greedy caption (or answer) for one image")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--tokenizer", type=Path)
    p.add_argument("--question")
    p.add_argument("--max-new", type=int, default=64)

    p = sub.add_parser("complete-image", help="generate the bottom half of an image")
    _common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--tokenizer", type=Path)
    p.add_argument("--keep", type=int, help="visible patches (default: top half)")
    p.add_argument("--disable-contiguous", action="store_true",
                   help="feed the visible patches through their discrete embeddings only")

    p = sub.add_parser("probe-attn", help="attention differences and answer heat maps")
    _common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--tokenizer", type=Path)
    p.add_argument("-n", "--samples", type=int, default=10)
    p.add_argument("--sft", action="store_true", help="query the SFT answer token instead of the caption color")

    p = sub.add_parser("verify", help="run the gradient, oracle and invariant suites")
    _common(p, out_required=False)
    p.add_argument("--suite", action="append", choices=sorted(pipeline.SUITES))
    return ap


def _conf(args) -> dict:
    overrides = pipeline.load_config(args.config) if getattr(args, "config", None) else {}
    model = overrides.setdefault("model", {})
    if getattr(args, "route_specials", False):
        model["route_specials"] = True
    for flag in ("route_output_proj", "route_norms"):
        if getattr(args, flag, None) is not None:
            model[flag] = getattr(args, flag)
    data = overrides.setdefault("data", {})
    if getattr(args, "n", None) is not None:
        data["n_train"] = args.n
    if getattr(args, "n_eval", None) is not None:
        data["n_eval"] = args.n_eval
    return pipeline.resolve(overrides)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def run(args) -> int:
    cmd = args.command
    if cmd == "gen-data":
        _emit(pipeline.gen_data_run(args.out, args.seed, _conf(args)))
    elif cmd == "train-tokenizer":
        _emit({"tokenizer": str(pipeline.tokenizer_run(args.data, args.out, args.seed, _conf(args),
                                                        args.eval_data))})
    elif cmd in ("pretrain", "sft"):
        conf = _conf(args)
        if args.stage == "pretrain":
            if args.tokenizer is None:
                raise ValueError("pretrain needs --tokenizer")
            res = pipeline.pretrain_run(args.data, args.tokenizer, args.out, args.seed, conf, backbone=args.ckpt,
                                        eval_data=args.eval_data, route_specials=args.route_specials,
                                        disable_contiguous=args.disable_contiguous)
        else:
            if args.ckpt is None:
                raise ValueError("sft needs --ckpt (a pretrained model checkpoint)")
            res = pipeline.sft_run(args.data, args.ckpt, args.out, args.seed, conf, tokenizer=args.tokenizer)
        _emit(res)
    elif cmd == "generate":
        from .imgtok import read_ppm

        model, tok = pipeline.load_pair(args.ckpt, args.tokenizer)
        print(pipeline.generate(model, tok, read_ppm(args.image), args.question, args.max_new))
    elif cmd == "complete-image":
        _emit(pipeline.complete_image_run(args.ckpt, args.image, args.out, args.keep, args.disable_contiguous,
                                          args.tokenizer))
    elif cmd == "probe-attn":
        _emit(pipeline.probe_run(args.ckpt, args.data, args.out, args.samples, args.tokenizer, args.sft))
    elif cmd == "verify":
        passed, total, results = pipeline.verify_run(args.seed, args.out, args.suite)
        for r in results:
            print(r.line())
        print(f"PASS {passed}/{total}")
        return 0 if passed == total else 1
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("LIBRA_TOY_THREADS")
    try:
        if threads is not None:
            from threadpoolctl import threadpool_limits

            limit = threadpool_limits(limits=int(threads))
        else:
            limit = nullcontext()
        with limit:
            return run(args)
    except (OSError, ValueError, KeyError, RuntimeError, FloatingPointError) as e:
        print(json.dumps({"error": type(e).__name__, "command": args.command, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
