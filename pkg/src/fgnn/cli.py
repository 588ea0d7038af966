"""Command-line front end: ``fgnn {gen,solve,train,eval,replay}``.

Every command writes a manifest next to its outputs recording the argv,
the parsed flags, seeds, the package version and sha256 digests of all
inputs and outputs. ``fgnn replay MANIFEST`` reruns the command and
checks that every output digest is unchanged.

Exit codes: 0 ok, 1 replay mismatch, 2 usage, 3 IO, 4 solver
precondition violated on at least one instance.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .errors import CapacityError, DomainError, StructureError
from .exactparam import emulate_max_product
from .layers import load_stack, save_stack
from .learn import (ARCH_PRESETS, TrainConfig, build_arch, map_agreement, predict, train, write_log)
from .maxprod import run_max_product
from .pgm import brute_force_map, score, window_dp_map
from .synth import gen_dataset, read_dataset, write_dataset

MANIFEST_FORMAT = "fgnn-manifest-v1"
METHODS = ("brute", "dp", "maxprod", "fgnn-exact")
EXIT_OK, EXIT_MISMATCH, EXIT_USAGE, EXIT_IO, EXIT_SOLVER = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, command: str, argv, args, seeds, inputs, outputs) -> None:
    flags = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    man = {"format": MANIFEST_FORMAT, "command": command, "argv": list(argv), "flags": flags,
           "seeds": list(seeds), "version": __version__,
           "inputs": {p: sha256(p) for p in inputs}, "outputs": {p: sha256(p) for p in outputs}}
    with open(path, "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def _mean_std(values) -> tuple[float, float]:
    return (float(np.mean(values)), float(np.std(values))) if len(values) else (float("nan"), float("nan"))


# -- gen --------------------------------------------------------------------

def cmd_gen(args, argv) -> int:
    if not args.length >= args.window >= 2:
        raise UsageError(f"need --length >= --window >= 2, got {args.length} and {args.window}")
    if args.dataset != 3 and not 0 <= args.budget <= args.window:
        raise UsageError(f"--budget must lie in 0..{args.window}")
    if min(args.train, args.val, args.test) < 0:
        raise UsageError("split sizes must be >= 0")
    k = None if args.dataset == 3 else args.budget
    splits = gen_dataset(args.dataset, args.seed, args.train, args.val, args.test, args.length, args.window, k)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for name, part in zip(("train", "val", "test"), splits):
        path = os.path.join(args.out, f"{name}.jsonl")
        header = {"dataset_id": args.dataset, "seed": args.seed, "split": name, "count": len(part),
                  "chain_length": args.length, "window": args.window, "budget_k": k}
        write_dataset(path, part, header)
        outputs.append(path)
    write_manifest(os.path.join(args.out, "manifest.json"), "gen", argv, args, [args.seed], [], outputs)
    print(f"wrote {args.train}/{args.val}/{args.test} instances to {args.out}")
    return EXIT_OK


# -- solve ------------------------------------------------------------------

def _solve_one(job):
    method, iters, inst = job
    g = inst.graph
    try:
        if method == "brute":
            pred, _ = brute_force_map(g)
        elif method == "dp":
            pred, _ = window_dp_map(g, inst.meta["window"])
        elif method == "maxprod":
            _, pred = run_max_product(g, iters)
        else:
            _, pred = emulate_max_product(g, iters)
    except (CapacityError, StructureError, DomainError) as exc:
        return {"error": f"{type(exc).__name__}: {exc}"}
    return {"prediction": list(pred), "score": score(g, pred), "label_score": score(g, inst.label),
            "agreement": map_agreement(g, pred, inst.label)}


def cmd_solve(args, argv) -> int:
    if args.iters < 0:
        raise UsageError("--iters must be >= 0")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    _, instances = read_dataset(args.inp)
    jobs = [(args.method, args.iters, inst) for inst in instances]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_solve_one, jobs, chunksize=8))
    else:
        results = [_solve_one(j) for j in jobs]
    records = [{"index": i, **r} for i, r in enumerate(results)]
    _write_jsonl(args.out, records)
    scores = [r["agreement"] for r in records if "agreement" in r]
    errors = sum("error" in r for r in records)
    mean, std = _mean_std(scores)
    summary = {"method": args.method, "iters": args.iters, "instances": len(records), "errors": errors,
               "agreement_mean": mean, "agreement_std": std}
    summary_path = args.out + ".summary.json"
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(args.out + ".manifest.json", "solve", argv, args, [], [args.inp], [args.out, summary_path])
    print(f"{args.method}: agreement {mean:.4f} ± {std:.4f} over {len(scores)} instances"
          + (f", {errors} errors" if errors else ""))
    return EXIT_SOLVER if errors else EXIT_OK


# -- train / eval -----------------------------------------------------------

def _dims(instances):
    f = instances[0].features
    return f.node.shape[1], f.factor.shape[1], f.edge.shape[1]


def cmd_train(args, argv) -> int:
    try:
        cfg = TrainConfig(learning_rate=args.lr, decay=args.decay, epochs=args.epochs,
                          batch_size=args.batch_size, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _, data = read_dataset(args.data)
    if not data:
        raise UsageError(f"{args.data} holds no instances")
    val = read_dataset(args.val)[1] if args.val else None
    n_states = max(max(i.graph.cardinalities) for i in data)
    arch = build_arch(args.arch, _dims(data), seed=args.seed, n_states=n_states)
    stack, log = train(data, cfg, arch, val=val)
    save_stack(stack, args.out)
    log_path = args.out + ".log.jsonl"
    write_log(log_path, log)
    inputs = [args.data] + ([args.val] if args.val else [])
    write_manifest(args.out + ".manifest.json", "train", argv, args, [args.seed], inputs, [args.out, log_path])
    if log:
        print(f"epoch {log[-1]['epoch']}: train agreement {log[-1]['train_agreement']:.4f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    stack = load_stack(args.params)
    _, data = read_dataset(args.data)
    preds = predict(stack, data)
    scores = [map_agreement(i.graph, p, i.label) for p, i in zip(preds, data)]
    mean, std = _mean_std(scores)
    if args.out:
        _write_jsonl(args.out, [{"index": k, "prediction": list(p), "agreement": a}
                                for k, (p, a) in enumerate(zip(preds, scores))])
        write_manifest(args.out + ".manifest.json", "eval", argv, args, [], [args.params, args.data], [args.out])
    print(f"agreement {mean:.4f} ± {std:.4f} over {len(scores)} instances")
    return EXIT_OK


# -- replay -----------------------------------------------------------------

def cmd_replay(args, argv) -> int:
    with open(args.manifest) as fh:
        man = json.load(fh)
    if man.get("format") != MANIFEST_FORMAT:
        raise UsageError(f"{args.manifest} is not a run manifest")
    for path, digest in man["inputs"].items():
        if sha256(path) != digest:
            print(f"input changed since the recorded run: {path}")
            return EXIT_MISMATCH
    code = main(man["argv"])
    if code != EXIT_OK and code != EXIT_SOLVER:
        return code
    bad = [p for p, d in man["outputs"].items() if sha256(p) != d]
    for p in bad:
        print(f"output differs: {p}")
    if not bad:
        print(f"replayed {man['command']}: {len(man['outputs'])} outputs identical")
    return EXIT_MISMATCH if bad else EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fgnn", description="Factor graph MAP inference with FGNNs and max-product.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic chain dataset")
    g.add_argument("--dataset", type=int, choices=(1, 2, 3), required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train", type=int, default=0)
    g.add_argument("--val", type=int, default=0)
    g.add_argument("--test", type=int, default=0)
    g.add_argument("--length", type=int, default=30)
    g.add_argument("--window", type=int, default=8)
    g.add_argument("--budget", type=int, default=5, help="budget k for datasets 1 and 2")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("solve", help="run a MAP solver over a dataset file")
    s.add_argument("--method", choices=METHODS, required=True)
    s.add_argument("--iters", type=int, default=10, help="iterations for maxprod and fgnn-exact")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_solve)

    t = sub.add_parser("train", help="train an FGNN on a dataset file")
    t.add_argument("--data", required=True)
    t.add_argument("--val")
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--decay", type=float, default=0.98)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--arch", choices=ARCH_PRESETS, default="desk")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate trained parameters on a dataset file")
    e.add_argument("--params", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("replay", help="rerun a command from its manifest and compare outputs")
    r.add_argument("manifest")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fgnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"fgnn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
