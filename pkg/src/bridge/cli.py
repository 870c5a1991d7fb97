"""Command-line entry points: ``bridge train|eval|synth|gradcheck``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, load_run_dataset
from .data import IngestError, SyntheticSpecError, generate_synthetic, load_synthetic_spec, write_dataset
from .metrics import EvalReport
from .model import BridgeModel
from .tasks import (NegativeSamplingError, TrainingError, evaluate_fraud, evaluate_link, link_loss,
                    score_link, train)

log = logging.getLogger("bridge")

GRADCHECK_MAX_NODES = 8
GRADCHECK_MAX_LEN = 6
GRADCHECK_TOL = 1e-4

EXIT_USAGE, EXIT_TRAIN, EXIT_CHECKPOINT, EXIT_SAMPLING, EXIT_GRADCHECK = 2, 3, 4, 5, 6


class DigestMismatch(CheckpointError):
    pass


def write_history(path: str, history: list[float], digest: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config_digest={digest}\n")
        for epoch, loss in enumerate(history):
            fh.write(f"{epoch}\t{loss!r}\n")


def evaluate(cfg: RunConfig, ds, model: BridgeModel, split: str) -> EvalReport:
    if cfg.task == "link":
        return evaluate_link(ds, model, split, cfg.seed, cfg.eval.negatives, cfg.eval.hits, cfg.digest)
    return evaluate_fraud(ds, model, split, cfg.seed, cfg.digest)


def run_train(cfg: RunConfig, out_dir: str | None = None) -> dict:
    """Train, checkpoint, and evaluate the reloaded checkpoint on the valid split."""
    out_dir = out_dir or (cfg.resolve(cfg.out_dir) if cfg.out_dir else None)
    if out_dir is None:
        raise ConfigError("out_dir: no output directory given (config 'out_dir' or --out)")
    os.makedirs(out_dir, exist_ok=True)
    ds = load_run_dataset(cfg)
    model = BridgeModel(cfg.model, len(ds.vocab), cfg.seed, head=cfg.task == "fraud")
    _, history = train(ds, model, cfg.train, cfg.task, cfg.seed)
    ckpt_dir = os.path.join(out_dir, "checkpoint")
    save_checkpoint(model, ckpt_dir, cfg.digest, cfg.task)
    history_path = os.path.join(out_dir, "loss_history.tsv")
    write_history(history_path, history, cfg.digest)
    # Evaluate what was saved (fp32 weights) so later `bridge eval` runs agree exactly.
    saved, _ = load_checkpoint(ckpt_dir, cfg.model)
    report = evaluate(cfg, ds, saved, "valid")
    report_path = os.path.join(out_dir, "eval_valid.json")
    with open(report_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json())
    return {"checkpoint": ckpt_dir, "history": history_path, "report": report_path,
            "loss_history": history, "eval": report}


def run_eval(checkpoint: str, cfg: RunConfig, split: str = "test", out: str | None = None,
             allow_digest_mismatch: bool = False) -> EvalReport:
    model, manifest = load_checkpoint(checkpoint, cfg.model)
    if manifest["config_digest"] != cfg.digest and not allow_digest_mismatch:
        raise DigestMismatch(
            f"checkpoint digest {manifest['config_digest'][:12]} does not match config digest "
            f"{cfg.digest[:12]}; pass --allow-digest-mismatch to evaluate anyway")
    if manifest["task"] != cfg.task:
        raise CheckpointError(f"checkpoint was trained for task {manifest['task']!r}, config says {cfg.task!r}")
    ds = load_run_dataset(cfg)
    if len(ds.vocab) > model.vocab_size:
        raise CheckpointError(f"dataset vocabulary {len(ds.vocab)} exceeds checkpoint's {model.vocab_size}")
    report = evaluate(cfg, ds, model, split)
    if out is None:
        ckpt_dir = checkpoint if os.path.isdir(checkpoint) else os.path.dirname(os.path.abspath(checkpoint))
        out = os.path.join(os.path.dirname(os.path.abspath(ckpt_dir)), f"eval_{split}.json")
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json())
    return report


def run_synth(spec_path: str, seed: int, out_dir: str) -> tuple[str, str]:
    return write_dataset(generate_synthetic(load_synthetic_spec(spec_path), seed), out_dir)


def gradcheck_loss(cfg: RunConfig, ds, model: BridgeModel):
    """Deterministic scalar loss over the whole tiny graph, for finite-difference probing."""
    tokens, valid = model.inputs(ds)
    graph = ds.graph
    if cfg.task == "fraud":
        nodes = np.flatnonzero(ds.labels >= 0)
        targets = ds.labels[nodes].astype(np.float64)

        def fn():
            h = model.forward(tokens, valid, graph)
            return T.bce_with_logits(T.reshape(model.logits(T.gather(h, nodes)), (-1,)), targets)
        return fn

    n = graph.num_nodes
    pos = graph.edges
    iu, iv = np.triu_indices(n, k=1)
    non = np.array([(a, b) for a, b in zip(iu, iv) if not graph.has_edge(a, b)], dtype=np.int64)
    if len(pos) == 0 or len(non) == 0:
        raise ConfigError("data: gradcheck graph needs at least one edge and one non-edge")

    def fn():
        h = model.forward(tokens, valid, graph)
        return link_loss(score_link(T.gather(h, pos[:, 0]), T.gather(h, pos[:, 1])),
                         score_link(T.gather(h, non[:, 0]), T.gather(h, non[:, 1])))
    return fn


def run_gradcheck(cfg: RunConfig, eps: float = 1e-5, sabotage: str | None = None) -> dict[str, float]:
    """Max relative gradient error per parameter group (encoder, xattn, vector, head)."""
    ds = load_run_dataset(cfg)
    longest = max((len(s) for s in ds.sequences), default=0)
    if ds.num_nodes > GRADCHECK_MAX_NODES or longest > GRADCHECK_MAX_LEN:
        raise ConfigError(
            f"data: gradcheck needs N <= {GRADCHECK_MAX_NODES} and sequences <= {GRADCHECK_MAX_LEN} "
            f"tokens (got N={ds.num_nodes}, longest={longest}); shrink the synthetic spec")
    model = BridgeModel(cfg.model, len(ds.vocab), cfg.seed, head=cfg.task == "fraud")
    fn = gradcheck_loss(cfg, ds, model)
    named = model.named_parameters()
    errors = {}
    for group, names in model.parameter_groups().items():
        params = [named[k] for k in names]
        if sabotage:
            with T.sabotage_adjoint(sabotage, 2.0):
                errors[group] = T.finite_difference_check(fn, params, eps)
        else:
            errors[group] = T.finite_difference_check(fn, params, eps)
    return errors


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bridge", description="Sequence-on-graph models: train, evaluate, generate data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write checkpoint, loss history and valid report")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (overrides config out_dir)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True, help="manifest.json or the checkpoint directory")
    e.add_argument("--config", required=True)
    e.add_argument("--split", default="test", choices=("train", "valid", "test"))
    e.add_argument("--out", help="report path (default: eval_<split>.json next to the checkpoint)")
    e.add_argument("--allow-digest-mismatch", action="store_true")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--seed", required=True, type=int)
    s.add_argument("--out", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    g.add_argument("--config", required=True)
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--sabotage", metavar="PRIMITIVE",
                   help="scale the adjoint of PRIMITIVE by 2 (checker sanity test)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            cfg = load_config(args.config)
            result = run_train(cfg, args.out)
            print(json.dumps({"checkpoint": result["checkpoint"], "history": result["history"],
                              "report": result["report"], **result["eval"].to_dict()}, indent=2))
        elif args.command == "eval":
            cfg = load_config(args.config)
            report = run_eval(args.checkpoint, cfg, args.split, args.out, args.allow_digest_mismatch)
            sys.stdout.write(report.to_json())
        elif args.command == "synth":
            nodes, edges = run_synth(args.spec, args.seed, args.out)
            print(f"wrote {nodes} and {edges}")
        elif args.command == "gradcheck":
            cfg = load_config(args.config)
            start = time.perf_counter()
            errors = run_gradcheck(cfg, args.eps, args.sabotage)
            ok = True
            for group, err in errors.items():
                passed = err < GRADCHECK_TOL
                ok &= passed
                print(f"{group}\t{err:.3e}\t{'ok' if passed else 'FAIL'}")
            print(f"elapsed\t{time.perf_counter() - start:.1f}s")
            return 0 if ok else EXIT_GRADCHECK
    except (ConfigError, IngestError, SyntheticSpecError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NegativeSamplingError as exc:
        print(f"sampling error: {exc}", file=sys.stderr)
        return EXIT_SAMPLING
    return 0


if __name__ == "__main__":
    sys.exit(main())
