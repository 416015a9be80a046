"""Command-line entry point for reproducible generation, simulation, and
analysis runs.

Every command is deterministic given its flags: all randomness funnels
through --seed, artifacts are written with sorted keys, and wall-clock
timings only appear when --timings is passed. Exit codes: 0 success, 1
runtime error, 2 usage error, 3 validation error (with a machine-readable
JSON object on stderr).
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import resources

import numpy as np

from . import benchgen, metrics
from .errors import InstanceTooLarge, LoopServeError
from .kvcompress import CompressionConfig, select_topB_obs
from .model import ModelConfig, init_weights, load_weights, save_weights
from .prefill import brute_force_min_lines, coverage_ratio, line_sums, plan_for_block
from .session import MODES, SessionParams, run_session
from .tensor_ops import AttentionBlock
from .tokenizer import Vocab, build_vocab

DATA_DIR_ENV = "LOOPSERVE_DATA_DIR"


def log(msg: str) -> None:
    print(msg, file=sys.stderr)


def resolve(path: str | None, args) -> str | None:
    if path is None or os.path.isabs(path):
        return path
    base = args.data_dir or os.environ.get(DATA_DIR_ENV) or "."
    return os.path.join(base, path)


def merged(args, key: str, default):
    """Flag value if given, else the --config file's value, else the default."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    return getattr(args, "_config_doc", {}).get(key, default)


def load_config_doc(args) -> None:
    doc = {}
    if getattr(args, "config", None):
        with open(resolve(args.config, args)) as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise LoopServeError("--config file must hold a JSON object")
    args._config_doc = doc


def dump_json(doc, path: str | None, args, to_stdout: bool) -> None:
    text = json.dumps(doc, sort_keys=True, indent=1) + "\n"
    if path:
        with open(resolve(path, args), "w") as fh:
            fh.write(text)
        log(f"wrote {resolve(path, args)}")
    if to_stdout or not path:
        sys.stdout.write(text)


def dump_jsonl(docs, path: str | None, args, to_stdout: bool) -> None:
    text = "".join(json.dumps(d, sort_keys=True) + "\n" for d in docs)
    if path:
        with open(resolve(path, args), "w") as fh:
            fh.write(text)
        log(f"wrote {resolve(path, args)}")
    if to_stdout or not path:
        sys.stdout.write(text)


# --- gen-model ----------------------------------------------------------------


def cmd_gen_model(args) -> int:
    load_config_doc(args)
    if args.vocab:
        vocab_size = len(Vocab.load(resolve(args.vocab, args)))
    elif args.vocab_size:
        vocab_size = args.vocab_size
    else:
        raise LoopServeError("gen-model needs --vocab or --vocab-size")
    d_k = merged(args, "d_k", 16)
    config = ModelConfig(
        n_layers=merged(args, "layers", 2),
        n_heads=merged(args, "heads", 2),
        d_model=merged(args, "d_model", 32),
        d_k=d_k,
        d_v=merged(args, "d_v", d_k),
        vocab_size=vocab_size,
        max_seq_len=merged(args, "max_seq_len", 1024),
    )
    weights = init_weights(config, seed=merged(args, "seed", 0))
    out = resolve(args.out, args)
    save_weights(weights, out)
    log(f"wrote {out}")
    if args.stdout:
        with open(out) as fh:
            sys.stdout.write(fh.read())
    return 0


# --- gen-corpus ---------------------------------------------------------------

_CORPUS_MAKERS = {
    "qa": benchgen.make_qa_corpus,
    "sum": benchgen.make_sum_corpus,
    "fewshot": benchgen.make_fewshot_corpus,
}


def cmd_gen_corpus(args) -> int:
    load_config_doc(args)
    seed = merged(args, "seed", 0)
    records = _CORPUS_MAKERS[args.kind](merged(args, "count", 20), seed)
    dump_jsonl(records, args.out, args, args.stdout)
    if args.vocab_out:
        texts = benchgen.corpus_texts(records) + benchgen.make_noise_paragraphs(50, seed)
        vocab = build_vocab(texts + ["summarize document one two"])
        vocab.save(resolve(args.vocab_out, args))
        log(f"wrote {resolve(args.vocab_out, args)}")
    return 0


# --- gen-bench ----------------------------------------------------------------


def cmd_gen_bench(args) -> int:
    load_config_doc(args)
    corpus = benchgen.load_jsonl(resolve(args.corpus, args))
    count = merged(args, "count", 10)
    seed = merged(args, "seed", 0)
    turns = merged(args, "turns", 3)
    noise = benchgen.make_noise_paragraphs(merged(args, "noise_count", 8), seed + 1)
    instances = []
    for i in range(count):
        iid = f"{args.kind}-{i:04d}"
        if args.kind == "qa":
            inst = benchgen.build_qa_instance(
                corpus, turns, None, noise, seed=seed + i, instance_id=iid
            )
        elif args.kind == "sum":
            inst = benchgen.build_sum_instance(
                corpus, seed=seed + i, noise_pool=noise, instance_id=iid
            )
        else:
            rng = np.random.Generator(np.random.PCG64(seed + i))
            record = corpus[int(rng.integers(0, len(corpus)))]
            inst = benchgen.build_fewshot_instance(record, seed=seed + i, instance_id=iid)
        report = benchgen.validate_instance(inst)
        if not report.ok:
            raise LoopServeError(f"generated instance failed validation: {report.violations}")
        instances.append(inst)
    dump_jsonl([inst.to_json() for inst in instances], args.out, args, args.stdout)
    return 0


# --- run ----------------------------------------------------------------------


def _parse_budget(value):
    if value is None:
        return None
    if isinstance(value, int):
        return value
    text = str(value).lower()
    if text in ("inf", "none", "unlimited"):
        return None
    return int(text)


def cmd_run(args) -> int:
    load_config_doc(args)
    weights = load_weights(resolve(args.model, args))
    vocab = Vocab.load(resolve(args.vocab, args))
    instances = benchgen.load_instances(resolve(args.instances, args))
    if not instances:
        raise LoopServeError("no instances to run")
    seed = merged(args, "seed", 0)
    budget = _parse_budget(merged(args, "budget", 1024))
    comp = CompressionConfig(
        budget=budget,
        interval=merged(args, "interval", 16),
        warmup=merged(args, "warmup", 16),
        obs_window=merged(args, "obs_window", None),
    )
    mode = merged(args, "mode", "loopserve")
    base = SessionParams(
        mode=mode,
        alpha=merged(args, "alpha", 0.955),
        comp=comp,
        sample_rate=merged(args, "sample_rate", 0.1),
        sample_floor=merged(args, "sample_floor", 32),
        max_new=merged(args, "max_new", 24),
        eos_id=vocab.eos_id,
        seed=seed,
        collect_timings=bool(args.timings),
    )
    base.validate()

    def one(idx_inst):
        idx, inst = idx_inst
        inst_seed = int(
            np.random.SeedSequence(entropy=seed, spawn_key=(idx,)).generate_state(1)[0]
        )
        params = SessionParams(**{**base.__dict__, "seed": inst_seed})
        return run_session(weights, inst, vocab, params)

    threads = merged(args, "threads", 1)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, enumerate(instances)))
    else:
        results = [one(x) for x in enumerate(instances)]

    transcripts = [r.transcript for r in results]
    dump_jsonl(transcripts, args.out_transcripts, args, args.stdout)

    if args.out_events:
        events = [
            {"instance_id": r.instance_id, **e} for r in results for e in r.events
        ]
        dump_jsonl(events, args.out_events, args, False)

    if args.out_metrics:
        records = []
        for r in results:
            turns = [t["op_counts"] for t in r.transcript["turns"]]
            totals = {
                key: sum(t[key] for t in turns) for key in turns[0]
            }
            records.append(
                metrics.MetricsRecord(
                    instance_id=r.instance_id,
                    op_counts={"turns": turns, "totals": totals},
                    wall_ms=[t["wall_ms"] for t in r.transcript["turns"]]
                    if args.timings
                    else None,
                )
            )
        metrics.write_json(records, resolve(args.out_metrics, args))
        log(f"wrote {resolve(args.out_metrics, args)}")
    return 0


# --- analyze ------------------------------------------------------------------


def cmd_analyze(args) -> int:
    load_config_doc(args)
    transcripts = benchgen.load_jsonl(resolve(args.transcripts, args))
    instances = {
        inst.id: inst for inst in benchgen.load_instances(resolve(args.instances, args))
    }
    vocab = Vocab.load(resolve(args.vocab, args))
    which = set((merged(args, "which", "task,ops")).split(","))
    records = []
    for doc in transcripts:
        inst = instances.get(doc["instance_id"])
        if inst is None:
            raise LoopServeError(f"transcript references unknown instance {doc['instance_id']!r}")
        task_scores = []
        series = {}
        if "task" in which:
            for j, (turn_doc, turn) in enumerate(zip(doc["turns"], inst.turns), start=1):
                answer = [t for t in turn_doc["answer_tokens"] if t != vocab.eos_id]
                reference = vocab.encode(turn.reference_answer)
                task_scores.append(
                    {
                        "turn": j,
                        "metric": metrics.TASK_METRIC[inst.task],
                        "value": metrics.task_score(inst.task, answer, reference),
                    }
                )
        if "ops" in which:
            for key in ("prefill_scores", "decode_scores"):
                series[key] = [
                    (float(j), float(t["op_counts"][key]))
                    for j, t in enumerate(doc["turns"], start=1)
                ]
        records.append(
            metrics.MetricsRecord(
                instance_id=doc["instance_id"], task_scores=task_scores, series=series
            )
        )
    if args.out_csv:
        metrics.write_csv(records, resolve(args.out_csv, args))
        log(f"wrote {resolve(args.out_csv, args)}")
    if args.out_json or not args.out_csv:
        if args.out_json:
            metrics.write_json(records, resolve(args.out_json, args))
            log(f"wrote {resolve(args.out_json, args)}")
    if args.stdout:
        sys.stdout.write(
            json.dumps([r.to_json() for r in records], sort_keys=True, indent=1) + "\n"
        )
    return 0


# --- oracle -------------------------------------------------------------------


def _load_block(args) -> AttentionBlock:
    if args.block:
        with open(resolve(args.block, args)) as fh:
            doc = json.load(fh)
    else:
        doc = json.loads(
            resources.files("loopserve").joinpath("data/block_2x4.json").read_text()
        )
    return AttentionBlock(
        weights=np.asarray(doc["weights"], dtype=np.float64),
        row_offset=int(doc["row_offset"]),
    )


def cmd_oracle(args) -> int:
    load_config_doc(args)
    alpha = merged(args, "alpha", 0.7)
    if args.which == "min-lines":
        block = _load_block(args)
        optimal_cost, optimal_plan = brute_force_min_lines(block, alpha)
        greedy_plan = plan_for_block(block, alpha)
        report = {
            "oracle": "min-lines",
            "alpha": alpha,
            "n_new": block.n_new,
            "n_total": block.n_total,
            "optimal_cost": optimal_cost,
            "optimal_plan": optimal_plan.to_json(),
            "greedy_cost": greedy_plan.cost(block.n_new),
            "greedy_plan": greedy_plan.to_json(),
            "greedy_feasible": bool(coverage_ratio(block, greedy_plan) >= alpha - 1e-9),
        }
    elif args.which == "topb":
        budget = merged(args, "budget", 2)
        with open(resolve(args.scores, args)) as fh:
            scores = np.atleast_2d(np.asarray(json.load(fh), dtype=np.float64))
        n = scores.shape[1]
        if n > 12:
            raise InstanceTooLarge(f"top-B oracle enumerates subsets; n={n} exceeds 12")
        selected = select_topB_obs(scores, budget, aggregate="summed_over_heads")
        totals = scores.sum(axis=0)
        budget_eff = min(budget, n)
        best_sum = max(
            sum(totals[i] for i in combo)
            for combo in itertools.combinations(range(n), budget_eff)
        )
        report = {
            "oracle": "topb",
            "budget": budget,
            "selected": [int(i) for i in selected],
            "selected_sum": float(totals[selected].sum()),
            "oracle_best_sum": float(best_sum),
            "match": bool(abs(float(totals[selected].sum()) - float(best_sum)) <= 1e-9),
        }
    else:
        raise LoopServeError(f"unknown oracle {args.which!r}")
    dump_json(report, args.out, args, args.stdout)
    return 0


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loopserve",
        description="Dual-phase inference acceleration lab: generation, simulation, analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file whose values fill unset flags")
        p.add_argument("--data-dir", help=f"base for relative paths (default ${DATA_DIR_ENV} or .)")
        p.add_argument("--stdout", action="store_true", help="also write the main artifact to stdout")

    p = sub.add_parser("gen-model", help="create a toy model weights file")
    common(p)
    p.add_argument("--vocab", help="vocabulary file fixing vocab_size")
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--d-model", type=int, dest="d_model")
    p.add_argument("--d-k", type=int, dest="d_k")
    p.add_argument("--d-v", type=int, dest="d_v")
    p.add_argument("--max-seq-len", type=int, dest="max_seq_len")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("gen-corpus", help="emit a synthetic corpus with planted answers")
    common(p)
    p.add_argument("--kind", choices=sorted(_CORPUS_MAKERS), required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--vocab-out", help="also write a vocabulary covering the corpus")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("gen-bench", help="build multi-turn instances from a corpus")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--kind", choices=("qa", "sum", "fewshot"), required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--turns", type=int)
    p.add_argument("--noise-count", type=int, dest="noise_count")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_bench)

    p = sub.add_parser("run", help="run instances under a serving mode")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--instances", required=True)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--alpha", type=float)
    p.add_argument("--budget", help="token budget per head, or 'inf'")
    p.add_argument("--interval", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--obs-window", type=int, dest="obs_window")
    p.add_argument("--sample-rate", type=float, dest="sample_rate")
    p.add_argument("--sample-floor", type=int, dest="sample_floor")
    p.add_argument("--max-new", type=int, dest="max_new")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--timings", action="store_true", help="record wall times (non-deterministic)")
    p.add_argument("--out-transcripts", dest="out_transcripts")
    p.add_argument("--out-metrics", dest="out_metrics")
    p.add_argument("--out-events", dest="out_events")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("analyze", help="score transcripts against references")
    common(p)
    p.add_argument("--transcripts", required=True)
    p.add_argument("--instances", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--which", help="comma list: task,ops")
    p.add_argument("--out-csv", dest="out_csv")
    p.add_argument("--out-json", dest="out_json")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("oracle", help="exact reference computations on small inputs")
    common(p)
    p.add_argument("--which", choices=("min-lines", "topb"), required=True)
    p.add_argument("--block", help="block JSON file (default: bundled 2x4 fixture)")
    p.add_argument("--scores", help="scores JSON file for the topb oracle")
    p.add_argument("--alpha", type=float)
    p.add_argument("--budget", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LoopServeError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 3
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 3
    except Exception as exc:  # pragma: no cover - defensive
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
