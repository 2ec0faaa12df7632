"""``featrace`` command line.

Exit codes: 0 success, 1 usage or input error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__

log = logging.getLogger("featrace")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _snapshot_index(steps: Sequence[int], value: int | None) -> int:
    """``None`` means the last snapshot; otherwise match a step, then fall back to an index."""
    if value is None:
        return len(steps) - 1
    if value in steps:
        return list(steps).index(value)
    if -len(steps) <= value < len(steps):
        return value % len(steps)
    raise ValueError(f"snapshot {value} is neither a step in {list(steps)} nor an index")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> None:
    from .report import write_metadata
    from .synthetic import SynthConfig, TaskConfig, generate_snapshots, generate_task

    cfg_dict = json.loads(Path(args.config).read_text()) if args.config else {}
    task_dict = cfg_dict.pop("task", None)
    config = SynthConfig.from_dict(cfg_dict)
    out = _out_dir(args.out)
    manifest, truth = generate_snapshots(config, args.seed, out)
    info = {"manifest": str(out / "manifest.json"), "ground_truth": str(out / "ground_truth.json")}
    if args.task or task_dict is not None:
        tcfg = TaskConfig(**(task_dict or {}))
        info["task"] = generate_task(truth, manifest, tcfg, args.seed, out / "task")
    write_metadata(out, sys.argv, [args.config] if args.config else [], config.to_dict(), args.seed)
    print(json.dumps(info, indent=1))


def cmd_train(args) -> None:
    from .report import write_metadata
    from .store import SnapshotManifest
    from .training import TrainConfig, train

    manifest = SnapshotManifest.load(args.manifest)
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    overrides = {
        "learning_rate": args.lr, "batch_size": args.batch, "lambda_sparsity": args.lam, "omega0": args.omega0,
        "total_tokens": args.tokens, "n_workers": args.workers, "seed": args.seed,
        "threshold_lr_multiplier": args.threshold_lr_mult, "eval_every": args.eval_every,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    config = TrainConfig.from_dict(base)
    out = _out_dir(args.out)

    def progress(step: int, loss: float) -> None:
        if step % max(1, args.log_every) == 0:
            log.info("step %d loss %.5g", step, loss)

    report = train(manifest, config, args.features, out_dir=out, resume=args.resume, progress=progress)
    write_metadata(out, sys.argv, [Path(args.manifest) if Path(args.manifest).is_file() else Path(args.manifest) / "manifest.json"],
                   config.to_dict(), config.seed)
    print(json.dumps({"checkpoint": report.checkpoint_path, "final_loss": report.losses[-1] if report.losses else None,
                      "eval": report.evals[-1] if report.evals else None, "wall_clock": report.wall_clock}, indent=1))


def cmd_eval(args) -> None:
    from .crosscoder import evaluate, load_checkpoint
    from .report import write_csv, write_metadata
    from .store import read_activation_batches, SnapshotManifest

    model = load_checkpoint(args.checkpoint)
    manifest = SnapshotManifest.load(args.manifest)
    stop = args.tokens if args.tokens else None
    res = evaluate(model, read_activation_batches(manifest, batch_size=args.batch, stop_row=stop))
    out = _out_dir(args.out)
    rows = [(model.steps[k], res.explained_variance[k], res.l0[k]) for k in range(model.n_snapshots)]
    write_csv(out / "eval.csv", ["step", "explained_variance", "l0"], rows)
    summary = {"steps": model.steps, "explained_variance": res.explained_variance.tolist(), "l0": res.l0.tolist(),
               "mean_l0": float(res.l0.mean()), "n_rows": res.n_rows}
    (out / "eval.json").write_text(json.dumps(summary, indent=1) + "\n")
    write_metadata(out, sys.argv, [args.checkpoint])
    print(json.dumps(summary, indent=1))


def cmd_evolve(args) -> None:
    from .crosscoder import load_checkpoint
    from .evolution import classify_and_peak, feature_dimensionality, lifetime, projection_matrix, trajectories
    from .report import TRAJECTORY_CSV, chart_trajectories, write_csv, write_metadata

    model = load_checkpoint(args.checkpoint)
    out = _out_dir(args.out)
    trajs = trajectories(model)
    rows = []
    for t in trajs:
        st = classify_and_peak(t, args.lifetime_threshold)
        life = lifetime(t, args.lifetime_threshold, rescaled=not args.raw_norms)
        rows.append([t.feature_id, *t.norms.tolist(), st.kind, st.peak_step,
                     "" if st.onset_step is None else st.onset_step,
                     "" if st.steepness is None else st.steepness, life])
    header = ["feature", *[f"norm_{s}" for s in model.steps], "class", "peak_step", "onset_step", "steepness", "lifetime"]
    write_csv(out / TRAJECTORY_CSV, header, rows)
    try:
        P = projection_matrix(trajs, "mean")
        write_csv(out / "projection.csv", ["step", *[str(s) for s in model.steps]],
                  [[s, *P[j].tolist()] for j, s in enumerate(model.steps)])
    except ValueError as e:
        log.warning("projection matrix skipped: %s", e)
    _write_dims(model, out)
    (out / "decoder_norms.svg").write_text(chart_trajectories(out / TRAJECTORY_CSV, args.chart_features))
    write_metadata(out, sys.argv, [args.checkpoint])
    kinds = [r[len(model.steps) + 1] for r in rows]
    print(json.dumps({"features": len(rows), "initialization": kinds.count("initialization"),
                      "emergent": kinds.count("emergent")}, indent=1))


def _write_dims(model, out: Path) -> list[float]:
    from .evolution import feature_dimensionality
    from .report import DIMENSIONALITY_CSV, write_csv

    dims = [feature_dimensionality(model, k) for k in range(model.n_snapshots)]
    write_csv(out / "dimensionality.csv", ["feature", *[f"D_{s}" for s in model.steps]],
              [[i, *[d.per_feature[i] for d in dims]] for i in range(model.n_features)])
    totals = [d.total_ratio for d in dims]
    write_csv(out / DIMENSIONALITY_CSV, ["step", "total_ratio"], list(zip(model.steps, totals)))
    return totals


def cmd_dims(args) -> None:
    from .crosscoder import load_checkpoint
    from .report import DIMENSIONALITY_CSV, chart_dimensionality, write_metadata

    model = load_checkpoint(args.checkpoint)
    out = _out_dir(args.out)
    totals = _write_dims(model, out)
    (out / "dimensionality.svg").write_text(chart_dimensionality(out / DIMENSIONALITY_CSV))
    write_metadata(out, sys.argv, [args.checkpoint])
    print(json.dumps({"steps": model.steps, "total_ratio": totals}, indent=1))


def cmd_attr(args) -> None:
    from .attribution import MetricHead, ablation_experiment, attribute, load_task, rank_features
    from .crosscoder import load_checkpoint
    from .report import RECOVERY_CSV, chart_recovery, write_csv, write_metadata
    from .store import SnapshotManifest, read_activation_shard

    model = load_checkpoint(args.checkpoint)
    manifest_path = Path(args.manifest) if args.manifest else Path(args.task).parent / "task_manifest.json"
    manifest = SnapshotManifest.load(manifest_path)
    task = load_task(args.task, manifest)
    if args.head:
        head = MetricHead.load(args.head)
    elif args.head_grad:
        g = read_activation_shard(args.head_grad).astype(np.float64)
        head = MetricHead.external(g[0] if g.shape[0] == 1 else g)
    else:
        raise ValueError("need --head or --head-grad")
    out = _out_dir(args.out)
    snaps = range(model.n_snapshots) if args.snapshot is None else [_snapshot_index(model.steps, args.snapshot)]
    scores = np.stack([attribute(model, k, head, task, args.variant, args.n_steps, args.ig_rule) for k in snaps])  # (K, B, F)
    ranked = rank_features(scores)
    mean = scores.mean(axis=(0, 1))
    write_csv(out / "attribution.csv", ["rank", "feature", "mean_score", *[f"score_{model.steps[k]}" for k in snaps]],
              [[r, f, mean[f], *scores[:, :, f].mean(axis=1).tolist()] for r, f in enumerate(ranked)])
    target = _snapshot_index(model.steps, args.snapshot)
    rows = []
    for mode in ("ablate-top", "keep-top"):
        for k in args.topk_grid:
            res = ablation_experiment(model, target, head, task, ranked, k, mode)
            rows.append([mode, k, res.recovery, res.n_skipped])
    write_csv(out / RECOVERY_CSV, ["mode", "k", "recovery", "skipped"], rows)
    (out / "metric_recovery.svg").write_text(chart_recovery(out / RECOVERY_CSV))
    inputs = [args.checkpoint, args.task, manifest_path] + ([args.head] if args.head else [args.head_grad])
    write_metadata(out, sys.argv, inputs, {"variant": args.variant, "n_steps": args.n_steps, "ig_rule": args.ig_rule})
    print(json.dumps({"top_features": ranked[:10], "recovery": rows}, indent=1))


def cmd_probe(args) -> None:
    from .crosscoder import load_checkpoint
    from .evolution import lifetime, trajectories
    from .probes import correlation_summary, probe_features
    from .report import write_csv, write_metadata
    from .store import AlignedReader, SnapshotManifest

    model = load_checkpoint(args.checkpoint)
    manifest = SnapshotManifest.load(args.manifest)
    with AlignedReader(manifest) as reader:
        batch = reader.read(0, min(args.tokens, reader.n_rows))
    if args.features:
        feats = args.features
    else:
        feats = [t.feature_id for t in trajectories(model) if lifetime(t) >= args.min_lifetime]
    rows = probe_features(model, batch, feats, label_mode=args.label_mode, epochs=args.epochs, seed=args.seed)
    out = _out_dir(args.out)
    write_csv(out / "probes.csv", ["feature", "step", "bce_train", "bce_heldout", "decoder_norm", "degenerate"],
              [[r.feature, r.step, r.bce_train, r.bce_heldout, r.decoder_norm, int(r.degenerate)] for r in rows])
    corr = correlation_summary(rows)
    write_csv(out / "probe_correlation.csv", ["feature", "pearson"], sorted(corr.items()))
    summary = {"features": len(feats), "median_pearson": float(np.median(list(corr.values()))) if corr else None}
    (out / "probe_summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    write_metadata(out, sys.argv, [args.checkpoint], {"label_mode": args.label_mode, "tokens": args.tokens})
    print(json.dumps(summary, indent=1))


def cmd_ngram(args) -> None:
    from .ngram import bigram_kl, count_ngrams, entropy_floor, unigram_kl
    from .report import KL_CSV, write_csv, write_metadata

    if args.steps and len(args.steps) != len(args.p_tokens):
        raise ValueError("--steps needs one value per --p-tokens stream")
    Q = count_ngrams(args.q_tokens, args.vocab)
    rows = []
    for j, p in enumerate(args.p_tokens):
        P = count_ngrams([p], args.vocab)
        rows.append({"step": args.steps[j] if args.steps else j, "p_tokens": p,
                     "unigram_kl": unigram_kl(P, Q, args.eps), "bigram_kl": bigram_kl(P, Q, args.eps)})
    report = {"q_tokens": args.q_tokens, "vocab": args.vocab, "eps": args.eps,
              "unigram_entropy": entropy_floor(Q, 1),
              "bigram_conditional_entropy": entropy_floor(Q, 2) if Q.n_bigrams else None,
              "series": rows}
    out_file = Path(args.out)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    out_file.write_text(json.dumps(report, indent=1) + "\n")
    write_csv(out_file.parent / KL_CSV, ["step", "unigram_kl", "bigram_kl"],
              [[r["step"], r["unigram_kl"], r["bigram_kl"]] for r in rows])
    write_metadata(out_file.parent, sys.argv, [*args.q_tokens, *args.p_tokens], {"eps": args.eps})
    print(json.dumps(report, indent=1))


def cmd_rules(args) -> None:
    from .crosscoder import load_checkpoint
    from .report import write_csv, write_metadata
    from .rules import build_top_index, classify_index, load_vocab
    from .store import SnapshotManifest

    model = load_checkpoint(args.checkpoint)
    manifest = SnapshotManifest.load(args.manifest)
    vocab_path = args.vocab or (manifest.root / "vocab.json" if (manifest.root / "vocab.json").is_file() else None)
    vocab = load_vocab(vocab_path) if vocab_path else None
    snap = _snapshot_index(manifest.steps, args.snapshot)
    index = build_top_index(model, manifest, snap, args.k, vocab=vocab)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    index.save(out.parent / args.index_name)
    verdicts = classify_index(index)
    write_csv(out, ["feature", "class", "prev_consistency", "self_consistency", "induction_instances",
                    "in_sample_count", "total_count"],
              [[v.feature_id, v.kind, v.evidence["prev_consistency"], v.evidence["self_consistency"],
                v.evidence["induction_instances"], v.evidence["in_sample_count"], v.evidence["total_count"]]
               for v in verdicts])
    write_metadata(out.parent, sys.argv, [args.checkpoint] + ([vocab_path] if vocab_path else []), {"k": args.k, "snapshot": snap})
    counts: dict[str, int] = {}
    for v in verdicts:
        counts[v.kind] = counts.get(v.kind, 0) + 1
    print(json.dumps(counts, indent=1))


def cmd_annotate(args) -> None:
    from .annotator import AnnotationResult, EndpointConfig, annotate_features, complexity_vs_peak
    from .report import read_csv, write_metadata
    from .rules import TopActivationIndex, load_vocab

    vocab = load_vocab(args.vocab) if args.vocab else None
    index = TopActivationIndex.load(args.index, vocab)
    feats = args.features or sorted(f for f, e in index.entries.items() if e.samples)
    entries = [index.entries[f] for f in feats if f in index.entries]
    config = EndpointConfig(base_url=args.endpoint, model_name=args.model, auth_token_env_var=args.auth_env,
                            timeout_seconds=args.timeout, max_retries=args.max_retries,
                            temperature=args.temperature, max_concurrency=args.concurrency)
    results = annotate_features(entries, config, vocab)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n_ok = 0
    with open(out, "w", encoding="utf-8") as fh:
        for fid, res in results.items():
            if isinstance(res, AnnotationResult):
                n_ok += 1
                fh.write(json.dumps(res.to_dict()) + "\n")
            else:
                fh.write(json.dumps({"feature_id": fid, "error": str(res), "raw": getattr(res, "raw", None)}) + "\n")
    summary: dict = {"annotated": n_ok, "failed": len(results) - n_ok}
    if args.evolution:
        from types import SimpleNamespace

        _, rows = read_csv(args.evolution)
        stats = {int(r["feature"]): SimpleNamespace(kind=r["class"], peak_step=int(r["peak_step"])) for r in rows}
        try:
            c = complexity_vs_peak(results, stats)
            summary["complexity_vs_peak"] = {"r": c.r, "p_value": c.p_value, "n": c.n}
        except ValueError as e:
            summary["complexity_vs_peak"] = f"not computed: {e}"
    write_metadata(out.parent, sys.argv, [args.index] + ([args.evolution] if args.evolution else []),
                   {"model": args.model, "endpoint": args.endpoint})
    print(json.dumps(summary, indent=1))


def cmd_report(args) -> None:
    from .report import emit_report

    made = emit_report(args.inputs, args.out, sys.argv)
    print(json.dumps(made, indent=1))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="featrace", description="Cross-snapshot crosscoder training and feature-evolution analyses.")
    p.add_argument("--version", action="version", version=f"featrace {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic snapshots with planted features")
    s.add_argument("--config", help="JSON generator config (optional 'task' key adds a task)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--task", action="store_true", help="also write an attribution task under OUT/task")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a crosscoder")
    s.add_argument("--manifest", required=True)
    s.add_argument("--features", type=int, required=True)
    s.add_argument("--config", help="JSON TrainConfig; flags override it")
    s.add_argument("--lr", type=float)
    s.add_argument("--batch", type=int)
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--omega0", type=float)
    s.add_argument("--tokens", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--threshold-lr-mult", type=float)
    s.add_argument("--eval-every", type=int)
    s.add_argument("--log-every", type=int, default=100)
    s.add_argument("--resume", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="explained variance and L0 per snapshot")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--tokens", type=int, default=0, help="rows to evaluate (0 = all)")
    s.add_argument("--batch", type=int, default=4096)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("evolve", help="trajectories, classes, projections and dimensionality")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--lifetime-threshold", type=float, default=0.3)
    s.add_argument("--raw-norms", action="store_true", help="lifetime on raw rather than rescaled norms")
    s.add_argument("--chart-features", type=int, default=50)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_evolve)

    s = sub.add_parser("dims", help="feature dimensionality per snapshot")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_dims)

    s = sub.add_parser("attr", help="feature attribution and ablation curves")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--task", required=True, help="JSON-lines task file")
    s.add_argument("--manifest", help="manifest the task rows index (default: task_manifest.json beside the task)")
    s.add_argument("--head", help="metric head JSON")
    s.add_argument("--head-grad", help=".acts shard of precomputed metric gradients (1 row or one per sample)")
    s.add_argument("--variant", default="ig-patching", choices=["plain", "patching", "ig-plain", "ig-patching"])
    s.add_argument("--n-steps", type=int, default=10)
    s.add_argument("--ig-rule", choices=["midpoint", "left"], default="midpoint", help="interpolation grid for IG variants")
    s.add_argument("--snapshot", type=int, help="step (or index) for ablations; default last")
    s.add_argument("--topk-grid", type=_ints, default=[1, 2, 5, 10, 20, 50])
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_attr)

    s = sub.add_parser("probe", help="logistic probes for feature firing")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--features", type=_ints, help="comma-separated ids (default: lifetime >= --min-lifetime)")
    s.add_argument("--min-lifetime", type=int, default=4)
    s.add_argument("--tokens", type=int, default=200_000)
    s.add_argument("--label-mode", default="peak", choices=["peak", "per-snapshot", "any"])
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_probe)

    s = sub.add_parser("ngram", help="unigram/bigram KL between token streams")
    s.add_argument("--q-tokens", nargs="+", required=True, help="reference token shards")
    s.add_argument("--p-tokens", nargs="+", required=True, help="one model token shard per series point")
    s.add_argument("--steps", type=_ints, help="comma-separated step labels for the --p-tokens streams")
    s.add_argument("--vocab", type=int, required=True, help="vocabulary size")
    s.add_argument("--eps", type=float, default=1e-9)
    s.add_argument("--out", required=True, help="report JSON path")
    s.set_defaults(fn=cmd_ngram)

    s = sub.add_parser("rules", help="top-activation index and rule-based classes")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--snapshot", type=int, help="step (or index); default last")
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--vocab", help="JSON list of token strings (default: vocab.json beside the manifest)")
    s.add_argument("--index-name", default="top_index.jsonl")
    s.add_argument("--out", required=True, help="verdict CSV path")
    s.set_defaults(fn=cmd_rules)

    s = sub.add_parser("annotate", help="complexity annotation through a chat-completion endpoint")
    s.add_argument("--index", required=True)
    s.add_argument("--endpoint", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--features", type=_ints)
    s.add_argument("--vocab")
    s.add_argument("--auth-env", default="FEATRACE_API_KEY", help="environment variable holding the API token")
    s.add_argument("--timeout", type=float, default=60.0)
    s.add_argument("--max-retries", type=int, default=3)
    s.add_argument("--temperature", type=float, default=0.0)
    s.add_argument("--concurrency", type=int, default=4)
    s.add_argument("--evolution", help="trajectories.csv from 'evolve' for the complexity/peak correlation")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_annotate)

    s = sub.add_parser("report", help="charts and metadata from analysis tables")
    s.add_argument("--inputs", nargs="+", required=True, help="directories or CSV files from other subcommands")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_report)
    return p


USER_ERRORS = (FileNotFoundError, NotADirectoryError, IsADirectoryError, PermissionError, ValueError, KeyError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except USER_ERRORS as e:
        print(f"featrace {args.command}: error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
