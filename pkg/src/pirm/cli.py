"""Command-line entry point: ``pirm gen|train|bounds|graphdist|recipe``.

Exit status: 0 on success, 2 when inputs fail validation, 1 on any other error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from .envgen import (
    FeatureSpec,
    SpecError,
    gen_appendix_synth,
    gen_example1,
    read_datasets_csv,
    sample_dataset,
    sample_environments,
    env_streams,
    write_datasets_csv,
)
from .graphdist import (
    DEFAULT_K,
    GraphError,
    graph_embedding,
    overlap_matrix,
    rank_environments,
    read_edge_list,
    read_memberships,
    write_distance_csv,
    write_embedding_csv,
)
from .harness import ConfigError, ExperimentConfig, RECIPES, MODELS, fit_model, run_recipe
from .learn import TrainConfig, evaluate
from .oracle import BoundError, bound_report

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, SpecError, GraphError, BoundError, FileNotFoundError, KeyError, json.JSONDecodeError)


def _csv_list(text: str, cast=str) -> list:
    return [cast(x) for x in text.split(",") if x.strip()]


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------- #
# Subcommands
# --------------------------------------------------------------------------- #


def cmd_gen(args) -> int:
    out = _out_dir(args)
    if args.kind == "model":
        if not args.spec:
            raise ConfigError("--spec is required for --kind model")
        spec = FeatureSpec.from_json(args.spec)
        ss = np.random.SeedSequence(args.seed).spawn(2)
        weights = sample_environments(spec, args.envs, ss[0])
        data = [sample_dataset(w, args.n, spec.sigma_y, g) for w, g in zip(weights, env_streams(ss[1], args.envs))]
        with open(out / "env_weights.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["env_id"] + [f"w{j}" for j in range(spec.c)])
            for ew in weights:
                w.writerow([ew.env_id] + [repr(float(v)) for v in ew.w])
    else:
        sigmas = _csv_list(args.sigmas, float)
        signs = _csv_list(args.signs, int)
        if len(sigmas) != len(signs):
            raise ConfigError("--sigmas and --signs must have equal length")
        gens = env_streams(args.seed, len(sigmas) + 1)
        if args.kind == "example1":
            data = [gen_example1(s, c, args.n, g, env_id=i) for i, (s, c, g) in enumerate(zip(sigmas, signs, gens))]
        else:
            rng = gens[-1]
            W1, W2 = rng.standard_normal(10), rng.standard_normal(10)
            data = [gen_appendix_synth(s, c, W1, W2, args.n, g, env_id=i)
                    for i, (s, c, g) in enumerate(zip(sigmas, signs, gens))]
            (out / "true_weights.json").write_text(json.dumps({"W1": W1.tolist(), "W2": W2.tolist()}, indent=2) + "\n")
    write_datasets_csv(data, out / "datasets.csv")
    print(f"wrote {len(data)} environments to {out / 'datasets.csv'}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad train config: {exc}") from exc
    overrides = {
        "lam": args.lam,
        "iterations": args.iterations,
        "anneal_iters": args.anneal_iters,
        "learning_rate": args.lr,
        "penalty_form": args.penalty_form,
        "restarts": args.restarts,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    base["seed"] = args.seed
    try:
        return TrainConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(args) -> int:
    out = _out_dir(args)
    cfg = _train_config(args)
    envs = read_datasets_csv(args.data)
    if not envs:
        raise ConfigError("training CSV holds no rows")
    part = None
    if args.partition:
        wanted = _csv_list(args.partition)
        ids = {str(ds.env_id): ds for ds in envs}
        missing = [w for w in wanted if w not in ids]
        if missing:
            raise ConfigError(f"partition envs not in data: {missing}")
        part = [ids[w] for w in wanted]
    elif args.model in ("pirm-part", "pirm-cond"):
        raise ConfigError(f"--partition is required for {args.model}")
    pred = fit_model(args.model, cfg, envs, part)
    pred.to_json(out / "predictor.json")
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "objective"])
        for i, v in enumerate(pred.trace):
            w.writerow([i, repr(float(v))])
    summary = {"phi": [float(x) for x in pred.phi]}
    if args.test:
        rep = evaluate(pred, read_datasets_csv(args.test))
        (out / "risk_report.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
        with open(out / "risk_report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(rep.CSV_HEADER)
            w.writerow(rep.csv_row(args.model, args.training_range or "train"))
        summary["test"] = rep.to_dict()
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_bounds(args) -> int:
    spec = FeatureSpec.from_json(args.spec)
    rep = bound_report(spec, args.delta, args.feature_index, args.d, args.r, args.epsilon)
    text = rep.to_json()
    out = _out_dir(args)
    (out / "bounds.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_graphdist(args) -> int:
    if bool(args.edges) == bool(args.memberships):
        raise ConfigError("give exactly one of --edges or --memberships")
    g = read_edge_list(args.edges) if args.edges else overlap_matrix(read_memberships(args.memberships))
    emb = graph_embedding(g, k=args.k)
    out = _out_dir(args)
    write_embedding_csv(emb, out / "embedding.csv")
    write_distance_csv(emb, out / "distances.csv")
    if emb.boundary_degenerate:
        warnings.warn("eigenvalues k and k+1 coincide; the embedding depends on the solver's basis", stacklevel=1)
    if emb.zero_rows:
        warnings.warn(f"zero embedding rows for nodes {list(emb.zero_rows)}", stacklevel=1)
    if args.rank:
        if not args.test_nodes:
            raise ConfigError("--rank needs --test-nodes")
        cands = [_csv_list(group) for group in args.rank.split(";") if group.strip()]
        ranked = rank_environments(emb, _csv_list(args.test_nodes), cands, args.aggregation)
        with open(out / "ranking.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "candidate", "nodes", "distance"])
            for i, r in enumerate(ranked):
                w.writerow([i, r.position, ";".join(cands[r.position]), repr(r.distance)])
        for r in ranked:
            print(f"{r.distance:.6f}\t{','.join(cands[r.position])}")
    print(f"wrote embedding (k={emb.k}) for {len(emb.nodes)} nodes to {out}")
    return EXIT_OK


def _param(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def cmd_recipe(args) -> int:
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad config file: {exc}") from exc
    d["recipe"] = args.name
    if args.model:
        d["model"] = args.model
    if args.seeds:
        d["seeds"] = _csv_list(args.seeds, int)
    elif "seeds" not in d and args.seed_given:
        d["seeds"] = [args.seed]
    if args.delta is not None:
        d["delta"] = args.delta
    if args.dataset:
        d["dataset_path"] = args.dataset
    if args.spec:
        d["spec_path"] = args.spec
    if args.partition:
        d["partition"] = _csv_list(args.partition)
    if args.param:
        d.setdefault("params", {}).update(dict(args.param))
    d["out_dir"] = str(args.out_dir)
    config = ExperimentConfig.from_dict(d)
    out = run_recipe(config)
    print(f"report written to {out / 'report.json'}")
    return EXIT_OK


# --------------------------------------------------------------------------- #
# Parser
# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    glob = argparse.ArgumentParser(add_help=False)
    glob.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (default 0)")
    glob.add_argument("--out-dir", default=argparse.SUPPRESS, help="output directory (default ./out)")

    p = argparse.ArgumentParser(prog="pirm", description=__doc__.splitlines()[0], parents=[glob])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[glob], help="generate synthetic environments as CSV")
    g.add_argument("--kind", choices=("model", "example1", "appendix"), default="model")
    g.add_argument("--spec", help="FeatureSpec JSON (kind=model)")
    g.add_argument("--envs", type=int, default=4)
    g.add_argument("--n", type=int, default=1000, help="rows per environment")
    g.add_argument("--sigmas", default="0.2,1,2,5")
    g.add_argument("--signs", default="1,1,-1,-1", help="c(e) per env: +-1 for example1, 0/1 for appendix")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[glob], help="train one model on a datasets CSV")
    t.add_argument("--data", required=True)
    t.add_argument("--model", choices=MODELS, default="irm")
    t.add_argument("--partition", help="comma-separated env ids forming the partition")
    t.add_argument("--test", help="datasets CSV of test environments")
    t.add_argument("--training-range", help="label for the risk-report CSV row")
    t.add_argument("--config", help="TrainConfig JSON; flags below override it")
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--iterations", type=int)
    t.add_argument("--anneal-iters", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--penalty-form", choices=("squared-norm", "norm"))
    t.add_argument("--restarts", type=int)
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bounds", parents=[glob], help="evaluate the oracle bounds for a spec")
    b.add_argument("--spec", required=True)
    b.add_argument("--delta", type=int, required=True)
    b.add_argument("--feature-index", type=int, default=1, help="0-based index of the feature of interest")
    b.add_argument("--d", type=int, default=10)
    b.add_argument("--r", type=int, default=5)
    b.add_argument("--epsilon", type=float, default=0.05)
    b.set_defaults(func=cmd_bounds)

    gd = sub.add_parser("graphdist", parents=[glob], help="spectral distances between communities")
    gd.add_argument("--edges", help="TSV edge list: node_a, node_b, weight")
    gd.add_argument("--memberships", help="CSV with columns element,community")
    gd.add_argument("--k", type=int, default=DEFAULT_K)
    gd.add_argument("--test-nodes", help="comma-separated test communities")
    gd.add_argument("--rank", help="candidate environments: 'a,b;c,d'")
    gd.add_argument("--aggregation", choices=("mean", "min"), default="mean")
    gd.set_defaults(func=cmd_graphdist)

    r = sub.add_parser("recipe", parents=[glob], help="run an experiment recipe")
    r.add_argument("name", choices=RECIPES)
    r.add_argument("--config", help="ExperimentConfig JSON; flags below override it")
    r.add_argument("--model", choices=MODELS)
    r.add_argument("--seeds", help="comma-separated seeds (overrides --seed)")
    r.add_argument("--delta", type=int)
    r.add_argument("--dataset")
    r.add_argument("--spec")
    r.add_argument("--partition", help="comma-separated bins or ranges, e.g. 1930-1970")
    r.add_argument("--param", type=_param, action="append", help="recipe parameter key=value (JSON value)")
    r.set_defaults(func=cmd_recipe)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed_given = hasattr(args, "seed")
    if not hasattr(args, "seed"):
        args.seed = 0
    if not hasattr(args, "out_dir"):
        args.out_dir = "out"
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"pirm: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        print(f"pirm: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
