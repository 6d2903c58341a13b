"""Command-line entry point: keygen, enroll, verify, bench, attack, simulate, serve.

Exit codes: 0 success/accept, 1 reject (or refused attack), 2 usage error,
3 I/O or format error. Structured output goes to stdout as JSON and always
carries the effective configuration.

Commands run in-process unless ``--server URL`` is given, in which case
keygen, enroll, verify and attack are delegated to a running service.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .bench import (BenchConfig, BenchError, band_mass, default_grid, emit_report, run_bench,
                    score_histograms)
from .container import HelperFormatError, deserialize_helper, serialize_helper
from .embedding import EmbeddingError
from .security import AttackBudgetError, brute_force_attack, work_factor
from .sources import (ChaffSource, ChannelSet, PopulationSpec, SourceError, ingest_embeddings,
                      sample_population, write_embeddings)
from .vault import EnrollError, ParamsError, ProtocolParams, VerifyError, enroll, keygen, verify

CONFIG_ENV = "MVOT_CONFIG"

EXIT_OK, EXIT_REJECT, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _load_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def load_config(path: str | None) -> dict:
    """Config file with optional "params", "population" and "bench" sections."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    cfg = _load_json(path)
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return cfg


def _emit(obj: dict) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True, default=str)
    sys.stdout.write("\n")


def _rng(seed):
    return np.random.default_rng(seed)


def _load_params(path) -> ProtocolParams:
    d = _load_json(path)
    return ProtocolParams.from_dict(d.get("params", d))


def _population(cfg: dict, params: ProtocolParams | None = None, seed=None) -> PopulationSpec:
    pop = dict(cfg.get("population", {}))
    if params is not None:
        pop.update(dim=params.dim, n_channels=params.n)
    if seed is not None and "rng_seed" not in pop:
        pop["rng_seed"] = seed
    try:
        return PopulationSpec.from_dict(pop)
    except TypeError as e:
        raise UsageError(f"bad population spec: {e}") from e


def _client(args):
    from .service.client import ServiceClient

    return ServiceClient(args.server)


def _channels_from(source: str, spec: PopulationSpec, n: int, identity: str | None,
                   rng) -> ChannelSet:
    """Resolve ``synthetic:<id>[:genuine|imposter]``, ``synthetic:unrelated`` or a file."""
    if source.startswith("synthetic"):
        parts = source.split(":")
        pop = sample_population(spec)
        if len(parts) < 2:
            raise UsageError("synthetic source needs an identity, e.g. synthetic:0")
        if parts[1] == "unrelated":
            return pop.unrelated_query(rng)
        try:
            ident = int(parts[1])
        except ValueError:
            raise UsageError(f"bad synthetic identity {parts[1]!r}")
        if not 0 <= ident < spec.num_identities:
            raise UsageError(f"identity {ident} outside population of {spec.num_identities}")
        kind = parts[2] if len(parts) > 2 else "exact"
        if kind == "exact":
            return pop.template(ident)
        if kind == "genuine":
            return pop.genuine_query(ident, rng)
        if kind == "imposter":
            return pop.imposter_query(ident, rng)
        raise UsageError(f"unknown synthetic query kind {kind!r}")
    table = ingest_embeddings(source, spec.dim)
    ids = table.identities()
    if not ids:
        raise SourceError(f"{source} holds no embeddings")
    return table.channel_set(identity if identity is not None else ids[0], n)


def cmd_keygen(args, cfg) -> int:
    fields = dict(cfg.get("params", {}))
    for key in ("gamma", "n", "k", "dim", "m", "tr"):
        val = getattr(args, key)
        if val is not None:
            fields[key] = val
    if "gamma" not in fields:
        raise UsageError("--gamma is required")
    if args.server:
        body = _client(args).keygen(**fields)
        params = ProtocolParams.from_dict(body["params"])
    else:
        gamma = fields.pop("gamma")
        params = keygen(gamma, **fields)
    out = {
        "command": "keygen",
        "params": params.to_dict(),
        "work_factor": work_factor(params).__dict__,
        "seed": args.seed,
    }
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    else:
        _emit(out)
    return EXIT_OK


def cmd_enroll(args, cfg) -> int:
    params = _load_params(args.params)
    spec = _population(cfg, params)
    rng = _rng(args.seed)
    template = _channels_from(args.template, spec, params.n, args.identity, rng)
    if args.chaff == "synthetic":
        chaff = sample_population(spec).chaff_source()
        chaff_desc = {"mode": "synthetic", "population": spec.to_dict()}
    else:
        chaff = ChaffSource.from_file(args.chaff, params.dim)
        chaff_desc = None
    if args.server:
        if chaff_desc is None:
            chaff_desc = {"mode": "vectors",
                          "vectors": [[list(map(float, r)) for r in chaff.table.channel_rows(c)]
                                      for c in range(params.n)]}
        blob = _client(args).enroll(params.to_dict(), template, chaff_desc, args.seed)
        helper = deserialize_helper(blob)
    else:
        helper = enroll(template, chaff, params, rng)
        blob = serialize_helper(helper)
    Path(args.out).write_bytes(blob)
    _emit({
        "command": "enroll",
        "helper": str(args.out),
        "bytes": len(blob),
        "entry_bytes": 4 * params.dim * params.n * (params.m + 1),
        "commitments": len(helper.commitments),
        "params": params.to_dict(),
        "population": spec.to_dict(),
        "template": args.template,
        "chaff": args.chaff,
        "seed": args.seed,
    })
    return EXIT_OK


def cmd_verify(args, cfg) -> int:
    blob = Path(args.helper).read_bytes()
    helper = deserialize_helper(blob)
    params = helper.params
    spec = _population(cfg, params)
    query = _channels_from(args.query, spec, params.n, args.identity, _rng(args.seed))
    if args.server:
        result = _client(args).verify(blob, query, args.tr)
    else:
        result = verify(helper, query, args.tr).to_dict()
    _emit({"command": "verify", "query": args.query, "params": params.to_dict(),
           "population": spec.to_dict(), "seed": args.seed, **result})
    return EXIT_OK if result["accepted"] else EXIT_REJECT


def cmd_attack(args, cfg) -> int:
    blob = Path(args.helper).read_bytes()
    helper = deserialize_helper(blob)
    wf = work_factor(helper.params)
    base = {"command": "attack", "params": helper.params.to_dict(), "budget": args.budget,
            "seed": args.seed, "work_factor": wf.__dict__}
    try:
        if args.server:
            from .service.client import ServiceError

            try:
                result = _client(args).attack(blob, args.budget, args.seed)
            except ServiceError as e:
                if e.status == 409:
                    raise AttackBudgetError(e.detail)
                raise
        else:
            result = brute_force_attack(helper, _rng(args.seed), args.budget).__dict__
    except AttackBudgetError as e:
        _emit({**base, "refused": True, "message": str(e)})
        print(f"attack refused: {e}", file=sys.stderr)
        return EXIT_REJECT
    _emit({**base, "refused": False, **result})
    return EXIT_OK if result["succeeded"] else EXIT_REJECT


def _bench_config(args, cfg) -> BenchConfig:
    d = dict(cfg.get("bench", {}))
    if args.config_file:
        loaded = _load_json(args.config_file)
        d.update(loaded.get("bench", loaded))
    if "population" not in d and "population" in cfg:
        d["population"] = cfg["population"]
    if args.seed is not None:
        d["rng_seed"] = args.seed
    if args.threads is not None:
        d["threads"] = args.threads
    d.setdefault("threads", 0)
    for key in ("genuine_trials", "imposter_trials"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    try:
        config = BenchConfig.from_dict(d)
    except TypeError as e:
        raise UsageError(f"bad bench config: {e}") from e
    if not config.params_grid:
        config.params_grid = default_grid(config.population.dim, config.population.n_channels,
                                          config.table_tr)
    return config


def cmd_bench(args, cfg) -> int:
    config = _bench_config(args, cfg)
    report = run_bench(config)
    out = Path(args.out)
    files = emit_report(report, out / "report.json", "json")
    files += emit_report(report, out, "csv")
    _emit({"command": "bench", "config": config.to_dict(), "files": [str(f) for f in files],
           "auc": report.roc[0]["auc"], "table": [
               {k: row[k] for k in ("label", "tpr", "tnr", "false_accepts")} for row in report.table]})
    return EXIT_OK


def cmd_simulate(args, cfg) -> int:
    d = dict(cfg.get("population", {}))
    if args.spec:
        d.update(_load_json(args.spec))
    if args.seed is not None:
        d["rng_seed"] = args.seed
    try:
        spec = PopulationSpec.from_dict(d)
    except TypeError as e:
        raise UsageError(f"bad population spec: {e}") from e
    pop = sample_population(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(((f"id{i}", c, pop.latents[i, c]) for i in range(spec.num_identities)
                      for c in range(spec.n_channels)), out / "embeddings.csv")
    files = [out / "embeddings.csv"]
    if args.chaff_count:
        source = pop.chaff_source()
        rng = _rng(spec.rng_seed)
        write_embeddings(((f"chaff{j}", c, row) for c in range(spec.n_channels)
                          for j, row in enumerate(source.draw(c, args.chaff_count, rng))),
                         out / "chaff.csv")
        files.append(out / "chaff.csv")
    hist = score_histograms(pop, args.samples, spec.rng_seed)
    edges = hist["bin_edges"]
    for kind in ("genuine", "imposter", "chaff"):
        path = out / f"hist_{kind}.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("bin_low,bin_high,count\n")
            for lo, hi, c in zip(edges, edges[1:], hist[kind]):
                fh.write(f"{lo},{hi},{c}\n")
        files.append(path)
    bands = {
        "genuine": band_mass(hist, "genuine", spec.genuine_cos.low, spec.genuine_cos.high),
        "imposter": band_mass(hist, "imposter", spec.imposter_cos.low, spec.imposter_cos.high),
        "chaff": band_mass(hist, "chaff", spec.unrelated_cos.low, spec.unrelated_cos.high),
    }
    _emit({"command": "simulate", "population": spec.to_dict(),
           "effective_dim": spec.effective_dim, "band_mass": bands,
           "files": [str(f) for f in files]})
    return EXIT_OK


def cmd_serve(args, cfg) -> int:
    import uvicorn

    uvicorn.run("mvot.service.app:app", host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvot", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    parser.add_argument("--seed", type=int, default=None,
                        help="root seed; omit for fresh OS entropy")
    parser.add_argument("--threads", type=int, default=None,
                        help="Monte-Carlo worker threads (0 = all cores, 1 = serial)")
    parser.add_argument("--server", default=None, help="delegate to a running service at URL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="choose chaff count for a security level")
    p.add_argument("--gamma", type=positive_int)
    p.add_argument("--n", type=positive_int)
    p.add_argument("--k", type=positive_int)
    p.add_argument("--dim", type=positive_int)
    p.add_argument("--m", type=positive_int, help="validate this chaff count instead")
    p.add_argument("--tr", type=positive_int)
    p.add_argument("--out", help="params file (default: stdout)")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("enroll", help="build a helper file")
    p.add_argument("--params", required=True)
    p.add_argument("--template", required=True, help="synthetic:<id> or embedding file")
    p.add_argument("--identity", help="identity to take from an embedding file")
    p.add_argument("--chaff", default="synthetic", help="'synthetic' or embedding file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("verify", help="check a query against a helper file")
    p.add_argument("--helper", required=True)
    p.add_argument("--query", required=True,
                   help="synthetic:<id>[:genuine|:imposter], synthetic:unrelated, or file")
    p.add_argument("--identity")
    p.add_argument("--tr", type=positive_int)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="ROC, TPR/TNR table, histograms and timing")
    p.add_argument("--config", dest="config_file", help="bench config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--genuine-trials", dest="genuine_trials", type=positive_int)
    p.add_argument("--imposter-trials", dest="imposter_trials", type=positive_int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("attack", help="brute-force a (small) helper file")
    p.add_argument("--helper", required=True)
    p.add_argument("--budget", type=positive_int, default=2**24)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("simulate", help="sample a synthetic population")
    p.add_argument("--spec", help="population spec JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=positive_int, default=1000)
    p.add_argument("--chaff-count", dest="chaff_count", type=positive_int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (UsageError, ParamsError, VerifyError, BenchError) as e:
        print(f"mvot: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError, HelperFormatError, SourceError, EnrollError,
            EmbeddingError) as e:
        print(f"mvot: error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:
        from .service.client import ServiceError

        if isinstance(e, ServiceError):
            print(f"mvot: error: {e}", file=sys.stderr)
            return EXIT_USAGE if e.status in (400, 422) else EXIT_IO
        raise


if __name__ == "__main__":
    sys.exit(main())
