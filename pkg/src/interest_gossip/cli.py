"""Experiment runner.

Exit codes: 0 success, 2 invalid configuration, 3 I/O failure.

Settings come from built-in defaults, then an optional ``--config`` file of
``key = value`` lines (keys are the long flag names, ``-`` or ``_``; ``#``
starts a comment; ``inject`` may repeat), then command-line flags. Later
sources win.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import random
import statistics
import sys
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

from .profile import Item, ProfileError, parse_ident, write_profiles_csv
from .simnet import ConfigError, Injection, SimConfig, run
from .workload import WorkloadError, WorkloadParams, generate, ingest_csv

log = logging.getLogger("interest_gossip")

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3

# name -> (type, default)
OPTIONS = {
    "peers": (int, 200),
    "capacity": (int, 8),
    "theta_conn": (float, 0.05),
    "theta_rec": (float, 0.0),
    "merge_threshold": (float, 0.1),
    "rounds": (int, 30),
    "churn": (float, 0.0),
    "loss": (float, 0.0),
    "seed": (int, 0),
    "seeds": (str, None),
    "workload_csv": (str, None),
    "communities": (int, 4),
    "interests_per_peer": (int, 1),
    "items_per_interest": (int, 12),
    "noise": (float, 0.1),
    "item_overlap": (float, 0.5),
    "bootstrap_fanout": (int, 3),
    "pull_interval": (int, 0),
    "stale_after": (int, 0),
    "rejoin_after": (int, 1),
    "suspect_rounds": (int, 3),
    "out": (str, "results"),
    "trace": (bool, False),
}


@dataclass
class ExperimentSpec:
    sim: SimConfig
    workload: WorkloadParams | Path
    out: Path
    seeds: list
    inject: list = field(default_factory=list)  # raw "round:peer:item-spec" strings
    trace: bool = False

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("seeds list is empty")
        replace(self.sim, injections=()).validate()
        if isinstance(self.workload, WorkloadParams):
            try:
                self.workload.validate()
            except WorkloadError as exc:
                raise ConfigError(str(exc)) from None
        for raw in self.inject:
            parse_injection(raw)


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def read_config_file(path) -> tuple:
    """Parse a ``key = value`` file into ``(settings, inject_list)``."""
    settings, inject = {}, []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            key, value = (t.strip() for t in line.split("=", 1))
            key = key.replace("-", "_")
            if key == "inject":
                inject.append(value)
                continue
            if key not in OPTIONS:
                raise ConfigError(f"{path}:{n}: unknown key {key!r}")
            typ = OPTIONS[key][0]
            try:
                settings[key] = _parse_bool(value) if typ is bool else typ(value)
            except ValueError:
                raise ConfigError(f"{path}:{n}: bad value for {key}: {value!r}") from None
    return settings, inject


def parse_injection(raw: str) -> tuple:
    """``round:peer:item-spec`` -> ``(round, peer, item_id, features or None)``.

    The item spec is either ``ID`` (features drawn from the peer's planted
    community) or ``ID=f1;f2;...`` (explicit features).
    """
    parts = raw.split(":", 2)
    if len(parts) != 3:
        raise ConfigError(f"bad --inject {raw!r}: expected round:peer:item-spec")
    try:
        rnd = int(parts[0])
    except ValueError:
        raise ConfigError(f"bad --inject {raw!r}: round is not an integer") from None
    peer = parse_ident(parts[1])
    spec = parts[2]
    if "=" in spec:
        item_id, feats = spec.split("=", 1)
        features = tuple(f for f in feats.split(";") if f)
        if not features:
            raise ConfigError(f"bad --inject {raw!r}: empty feature list")
    else:
        item_id, features = spec, None
    if not item_id:
        raise ConfigError(f"bad --inject {raw!r}: empty item id")
    return rnd, peer, item_id, features


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="interest-gossip", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        S = argparse.SUPPRESS
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--peers", type=int, default=S)
        p.add_argument("--capacity", type=int, default=S, help="neighbors per interest (C)")
        p.add_argument("--theta-conn", type=float, default=S)
        p.add_argument("--theta-rec", type=float, default=S)
        p.add_argument("--merge-threshold", type=float, default=S)
        p.add_argument("--rounds", type=int, default=S)
        p.add_argument("--churn", type=float, default=S, help="per-round death/revival probability")
        p.add_argument("--loss", type=float, default=S, help="per-message loss probability")
        p.add_argument("--seed", type=int, default=S)
        p.add_argument("--seeds", default=S, help="comma-separated seeds, one run each")
        p.add_argument("--workload-csv", default=S, help="profile CSV instead of a generated workload")
        p.add_argument("--communities", type=int, default=S)
        p.add_argument("--interests-per-peer", type=int, default=S)
        p.add_argument("--items-per-interest", type=int, default=S)
        p.add_argument("--noise", type=float, default=S)
        p.add_argument("--item-overlap", type=float, default=S)
        p.add_argument("--bootstrap-fanout", type=int, default=S)
        p.add_argument("--pull-interval", type=int, default=S)
        p.add_argument("--stale-after", type=int, default=S)
        p.add_argument("--rejoin-after", type=int, default=S)
        p.add_argument("--suspect-rounds", type=int, default=S)
        p.add_argument("--inject", action="append", default=S, metavar="ROUND:PEER:ITEM",
                       help="inject an item; repeatable")
        p.add_argument("--out", default=S)
        p.add_argument("--trace", action="store_true", default=S, help="also write trace.csv")
        p.add_argument("--validate-only", action="store_true",
                       help="parse and check the configuration, run nothing")

    common(sub.add_parser("run", help="run one simulation per seed"))
    sw = sub.add_parser("sweep", help="run once per value of one parameter")
    common(sw)
    sw.add_argument("--param", required=True, help="option name to vary, e.g. capacity")
    sw.add_argument("--values", required=True, help="comma-separated values")
    gen = sub.add_parser("generate", help="write a planted workload as profile CSV")
    for name in ("peers", "communities", "interests_per_peer", "items_per_interest", "seed"):
        gen.add_argument("--" + name.replace("_", "-"), type=int, default=OPTIONS[name][1])
    gen.add_argument("--noise", type=float, default=0.1)
    gen.add_argument("--item-overlap", type=float, default=0.5)
    gen.add_argument("--out", required=True)
    return ap


def resolve_settings(args: argparse.Namespace) -> tuple:
    """Merge defaults, config file and flags. Returns ``(settings, inject, explicit_keys)``."""
    settings = {k: d for k, (_, d) in OPTIONS.items()}
    inject: list = []
    explicit = set()
    if getattr(args, "config", None):
        try:
            file_settings, inject = read_config_file(args.config)
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        settings.update(file_settings)
        explicit |= set(file_settings)
    for k in OPTIONS:
        if hasattr(args, k):
            settings[k] = getattr(args, k)
            explicit.add(k)
    if hasattr(args, "inject"):
        inject = list(args.inject)
    return settings, inject, explicit


def spec_from_settings(settings: dict, inject: list, explicit: set) -> ExperimentSpec:
    if settings["seeds"]:
        try:
            seeds = [int(s) for s in str(settings["seeds"]).split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"bad seeds list {settings['seeds']!r}") from None
    else:
        seeds = [settings["seed"]]
    if settings["workload_csv"]:
        workload = Path(settings["workload_csv"])
    else:
        workload = WorkloadParams(
            n_peers=settings["peers"],
            n_communities=settings["communities"],
            interests_per_peer=settings["interests_per_peer"],
            items_per_interest=settings["items_per_interest"],
            feature_noise=settings["noise"],
            item_overlap=settings["item_overlap"],
        )
    sim = SimConfig(
        peers=settings["peers"],
        capacity=settings["capacity"],
        theta_conn=settings["theta_conn"],
        theta_rec=settings["theta_rec"],
        merge_threshold=settings["merge_threshold"],
        rounds=settings["rounds"],
        churn=settings["churn"],
        loss=settings["loss"],
        seed=seeds[0],
        bootstrap_fanout=settings["bootstrap_fanout"],
        pull_interval=settings["pull_interval"],
        stale_after=settings["stale_after"],
        rejoin_after=settings["rejoin_after"],
        suspect_rounds=settings["suspect_rounds"],
    )
    spec = ExperimentSpec(sim, workload, Path(settings["out"]), seeds, list(inject),
                          bool(settings["trace"]))
    spec.peers_explicit = "peers" in explicit
    spec.validate()
    return spec


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _load_workload(spec: ExperimentSpec, seed: int):
    if isinstance(spec.workload, Path):
        try:
            profiles = ingest_csv(spec.workload, spec.sim.merge_threshold)
        except WorkloadError as exc:
            raise ConfigError(str(exc)) from None
        return profiles
    return generate(**{**vars(spec.workload), "seed": seed})


def _injections(spec: ExperimentSpec, workload, seed: int) -> tuple:
    out = []
    for k, raw in enumerate(spec.inject):
        rnd, peer, item_id, features = parse_injection(raw)
        community = None
        if features is not None:
            item = Item(item_id, frozenset(features))
        else:
            truth = getattr(workload, "ground_truth", None)
            if truth is None or peer not in truth:
                raise ConfigError(f"--inject {raw!r}: features required without a generated workload")
            community = min(truth[peer])
            item = workload.fresh_item(community, item_id, random.Random(f"{seed}/{k}/{item_id}"))
        out.append(Injection(rnd, peer, item, community))
    return tuple(out)


def run_seed(spec: ExperimentSpec, seed: int, out_dir: Path) -> dict:
    workload = _load_workload(spec, seed)
    n = len(workload.profiles) if hasattr(workload, "profiles") else len(workload)
    sim = spec.sim
    if n != sim.peers:
        if isinstance(spec.workload, Path) and not getattr(spec, "peers_explicit", False):
            sim = replace(sim, peers=n)
        else:
            raise ConfigError(f"workload has {n} peers but --peers is {sim.peers}")
    sim = replace(sim, seed=seed, injections=_injections(spec, workload, seed))
    sim.validate()
    report = run(sim, workload, trace=spec.trace)
    _atomic_write(out_dir / "rounds.csv", report.rounds_csv())
    _atomic_write(out_dir / "summary.txt", json.dumps(report.summary, indent=2, sort_keys=True) + "\n")
    if spec.trace:
        _atomic_write(out_dir / "trace.csv", report.trace_csv())
    return report.summary


def _aggregate(summaries: dict) -> dict:
    def stats(values):
        vals = [v for v in values if v is not None]
        if not vals:
            return {"mean": None, "std": None, "n": 0}
        return {"mean": math.fsum(vals) / len(vals),
                "std": statistics.pstdev(vals) if len(vals) > 1 else 0.0, "n": len(vals)}

    keys = ("quality", "purity", "recall", "precision")
    out = {k: stats([s["final"][k] for s in summaries.values()]) for k in keys}
    out["convergence_round"] = stats([s["convergence_round"] for s in summaries.values()])
    out["messages_sent"] = stats([s["messages"]["sent"] for s in summaries.values()])
    out["seeds"] = list(summaries)
    return out


def run_experiment(spec: ExperimentSpec) -> dict:
    """One run per seed under ``spec.out/seed-<n>/`` plus ``aggregate.txt``."""
    summaries = {}
    for seed in spec.seeds:
        log.info("seed %d", seed)
        summaries[seed] = run_seed(spec, seed, spec.out / f"seed-{seed}")
    agg = _aggregate(summaries)
    _atomic_write(spec.out / "aggregate.txt", json.dumps(agg, indent=2, sort_keys=True) + "\n")
    return summaries


def sweep(spec: ExperimentSpec, param: str, values: list, settings: dict, inject: list,
          explicit: set) -> None:
    """``run_experiment`` per value of ``param``; combined ``sweep.csv`` in ``spec.out``."""
    key = param.replace("-", "_")
    if key not in OPTIONS or key in ("out", "seeds", "workload_csv", "trace"):
        raise ConfigError(f"cannot sweep over {param!r}")
    typ = OPTIONS[key][0]
    rows = ["param,value,seed,convergence_round,quality,purity,recall,precision,sent"]
    for raw in values:
        try:
            val = _parse_bool(raw) if typ is bool else typ(raw)
        except ValueError:
            raise ConfigError(f"bad sweep value {raw!r} for {key}") from None
        sub = dict(settings, **{key: val, "out": str(spec.out / f"{key}={raw}")})
        sub_spec = spec_from_settings(sub, inject, explicit | {key})
        for seed, s in run_experiment(sub_spec).items():
            f = s["final"]
            rows.append(",".join(
                "" if x is None else (f"{x:.6f}" if isinstance(x, float) else str(x))
                for x in (key, raw, seed, s["convergence_round"], f["quality"], f["purity"],
                          f["recall"], f["precision"], s["messages"]["sent"])
            ))
    _atomic_write(spec.out / "sweep.csv", "\n".join(rows) + "\n")


def _setup_logging() -> None:
    level = os.environ.get("IG_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            wl = generate(args.peers, args.communities, args.interests_per_peer,
                          args.items_per_interest, args.noise, args.seed,
                          item_overlap=args.item_overlap)
            path = Path(args.out)
            path.parent.mkdir(parents=True, exist_ok=True)
            with tempfile.NamedTemporaryFile("w", dir=path.parent, delete=False, newline="",
                                             encoding="utf-8", suffix=".tmp") as fh:
                write_profiles_csv(wl.profiles.values(), fh)
            os.replace(fh.name, path)
            return EXIT_OK
        settings, inject, explicit = resolve_settings(args)
        spec = spec_from_settings(settings, inject, explicit)
        if args.validate_only:
            print("configuration ok")
            return EXIT_OK
        if args.command == "sweep":
            sweep(spec, args.param, [v for v in args.values.split(",") if v], settings, inject,
                  explicit)
        else:
            run_experiment(spec)
        return EXIT_OK
    except (ConfigError, WorkloadError, ProfileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
