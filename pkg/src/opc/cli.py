"""Command-line driver: one subcommand per pipeline stage.

Exit codes: 0 success, 2 configuration error, 3 missing or unreadable
artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("opc")


def _limit_threads(n: int) -> None:
    # must run before numpy loads its BLAS
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _pre_scan_threads(argv) -> int:
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            return int(argv[i + 1])
        if a.startswith("--threads="):
            return int(a.split("=", 1)[1])
    return 1


class MissingArtifact(Exception):
    pass


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"required input {p} does not exist; run the upstream stage first")
    return p


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", default="desk", help="named defaults (desk, full, smoke)")
    common.add_argument("--config", help="key = value file; overrides the preset")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=1, help="worker thread cap (1 = bitwise reproducible)")
    common.add_argument("--env", choices=["mc", "reacher"])
    common.add_argument("--task")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="opc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="sample a random policy bank")
    g.add_argument("--count", type=int)

    r = sub.add_parser("rollout", parents=[common], help="collect deterministic trajectories")
    r.add_argument("--bank", default=None)
    r.add_argument("--episodes", type=int, default=None)
    r.add_argument("--ids-from", help="curated dataset file; only its policies are rolled out")
    r.add_argument("--output", help="archive path (default <out>/trajectories[-curated].opct)")

    c = sub.add_parser("curate", parents=[common], help="score the bank and keep the top percentile")
    c.add_argument("--bank")
    c.add_argument("--archive")
    c.add_argument("--method", choices=["opc", "apc"])
    c.add_argument("--percentile", type=float)

    t = sub.add_parser("train-ae", parents=[common], help="train the policy autoencoder")
    t.add_argument("--bank")
    t.add_argument("--curated")
    t.add_argument("--archive")
    t.add_argument("--latent-dim", type=int)
    t.add_argument("--loss", choices=["OPC", "APC", "opc", "apc"])
    t.add_argument("--output", help="model path (default <out>/model.opcm)")

    o = sub.add_parser("optimize", parents=[common], help="PGPE in latent (or parameter) space")
    o.add_argument("--model", help="autoencoder checkpoint; omit with --parameter-space")
    o.add_argument("--parameter-space", action="store_true", help="search raw policy weights (identity decoder)")
    o.add_argument("--seeds", help="e.g. 0-9 or 0,3,5")
    o.add_argument("--pgpe-preset")
    o.add_argument("--budget", type=int)
    o.add_argument("--no-warm-start", action="store_true")

    ge = sub.add_parser("grid-eval", parents=[common], help="rewards on a uniform latent grid")
    ge.add_argument("--model")
    ge.add_argument("--per-dim", type=int)

    rp = sub.add_parser("report", parents=[common], help="return histograms of curated sets")
    rp.add_argument("--bank")
    rp.add_argument("--curated", nargs="+", help="curated dataset files to compare")
    rp.add_argument("--bins", type=int)
    return p


def _config(args, extra: dict):
    from .pipeline import build_config

    over = {"seed": args.seed, "threads": args.threads, "env": args.env, "task": args.task, **extra}
    for item in args.set:
        if "=" not in item:
            from .pipeline import ConfigError

            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip().replace("-", "_")] = v.strip()
    return build_config(args.preset, args.config, over)


def _manifest(out: Path, command: str, cfg, inputs: dict, outputs: dict, extra=None) -> None:
    from dataclasses import asdict

    from . import __version__
    from .store import file_sha256

    doc = {
        "command": command,
        "version": __version__,
        "config": asdict(cfg),
        "inputs": {k: {"path": str(v), "sha256": file_sha256(v)} for k, v in inputs.items()},
        "outputs": {k: {"path": str(v), "sha256": file_sha256(v)} for k, v in outputs.items()},
        **(extra or {}),
    }
    if cfg.env == "reacher":
        from .envs import ReacherParams

        doc["env_params"] = asdict(ReacherParams())
    (out / f"manifest-{command}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _run(args) -> int:
    import numpy as np

    from . import compression, curation, pgpe, pipeline, store

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command

    if cmd == "gen":
        cfg = _config(args, {"count": args.count})
        bank = pipeline.generate_bank(cfg.env, cfg.count, cfg.seed)
        path = out / "bank.opcb"
        store.save_bank(path, bank)
        _manifest(out, cmd, cfg, {}, {"bank": path})
        print(f"wrote {bank.count} {cfg.env} policies ({bank.arch.param_count} weights each) to {path}")

    elif cmd == "rollout":
        cfg = _config(args, {})
        bank_path = _need(args.bank or out / "bank.opcb")
        bank = store.load_bank(bank_path)
        inputs = {"bank": bank_path}
        ids, task = None, args.task or "none"
        if args.ids_from:
            inputs["curated"] = _need(args.ids_from)
            ids = store.load_curated(args.ids_from).ids
        episodes = args.episodes or (cfg.train_episodes if ids is not None else cfg.curation_episodes)
        archive = pipeline.collect(bank, task, episodes, cfg.seed, ids=ids)
        default = "trajectories-curated.opct" if ids is not None else "trajectories.opct"
        path = Path(args.output) if args.output else out / default
        store.save_archive(path, archive)
        _manifest(out, cmd + ("-curated" if ids is not None else ""), cfg, inputs, {"archive": path})
        print(f"wrote {len(archive)} trajectories ({len(archive.actions)} steps) to {path}")

    elif cmd == "curate":
        cfg = _config(args, {"method": args.method, "percentile": args.percentile})
        bank_path = _need(args.bank or out / "bank.opcb")
        arch_path = _need(args.archive or out / "trajectories.opct")
        bank, archive = store.load_bank(bank_path), store.load_archive(arch_path)
        archive.check_bank(bank)
        table, data = pipeline.curate(bank, archive, cfg)
        csv_path, data_path = out / f"scores-{cfg.method}.csv", out / f"curated-{cfg.method}.opcc"
        curation.write_scores_csv(csv_path, table, data)
        store.save_curated(data_path, data)
        _manifest(out, f"{cmd}-{cfg.method}", cfg, {"bank": bank_path, "archive": arch_path},
                  {"scores": csv_path, "curated": data_path})
        print(f"{cfg.method.upper()}: kept {len(data)} of {len(table)} policies -> {data_path}")

    elif cmd == "train-ae":
        cfg = _config(args, {"latent_dim": args.latent_dim, "loss": args.loss})
        bank_path = _need(args.bank or out / "bank.opcb")
        cur_path = _need(args.curated or out / f"curated-{cfg.method}.opcc")
        arch_path = _need(args.archive or out / "trajectories-curated.opct")
        bank, data, archive = store.load_bank(bank_path), store.load_curated(cur_path), store.load_archive(arch_path)
        archive.check_bank(bank)
        path = Path(args.output) if args.output else out / "model.opcm"
        partial = path.with_name(path.name + ".partial")
        res = pipeline.train_autoencoder(bank, data.ids, archive, cfg, cfg.seed,
                                         checkpoint=lambda m, it: store.save_model(partial, m, {"outer": it}))
        store.save_model(path, res.model, {"env": bank.env})
        if partial.exists():
            partial.unlink()
        loss_path = out / "loss.csv"
        compression.write_loss_csv(loss_path, res.log)
        _manifest(out, cmd, cfg, {"bank": bank_path, "curated": cur_path, "archive": arch_path},
                  {"model": path, "loss": loss_path})
        print(f"trained k={cfg.latent_dim} autoencoder for {res.outer_iterations} outer iterations "
              f"({len(res.log)} steps), final loss {res.log[-1].loss:.6g} -> {path}")

    elif cmd == "optimize":
        cfg = _config(args, {"opt_seeds": args.seeds, "pgpe_preset": args.pgpe_preset, "budget": args.budget,
                             "warm_start": False if args.no_warm_start else None})
        seeds = pipeline.parse_seeds(cfg.opt_seeds)
        inputs, model = {}, None
        if not args.parameter_space:
            mpath = _need(args.model or out / "model.opcm")
            inputs["model"] = mpath
            model = store.load_model(mpath)
        camp = pipeline.optimize(model, cfg, seeds)
        curves, summary = out / "curves.csv", out / "curves-summary.csv"
        pgpe.write_curves_csv(curves, camp)
        ci = camp.ci95
        with open(summary, "w") as fh:
            fh.write("episode,mean_return,ci95\n")
            for e, m, c in zip(camp.episodes.tolist(), camp.mean.tolist(), ci.tolist()):
                fh.write(f"{e},{m!r},{c!r}\n")
        _manifest(out, cmd, cfg, inputs, {"curves": curves, "summary": summary},
                  {"degenerate_ci": len(seeds) < 2})
        print(f"{len(seeds)} run(s); final mean return {camp.mean[-1]:.3f} -> {curves}")

    elif cmd == "grid-eval":
        cfg = _config(args, {"grid_per_dim": args.per_dim})
        mpath = _need(args.model or out / "model.opcm")
        model = store.load_model(mpath)
        env, arch, norm = pipeline._env_bits(cfg.env)
        pts = compression.grid_points(model.k, cfg.grid_low, cfg.grid_high, cfg.grid_per_dim)
        rewards = compression.grid_eval(model, arch, norm, env, cfg.task, pts, cfg.grid_episodes, cfg.seed)
        path = out / f"grid-{cfg.task}.csv"
        compression.write_grid_csv(path, pts, rewards)
        _manifest(out, cmd, cfg, {"model": mpath}, {"grid": path})
        print(f"{len(pts)} grid cells, best mean return {rewards.max():.3f} -> {path}")

    elif cmd == "report":
        cfg = _config(args, {"hist_bins": args.bins})
        bank_path = _need(args.bank or out / "bank.opcb")
        cur_paths = [_need(p) for p in (args.curated or [out / "curated-opc.opcc", out / "curated-apc.opcc"])]
        bank = store.load_bank(bank_path)
        returns = pipeline.evaluate_returns(bank, cfg.task, cfg.seed)
        sets = {Path(p).stem: store.load_curated(p).ids for p in cur_paths}
        edges = np.histogram_bin_edges(returns, bins=cfg.hist_bins)
        path = out / f"report-{cfg.task}.csv"
        cols = {"population": np.histogram(returns, edges)[0]}
        cols.update({name: np.histogram(returns[ids], edges)[0] for name, ids in sets.items()})
        with open(path, "w") as fh:
            fh.write(",".join(["bin_low", "bin_high", *cols]) + "\n")
            for b in range(len(edges) - 1):
                fh.write(",".join([repr(float(edges[b])), repr(float(edges[b + 1]))]
                                  + [str(int(c[b])) for c in cols.values()]) + "\n")
        _manifest(out, cmd, cfg, {"bank": bank_path, **{f"curated:{k}": p for k, p in zip(sets, cur_paths)}},
                  {"report": path})
        for name, ids in sets.items():
            print(f"{name}: max return {returns[ids].max():.4g}, p99 {np.percentile(returns[ids], 99):.4g}")
        print(f"histogram -> {path}")
    return EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        _limit_threads(_pre_scan_threads(argv))
    except ValueError:
        print("error: --threads expects an integer", file=sys.stderr)
        return EXIT_CONFIG
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    from .diffmath import BackwardError, ShapeError
    from .envs import RolloutError
    from .pipeline import ConfigError
    from .store import ArchMismatchError, StoreError

    try:
        return _run(args)
    except (ConfigError, ArchMismatchError, ShapeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError, StoreError, KeyError) as e:
        print(f"artifact error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (ArithmeticError, BackwardError, RolloutError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
