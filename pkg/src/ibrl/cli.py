"""Command-line entry point.

Subcommands: train, anneal, eval, transfer, export-embeddings, selfcheck.
Exit codes: 0 success, 2 invalid configuration, 3 bad or missing artifact,
4 numerical fault.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import agents
from . import checkpoint as ck
from . import nnkit as nn
from .annealing import AnnealSchedule, FamilyEntry, PolicyFamily, anneal_run, select_checkpoint
from .config import ConfigError, RunConfig, load_config, render_config
from .envs import grid as gw
from .evaluation import (SUCCESS_THRESHOLD, embeddings_csv, eval_grid, evaluate_maze, export_embeddings,
                         success_count, transfer_curves_csv)

log = logging.getLogger("ibrl")

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 2, 3, 4


class ArtifactError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def prepare_run_dir(path: Path, force: bool, resume: bool = False) -> Path:
    if path.exists() and any(path.iterdir()) and not (force or resume):
        raise ArtifactError(f"output directory {path} is not empty; pass --force to overwrite")
    if force and path.exists() and not resume:
        shutil.rmtree(path)
    (path / "checkpoints").mkdir(parents=True, exist_ok=True)
    (path / "eval").mkdir(exist_ok=True)
    return path


def write_manifest(run_dir: Path, info: dict) -> None:
    """List every file in the run directory with its content hash.  Nothing
    time-dependent goes in, so reruns produce identical manifests."""
    files = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[p.relative_to(run_dir).as_posix()] = sha256_file(p)
    manifest = {"package_version": __version__, **info, "files": files}
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_mazes(path) -> list[gw.MazeLayout]:
    """Mazes stored as text blocks separated by blank lines."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ArtifactError(f"cannot read maze file {path}: {exc}") from exc
    blocks = [b for b in text.strip().split("\n\n") if b.strip()]
    if not blocks:
        raise ArtifactError(f"maze file {path} holds no mazes")
    try:
        mazes = [gw.MazeLayout.from_text(b) for b in blocks]
        for m in mazes:
            gw.validate_layout(m)
    except ValueError as exc:
        raise ArtifactError(f"invalid maze in {path}: {exc}") from exc
    return mazes


def grid_layouts(cfg: RunConfig) -> list[gw.MazeLayout]:
    if cfg.grid.maze_file:
        return load_mazes(cfg.grid.maze_file)
    return [gw.generate_maze(s) for s in cfg.grid.maze_seeds]


def resolve_runs(cfg: RunConfig, args) -> list[tuple[int, Path]]:
    """(seed, run directory) pairs; several seeds get one subdirectory each."""
    seeds = (args.seed,) if args.seed is not None else cfg.seeds
    base = Path(args.out or cfg.out or Path("runs") / cfg.name)
    if len(seeds) == 1:
        return [(seeds[0], base)]
    return [(s, base / f"seed_{s}") for s in seeds]


def seeded(cfg: RunConfig, seed: int, beta: float | None = None) -> RunConfig:
    cfg = dataclasses.replace(cfg, seeds=(seed,), train=dataclasses.replace(cfg.train, seed=seed))
    if beta is not None:
        cfg = dataclasses.replace(cfg, beta=beta)
    return cfg


def load_checkpoint(path, expected_hash: str | None = None) -> ck.Checkpoint:
    try:
        return ck.load(path, expected_hash)
    except ck.CheckpointError as exc:
        raise ArtifactError(f"{path}: {exc}") from exc


# ------------------------------------------------------------------ train


def cmd_train(args) -> int:
    base = load_config(args.config)
    beta = args.beta if args.beta is not None else base.beta
    if beta < 0:
        raise ConfigError("--beta: must be non-negative")
    for seed, run_dir in resolve_runs(base, args):
        cfg = seeded(base, seed, beta)
        if cfg.beta == 0 and args.beta is not None:
            # an explicit beta of zero asks for the baseline: deterministic encoder
            cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, deterministic=True))
        prepare_run_dir(run_dir, args.force)
        (run_dir / "config.copy").write_text(render_config(cfg))
        envs = agents.make_envs(cfg.train, grid_layouts(cfg) if cfg.env == "grid" else None)
        metrics_path = run_dir / "metrics.csv"
        agents.write_metrics_csv(metrics_path, [])
        state = agents.init_state(cfg.train, envs)
        agents.train(cfg.train, envs, cfg.beta, state=state,
                     on_update=lambda st, row: agents.write_metrics_csv(metrics_path, [row], append=True))
        ck.save(run_dir / "checkpoints" / "final.ckpt",
                ck.state_checkpoint(state, cfg.digest(), cfg.beta, {"tag": cfg.tag}))
        write_manifest(run_dir, {"command": "train", "name": cfg.name, "tag": cfg.tag, "seed": seed,
                                 "beta": cfg.beta, "config_hash": cfg.digest()})
        print(f"{run_dir}: {cfg.tag} run finished after {state.env_steps} env steps, "
              f"rolling return {np.mean(state.recent) if state.recent else float('nan'):.2f}")
    return EXIT_OK


# ------------------------------------------------------------------ anneal


def make_evaluator(cfg: RunConfig, run_dir: Path, layouts):
    """Checkpoint evaluation: unseen-grid success for CartPole, per-maze greedy
    success for the grid world."""
    episodes = cfg.eval.episodes

    def evaluate_cartpole(bundle) -> dict:
        unseen = eval_grid(bundle, "unseen", episodes, seed=cfg.train.seed)
        train = eval_grid(bundle, "train", episodes, seed=cfg.train.seed)
        return {"unseen_success": success_count(unseen, cfg.eval.threshold),
                "mean_test_reward": float(unseen.cells.mean()),
                "train_mean": float(train.cells.mean())}

    def evaluate_grid(bundle) -> dict:
        scores = [evaluate_maze(bundle, m) for m in layouts]
        return {"mean_test_reward": float(np.mean(scores)), "unseen_success": int(np.sum(scores))}

    return evaluate_cartpole if cfg.env == "cartpole" else evaluate_grid


def schedule_of(cfg: RunConfig) -> AnnealSchedule:
    a = cfg.anneal
    return AnnealSchedule.from_total(a.total_iterations, a.warmup_fraction, beta_start=a.beta_start,
                                     beta_end=a.beta_end, shape=a.shape, n_checkpoints=a.n_checkpoints)


def _truncate_metrics(path: Path, last_update: int) -> None:
    lines = path.read_text().splitlines(keepends=True)
    keep = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= last_update]
    path.write_text("".join(keep))


def _write_family(run_dir: Path, cfg: RunConfig, schedule: AnnealSchedule, entries: list[dict]) -> None:
    doc = {"name": cfg.name, "seed": cfg.train.seed, "config_hash": cfg.digest(),
           "schedule": dataclasses.asdict(schedule), "checkpoints": entries}
    (run_dir / "family.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_anneal(args) -> int:
    base = load_config(args.config)
    for seed, run_dir in resolve_runs(base, args):
        cfg = seeded(base, seed)
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, deterministic=False))
        schedule = schedule_of(cfg)
        layouts = grid_layouts(cfg) if cfg.env == "grid" else None
        envs = agents.make_envs(cfg.train, layouts)
        metrics_path = run_dir / "metrics.csv"
        family, entries, state = PolicyFamily(), [], None

        if args.resume and (run_dir / "family.json").exists():
            doc = json.loads((run_dir / "family.json").read_text())
            if doc["config_hash"] != cfg.digest():
                raise ArtifactError(f"{run_dir} was produced by config {doc['config_hash']}, not {cfg.digest()}")
            entries = doc["checkpoints"]
            for e in entries:
                c = load_checkpoint(run_dir / e["checkpoint"], cfg.digest())
                params = {k[len("param/"):]: v for k, v in c.arrays.items() if k.startswith("param/")}
                family.add(FamilyEntry(e["iteration"], e["beta"], params, e["summary"]))
            if entries:
                last = load_checkpoint(run_dir / entries[-1]["checkpoint"], cfg.digest())
                state = ck.restore_state(last, cfg.train, envs)
                _truncate_metrics(metrics_path, state.updates)
                print(f"{run_dir}: resuming from iteration {state.updates}")
        if state is None:
            prepare_run_dir(run_dir, args.force, resume=args.resume)
            (run_dir / "config.copy").write_text(render_config(cfg))
            agents.write_metrics_csv(metrics_path, [])
            state = agents.init_state(cfg.train, envs)
            entries = []
        if state.updates >= schedule.total:
            print(f"{run_dir}: already complete")
            continue

        def on_checkpoint(entry: FamilyEntry, st, cfg=cfg, run_dir=run_dir, entries=entries, schedule=schedule):
            name = f"checkpoints/iter_{entry.iteration:06d}.ckpt"
            ck.save(run_dir / name, ck.state_checkpoint(st, cfg.digest(), entry.beta))
            entries.append({"iteration": entry.iteration, "beta": entry.beta, "checkpoint": name,
                            "summary": entry.summary})
            _write_family(run_dir, cfg, schedule, entries)
            print(f"  iteration {entry.iteration} beta {entry.beta:.3g} "
                  + " ".join(f"{k}={v:.4g}" for k, v in sorted(entry.summary.items())), flush=True)

        stop_at = args.stop_after

        def on_update(st, row, metrics_path=metrics_path):
            agents.write_metrics_csv(metrics_path, [row], append=True)
            if stop_at is not None and st.updates >= stop_at:
                raise _Interrupted()

        try:
            anneal_run(cfg.train, schedule, envs, evaluate=make_evaluator(cfg, run_dir, layouts),
                       state=state, family=family, on_checkpoint=on_checkpoint, on_update=on_update)
        except _Interrupted:
            print(f"{run_dir}: stopped after iteration {stop_at} as requested")
            continue
        best = select_checkpoint(family, args.criterion)
        _write_family(run_dir, cfg, schedule, entries)
        doc = json.loads((run_dir / "family.json").read_text())
        doc["selected"] = {"criterion": args.criterion, "iteration": best.iteration, "beta": best.beta}
        (run_dir / "family.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        write_manifest(run_dir, {"command": "anneal", "name": cfg.name, "seed": seed,
                                 "config_hash": cfg.digest()})
        print(f"{run_dir}: selected iteration {best.iteration} (beta {best.beta:.3g}) by {args.criterion}")
    return EXIT_OK


class _Interrupted(Exception):
    pass


# ------------------------------------------------------------------ eval


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    bundle = _bundle(ckpt, args.checkpoint)
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent.parent / "eval"
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.checkpoint).stem
    if args.maze:
        if bundle.env != "grid":
            raise ArtifactError(f"{args.checkpoint} holds a {bundle.env} policy; maze evaluation needs grid")
        mazes = load_mazes(args.maze)
        rows = ["maze,success"] + [f"{i},{evaluate_maze(bundle, m)!r}" for i, m in enumerate(mazes)]
        path = out / f"{stem}_maze.csv"
        path.write_text("\n".join(rows) + "\n")
        print(path)
        return EXIT_OK
    if bundle.env != "cartpole":
        raise ArtifactError(f"{args.checkpoint} holds a {bundle.env} policy; grid evaluation needs cartpole")
    kind = "extreme" if args.extreme else args.grid
    seed = args.seed if args.seed is not None else 0
    grid = eval_grid(bundle, kind, args.episodes, seed=seed, code_mode=args.code_mode)
    csv_path, svg_path = out / f"{stem}_{kind}.csv", out / f"{stem}_{kind}.svg"
    csv_path.write_text(grid.to_csv())
    svg_path.write_text(grid.to_svg())
    print(f"{csv_path}\n{svg_path}\nsuccess count (> {SUCCESS_THRESHOLD:.0f}): "
          f"{success_count(grid, unseen_only=kind != 'extreme')}")
    return EXIT_OK


def _bundle(ckpt: ck.Checkpoint, path):
    try:
        return ck.bundle_from_checkpoint(ckpt)
    except ck.CheckpointError as exc:
        raise ArtifactError(f"{path}: {exc}") from exc


# ------------------------------------------------------------------ transfer


def cmd_transfer(args) -> int:
    from .transfer import Variant, run_split

    cfg = load_config(args.config)
    if cfg.env != "grid":
        raise ConfigError("[run] env: the transfer experiment runs on grid")
    t = cfg.transfer
    splits = (args.seed,) if args.seed is not None else t.split_seeds
    run_dir = prepare_run_dir(Path(args.out or cfg.out or Path("runs") / cfg.name), args.force)
    (run_dir / "config.copy").write_text(render_config(cfg))
    variants = [Variant.parse(v) for v in t.variants]
    lines, splits_info = [], []
    for split in splits:
        res = run_split(cfg.train, split, variants, t.pretrain_steps, t.retrain_steps, t.window)
        (run_dir / "checkpoints").mkdir(exist_ok=True)
        (run_dir / f"held_out_{split}.txt").write_text(res.held_out.to_text())
        for v in variants:
            ck.save(run_dir / "checkpoints" / f"split_{split}_{v.name}.ckpt",
                    ck.bundle_checkpoint(res.bundles[v.name], cfg.digest(), t.pretrain_steps + t.retrain_steps,
                                         v.beta, {"split_seed": split, "held_out_maze_seed": res.held_out_seed}))
        body = transfer_curves_csv(res.curves).splitlines()
        lines += [f"{split},{ln}" for ln in body[1:]]
        header = "split_seed," + body[0]
        splits_info.append({"split_seed": split, "train_maze_seeds": res.train_seeds,
                            "held_out_maze_seed": res.held_out_seed,
                            "steps_to_threshold": {c.variant: c.steps_to_threshold(t.threshold)
                                                   for c in res.curves}})
        print(f"split {split}: " + ", ".join(f"{k}={v}" for k, v in splits_info[-1]["steps_to_threshold"].items()))
    (run_dir / "transfer.csv").write_text("\n".join([header] + lines) + "\n")
    (run_dir / "metrics.csv").write_text((run_dir / "transfer.csv").read_text())
    write_manifest(run_dir, {"command": "transfer", "name": cfg.name, "config_hash": cfg.digest(),
                             "seeds": list(splits), "splits": splits_info})
    return EXIT_OK


# ------------------------------------------------------------------ embeddings / selfcheck


def cmd_export_embeddings(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    bundle = _bundle(ckpt, args.checkpoint)
    if bundle.env != "grid":
        raise ArtifactError(f"{args.checkpoint} holds a {bundle.env} policy; embeddings need a grid policy")
    layout = load_mazes(args.maze)[0]
    text = embeddings_csv(export_embeddings(bundle, layout))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all

    results = run_all()
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ibrl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("config", help="run configuration file")
        sp.add_argument("--seed", type=int, default=None, help="run this seed only")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    sp = sub.add_parser("train", help="train one policy at a fixed beta")
    common(sp)
    sp.add_argument("--beta", type=float, default=None, help="KL weight; 0 trains the deterministic baseline")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("anneal", help="train while ramping beta and keep a checkpoint family")
    common(sp)
    sp.add_argument("--resume", action="store_true", help="continue from the last family checkpoint")
    sp.add_argument("--stop-after", type=int, default=None, help="stop after this many iterations")
    sp.add_argument("--criterion", default="best-unseen-success",
                    choices=["best-unseen-success", "best-mean-test-reward"])
    sp.set_defaults(func=cmd_anneal)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a context grid or mazes")
    sp.add_argument("checkpoint")
    sp.add_argument("--grid", default="test", choices=["train", "test", "unseen", "extreme"])
    sp.add_argument("--extreme", action="store_true", help="shorthand for --grid extreme")
    sp.add_argument("--maze", default=None, help="maze text file (grid policies)")
    sp.add_argument("--episodes", type=int, default=20)
    sp.add_argument("--code-mode", default="mean", choices=["mean", "stochastic"])
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("transfer", help="maze transfer experiment")
    common(sp)
    sp.set_defaults(func=cmd_transfer)

    sp = sub.add_parser("export-embeddings", help="dump codes and critic values for every maze cell")
    sp.add_argument("checkpoint")
    sp.add_argument("maze")
    sp.add_argument("--out", default=None, help="CSV path (stdout if omitted)")
    sp.set_defaults(func=cmd_export_embeddings)

    sp = sub.add_parser("selfcheck", help="run the numerical oracle suite")
    sp.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArtifactError, ck.CheckpointError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (nn.NumericalError, FloatingPointError) as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
