"""Reproducible experiment driver.

Five experiment suites behind one command: the 2-D toy dynamics, single
training runs, objective x batch-size sweeps, probe evaluation of saved
checkpoints, and report generation from persisted metric records. Configs are
flat key = value text with a strict schema; unknown keys are hard errors, and
the resolved config is echoed into the output directory before anything runs.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluation as eval_mod
from .contrastive import cosine_sim_matrix, match_probability
from .errors import ConfigError, ContractError, IdxFormatError, NumericsError
from .models import load_checkpoint, save_checkpoint
from .numcore import Tensor, adam_init, adam_step, zero_grads
from .objectives import LOSS_FUNCTIONS, TrainConfig, train

EXPERIMENTS = ("toy2d", "train", "sweep", "evaluate", "report")

DESK_STEPS = 20_000
FULL_STEPS = 500_000
DESK_SUBSET = 10_000


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


_SCHEMA = {
    "experiment": str,
    "seed": int,
    "out": str,
    "objective": str,
    "batch_size": int,
    "steps": int,
    "lr": float,
    "tau": float,
    "latent_dim": int,
    "hidden": _int_list,
    "val_interval": int,
    "dtype": str,
    "dataset": str,
    "train_images": str,
    "train_labels": str,
    "test_images": str,
    "test_labels": str,
    "subset": int,
    "binarize": _parse_bool,
    "objectives": _str_list,
    "batch_sizes": _int_list,
    "seeds": _int_list,
    "jobs": int,
    "checkpoint": str,
    "records": str,
    "n_points": int,
    "toy_lr": float,
    "snapshot_steps": _int_list,
    "full_scale": _parse_bool,
}


@dataclass
class ExperimentConfig:
    experiment: str = ""
    seed: int = 0
    out: str = "runs"
    objective: str = "cmim"
    batch_size: int = 100
    steps: int = 0  # 0 means: pick the desk- or full-scale default
    lr: float = 1e-3
    tau: float = 0.1
    latent_dim: int = 64
    hidden: tuple[int, ...] = (400, 400)
    val_interval: int = 500
    dtype: str = "float32"
    dataset: str = "digits"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    subset: int = 0  # 0 means: desk-scale default unless full_scale
    binarize: bool = True
    objectives: tuple[str, ...] = ("mim", "cmim", "vae", "cvae", "infonce")
    batch_sizes: tuple[int, ...] = (2, 5, 10, 100, 200)
    seeds: tuple[int, ...] = (0,)
    jobs: int = 1
    checkpoint: str = ""
    records: str = ""
    n_points: int = 1000
    toy_lr: float = 0.02
    snapshot_steps: tuple[int, ...] = (0, 200, 400, 4200)
    full_scale: bool = False

    def resolved_steps(self) -> int:
        if self.steps > 0:
            return self.steps
        return FULL_STEPS if self.full_scale else DESK_STEPS

    def resolved_subset(self) -> int:
        if self.full_scale:
            return self.subset  # 0 keeps everything
        return self.subset or DESK_SUBSET


def parse_config_file(path) -> dict:
    values: dict = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in _SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                values[key] = _SCHEMA[key](value)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def echo_config(cfg: ExperimentConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for key in _SCHEMA:
        value = getattr(cfg, key)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


# -- dataset resolution -----------------------------------------------------------


def resolve_datasets(cfg: ExperimentConfig) -> tuple[data_mod.Dataset, data_mod.Dataset]:
    if cfg.train_images:
        required = (cfg.train_labels, cfg.test_images, cfg.test_labels)
        if not all(required):
            raise ConfigError("IDX mode needs all four train/test image/label paths")
        train_ds = data_mod.load_idx(cfg.train_images, cfg.train_labels,
                                     name=cfg.dataset or "idx", split="train")
        test_ds = data_mod.load_idx(cfg.test_images, cfg.test_labels,
                                    name=cfg.dataset or "idx", split="test")
    elif cfg.dataset == "digits":
        n_train = cfg.resolved_subset() or DESK_SUBSET
        train_ds, test_ds = data_mod.make_digits_corpus(
            seed=0, n_train=n_train, n_test=max(n_train // 5, 500))
        return train_ds, test_ds
    else:
        raise ConfigError(f"unknown dataset {cfg.dataset!r}; use 'digits' or IDX paths")
    n = cfg.resolved_subset()
    if n and n < len(train_ds):
        train_ds = data_mod.subset(train_ds, n, cfg.seed)
    return train_ds, test_ds


# -- toy2d -------------------------------------------------------------------------


def optimize_toy2d(points: np.ndarray, steps: int, lr: float = 0.02,
                   tau: float = 1.0, snapshot_steps: tuple[int, ...] = (),
                   dtype: str = "float32"):
    """Minimize the mean negative log match-probability of raw 2-D coordinates.

    Returns (final points, {step: points copy}, [(step, stats), ...]) with
    angle/radius statistics recorded at each snapshot and at the final step.
    """
    coords = Tensor(np.array(points, dtype=dtype), requires_grad=True, name="toy.points")
    params = [coords]
    state = adam_init(params, lr=lr)
    wanted = sorted(set(int(s) for s in snapshot_steps if 0 <= s <= steps) | {steps})
    snapshots: dict[int, np.ndarray] = {}
    stats: list[tuple[int, eval_mod.AngleRadiusStats]] = []

    def record(step: int) -> None:
        snap = coords.data.copy()
        snapshots[step] = snap
        stats.append((step, eval_mod.angle_radius_stats(snap)))

    for step in range(steps + 1):
        if step in wanted:
            record(step)
        if step == steps:
            break
        sim = cosine_sim_matrix(coords, tau)
        loss = -(match_probability(sim).log_p_match.mean())
        zero_grads(params)
        loss.backward()
        adam_step(params, [coords.grad], state)
    return coords.data, snapshots, stats


def cmd_toy2d(cfg: ExperimentConfig) -> int:
    out_dir = Path(cfg.out)
    echo_config(cfg, out_dir)
    steps = cfg.steps if cfg.steps > 0 else max(cfg.snapshot_steps)
    toy = data_mod.make_toy2d(cfg.seed, n_points=cfg.n_points)
    _, snapshots, stats = optimize_toy2d(
        toy.points, steps=steps, lr=cfg.toy_lr, tau=cfg.tau or 1.0,
        snapshot_steps=cfg.snapshot_steps,
    )
    for step, snap in snapshots.items():
        np.savetxt(out_dir / f"points_step{step:06d}.csv", snap,
                   delimiter=",", header="x,y", comments="")
    with open(out_dir / "stats.csv", "w") as fh:
        fh.write("step,ks_angle,radius_variance\n")
        for step, st in stats:
            fh.write(f"{step},{st.ks_angle:.6f},{st.radius_variance:.6f}\n")
    print(f"toy2d: wrote {len(snapshots)} snapshots to {out_dir}")
    return 0


# -- train / evaluate / sweep -------------------------------------------------------


def _train_config(cfg: ExperimentConfig, objective: str, batch_size: int,
                  seed: int) -> TrainConfig:
    return TrainConfig(
        objective=objective, batch_size=batch_size, steps=cfg.resolved_steps(),
        lr=cfg.lr, tau=cfg.tau, seed=seed, val_interval=cfg.val_interval,
        dataset_id=cfg.dataset, input_dim=784, hidden=cfg.hidden,
        latent_dim=cfg.latent_dim, dtype=cfg.dtype, binarize=cfg.binarize,
    )


def _write_history(history, path) -> None:
    with open(path, "w") as fh:
        for record in history:
            fh.write(json.dumps(record.as_dict()) + "\n")


def cmd_train(cfg: ExperimentConfig) -> int:
    out_dir = Path(cfg.out)
    echo_config(cfg, out_dir)
    train_ds, _ = resolve_datasets(cfg)
    tc = _train_config(cfg, cfg.objective, cfg.batch_size, cfg.seed)
    bundle, history = train(tc, train_ds)
    save_checkpoint(bundle, out_dir / "checkpoint.npz")
    _write_history(history, out_dir / "metrics.jsonl")
    print(f"train: {cfg.objective} B={cfg.batch_size} seed={cfg.seed} "
          f"best val loss {bundle.val_loss:.4f} at step {bundle.step}")
    return 0


def evaluate_bundle(bundle, train_ds, test_ds, mlp_seed: int = 0):
    """All probes on both embedding kinds (where available) plus reconstruction."""
    records = []
    kinds = ["mean"] if bundle.decoder is None else ["mean", "informative"]
    for kind in kinds:
        emb_train = eval_mod.embed_dataset(bundle, train_ds, kind)
        emb_test = eval_mod.embed_dataset(bundle, test_ds, kind)
        scores = {
            "knn5_euclidean": eval_mod.knn_probe(emb_train, emb_test, k=5, metric="euclidean"),
            "knn5_cosine": eval_mod.knn_probe(emb_train, emb_test, k=5, metric="cosine"),
            "mlp": eval_mod.mlp_probe(emb_train, emb_test, seed=mlp_seed),
        }
        for probe, accuracy in scores.items():
            records.append(eval_mod.MetricsRecord(
                objective=bundle.objective, dataset=train_ds.name,
                batch_size=int(bundle.extra.get("batch_size", 0)),
                seed=bundle.seed, probe=probe, kind=kind, accuracy=accuracy,
            ))
    if bundle.decoder is not None:
        records.append(eval_mod.MetricsRecord(
            objective=bundle.objective, dataset=train_ds.name,
            batch_size=int(bundle.extra.get("batch_size", 0)),
            seed=bundle.seed, probe="reconstruction", kind="mean",
            accuracy=eval_mod.reconstruction_score(bundle, test_ds),
        ))
    return records


def cmd_evaluate(cfg: ExperimentConfig) -> int:
    if not cfg.checkpoint:
        raise ConfigError("evaluate needs checkpoint = <path>")
    out_dir = Path(cfg.out)
    echo_config(cfg, out_dir)
    bundle = load_checkpoint(cfg.checkpoint)
    train_ds, test_ds = resolve_datasets(cfg)
    records = evaluate_bundle(bundle, train_ds, test_ds, mlp_seed=cfg.seed)
    eval_mod.save_records(out_dir / "records.csv", records)
    print(f"evaluate: wrote {len(records)} records to {out_dir / 'records.csv'}")
    return 0


def _sweep_cell(args) -> list[eval_mod.MetricsRecord]:
    cfg, objective, batch_size, seed = args
    train_ds, test_ds = resolve_datasets(cfg)
    tc = _train_config(cfg, objective, batch_size, seed)
    bundle, history = train(tc, train_ds)
    cell_dir = Path(cfg.out) / f"{objective}_b{batch_size}_s{seed}"
    cell_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(bundle, cell_dir / "checkpoint.npz")
    _write_history(history, cell_dir / "metrics.jsonl")
    return evaluate_bundle(bundle, train_ds, test_ds, mlp_seed=seed)


def cmd_sweep(cfg: ExperimentConfig) -> int:
    out_dir = Path(cfg.out)
    echo_config(cfg, out_dir)
    grid = [(cfg, obj, bs, seed)
            for obj in cfg.objectives
            for bs in cfg.batch_sizes
            for seed in cfg.seeds]
    if cfg.jobs > 1:
        with get_context("spawn").Pool(cfg.jobs) as pool:
            per_cell = pool.map(_sweep_cell, grid)
    else:
        per_cell = [_sweep_cell(args) for args in grid]
    records = [r for cell in per_cell for r in cell]
    eval_mod.save_records(out_dir / "records.csv", records)
    print(f"sweep: {len(grid)} cells, {len(records)} records -> {out_dir / 'records.csv'}")
    return 0


# -- report --------------------------------------------------------------------------


def _load_all_records(records_path: Path) -> list[eval_mod.MetricsRecord]:
    if records_path.is_dir():
        records = []
        for csv_path in sorted(records_path.rglob("records.csv")):
            records.extend(eval_mod.load_records(csv_path))
        if not records:
            raise ConfigError(f"no records.csv files under {records_path}")
        return records
    return eval_mod.load_records(records_path)


def _write_table(path: Path, header: str, rows: list[str]) -> None:
    path.write_text("\n".join([header, *rows]) + "\n")


def cmd_report(cfg: ExperimentConfig) -> int:
    if not cfg.records:
        raise ConfigError("report needs records = <csv file or directory>")
    out_dir = Path(cfg.out)
    echo_config(cfg, out_dir)
    records = _load_all_records(Path(cfg.records))

    zs = eval_mod.zscore_aggregate(records)
    _write_table(out_dir / "zscores.csv", "objective,mean_z,stderr",
                 [f"{m},{v[0]:.6f},{v[1]:.6f}" for m, v in sorted(zs.items())])
    ranks = eval_mod.rank_aggregate(records)
    _write_table(out_dir / "rankings.csv", "objective,mean_rank,stderr",
                 [f"{m},{v[0]:.6f},{v[1]:.6f}" for m, v in sorted(ranks.items())])
    try:
        slopes = eval_mod.batch_slope(records)
        _write_table(out_dir / "slopes.csv", "objective,slope,stderr",
                     [f"{m},{v[0]:.8f},{v[1]:.8f}" for m, v in sorted(slopes.items())])
    except ContractError:
        pass  # single batch size: no slope table
    recon = [r for r in records if r.probe == "reconstruction"]
    _write_table(out_dir / "reconstruction.csv",
                 "objective,dataset,batch_size,seed,log_likelihood",
                 [f"{r.objective},{r.dataset},{r.batch_size},{r.seed},{r.accuracy:.4f}"
                  for r in recon])
    print(f"report: wrote tables for {len(records)} records to {out_dir}")
    return 0


# -- entry point -----------------------------------------------------------------------


COMMANDS = {
    "toy2d": cmd_toy2d,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmim",
        description="MIM/cMIM/VAE/cVAE/InfoNCE representation-learning workbench",
    )
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", type=str, help="flat key = value config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", type=str)
    parser.add_argument("--objective", choices=tuple(LOSS_FUNCTIONS))
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--tau", type=float)
    parser.add_argument("--full-scale", action="store_true", dest="full_scale",
                        default=None)
    parser.add_argument("--jobs", type=int)
    parser.add_argument("--checkpoint", type=str)
    parser.add_argument("--records", type=str)
    return parser


def resolve_config(argv: list[str]) -> ExperimentConfig:
    args = build_parser().parse_args(argv)
    values: dict = {}
    if args.config:
        values.update(parse_config_file(args.config))
    for key in ("seed", "out", "objective", "batch_size", "steps", "tau",
                "full_scale", "jobs", "checkpoint", "records"):
        flag = getattr(args, key)
        if flag is not None:
            values[key] = flag
    values["experiment"] = args.experiment
    if values["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {values['experiment']!r}")
    return replace(ExperimentConfig(), **values)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = resolve_config(argv)
        return COMMANDS[cfg.experiment](cfg)
    except (ContractError, NumericsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, IdxFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
