"""``bimcq`` command line: gen-data, train, eval, ablate, dump-embeddings."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from copy import deepcopy
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, load_run_config
from .data import Dataset, generate_dataset, load_dataset, read_meta, realized_prevalence, save_dataset, split
from .errors import ConfigError, IntegrityError, ParseError, TrainingError
from .evaluation import EvalReport, Scorer, dump_embeddings, evaluate
from .model import Freeze, FusionMode
from .training import Checkpoint, Objective, load_checkpoint, save_checkpoint, train

log = logging.getLogger("bimcq")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


# -- building blocks shared by the commands ------------------------------------------
def make_splits(cfg: RunConfig) -> dict[str, Dataset]:
    """Generate the train/test (and optional external) splits for ``cfg.seed``."""
    full = generate_dataset(cfg.synth, cfg.seed)
    train_idx, test_idx = split(len(full), cfg.split, cfg.seed)
    splits = {"train": full.subset(train_idx), "test": full.subset(test_idx)}
    if cfg.external is not None:
        splits["external"] = generate_dataset(
            cfg.external.synth(cfg.synth), cfg.seed, direction_seed=cfg.seed, id_prefix="ext", sample_stream="data/external"
        )
    for name, ds in splits.items():
        ds.meta["split"] = name
    return splits


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def evaluate_checkpoint(ckpt: Checkpoint, ckpt_id: str, dataset: Dataset) -> EvalReport:
    meta = {
        "checkpoint_id": ckpt_id,
        "seed": ckpt.config.seed,
        "objective": ckpt.config.objective.value,
        "split": dataset.meta.get("split"),
    }
    return evaluate(Scorer.from_checkpoint(ckpt), dataset, meta)


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")
    return path


def _data_dir(args, cfg: RunConfig) -> Path:
    return Path(args.data or cfg.paths.data)


def _load_split(args, cfg: RunConfig, name: str) -> Dataset:
    directory = _data_dir(args, cfg)
    read_meta(directory)
    return load_dataset(directory, name)


# -- commands ----------------------------------------------------------------------
def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg.paths.data)
    splits = make_splits(cfg)
    save_dataset(out, splits, {"seed": cfg.seed, "synth": cfg.to_dict()["synth"]})
    print(f"wrote {out}  D={cfg.synth.D}")
    for name, ds in splits.items():
        prev = " ".join(f"{p:.3f}" for p in realized_prevalence(ds.labels))
        print(f"  {name:<9} n={len(ds):<6} prevalence {prev}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    dataset = _load_split(args, cfg, args.split or "train")
    out = Path(args.out or cfg.paths.checkpoint)

    def on_epoch(epoch, loss):
        print(f"epoch {epoch + 1:>3}  loss {loss:.6f}", flush=True)

    ckpt = train(cfg.train, dataset, on_epoch=on_epoch)
    save_checkpoint(ckpt, out)
    if ckpt.build_stats:
        print("mcq stats " + json.dumps(ckpt.build_stats, sort_keys=True))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    ckpt_path = Path(args.checkpoint or cfg.paths.checkpoint)
    ckpt = load_checkpoint(ckpt_path)
    dataset = _load_split(args, cfg, args.split or "test")
    report = evaluate_checkpoint(ckpt, file_digest(ckpt_path), dataset)
    out = write_text(args.out or cfg.paths.report, report.to_json())
    print(report.table())
    print(f"wrote {out}")
    return EXIT_OK


def cmd_dump_embeddings(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint or cfg.paths.checkpoint)
    dataset = _load_split(args, cfg, args.split or "test")
    out = Path(args.out or cfg.paths.embeddings)
    rows = dump_embeddings(Scorer.from_checkpoint(ckpt), dataset, out)
    print(f"wrote {rows} rows to {out}")
    return EXIT_OK


@dataclass(frozen=True)
class Cell:
    objective: str
    fusion_mode: str
    freeze: str
    use_mixed: bool

    @property
    def name(self) -> str:
        return f"{self.objective}-{self.fusion_mode}-{self.freeze}-{'mixed' if self.use_mixed else 'nomixed'}"


def grid_cells(cfg: RunConfig) -> list[Cell]:
    g = cfg.grid
    return [
        Cell(Objective(o).value, FusionMode(f).value, Freeze(z).value, m)
        for o in g.objectives for f in g.fusion_modes for z in g.freezes for m in g.use_mixed
    ]


def cell_config(cfg: RunConfig, cell: Cell, seed: int) -> RunConfig:
    run = deepcopy(cfg)
    run.seed = seed
    run.train.objective = Objective(cell.objective)
    run.train.model.fusion_mode = FusionMode(cell.fusion_mode)
    run.train.model.freeze = Freeze(cell.freeze)
    run.train.mcq.use_mixed = cell.use_mixed
    return run.validate()


def run_cell(run: RunConfig, splits: dict[str, Dataset], directory: Path) -> dict:
    ckpt = train(run.train, splits["train"])
    ckpt_path = save_checkpoint(ckpt, directory / "model.ckpt")
    ckpt_id = file_digest(ckpt_path)
    results = {"build_stats": ckpt.build_stats, "loss_history": ckpt.loss_history}
    for name in ("test", "external"):
        if name not in splits:
            continue
        report = evaluate_checkpoint(ckpt, ckpt_id, splits[name])
        write_text(directory / f"report_{name}.json", report.to_json())
        results[name] = {p: report.macro(p) for p in ("POS", "NEG", "PNC")}
    return results


def ablation_table(summary: dict, split_name: str = "test") -> str:
    lines = [f"{'setting':<44}{'POS':>8}{'NEG':>8}{'PNC':>8}  seeds"]
    for name, cell in summary["cells"].items():
        runs = [r for r in cell["seeds"].values() if split_name in r]
        if not runs:
            lines.append(f"{name:<44}{'failed':>24}")
            continue
        means = [float(np.mean([r[split_name][p] for r in runs])) for p in ("POS", "NEG", "PNC")]
        lines.append(f"{name:<44}" + "".join(f"{m:>8.4f}" for m in means) + f"  {len(runs)}")
        for seed, r in cell["seeds"].items():
            if split_name in r:
                lines.append(f"{'  seed ' + seed:<44}" + "".join(f"{r[split_name][p]:>8.4f}" for p in ("POS", "NEG", "PNC")))
            else:
                lines.append(f"{'  seed ' + seed:<44}  error: {r.get('error')}")
    return "\n".join(lines)


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg.paths.ablate)
    cells = grid_cells(cfg)
    summary = {"cells": {c.name: {"setting": c.__dict__, "seeds": {}} for c in cells}}
    failures = 0
    for seed in cfg.grid.seeds:
        base = deepcopy(cfg)
        base.seed = seed
        splits = make_splits(base.validate())
        for cell in cells:
            key = str(seed)
            try:
                run = cell_config(cfg, cell, seed)
                result = run_cell(run, splits, out / cell.name / f"seed{seed}")
                print(f"{cell.name} seed {seed}: " + "  ".join(f"{p} {result['test'][p]:.4f}" for p in ("POS", "NEG", "PNC")), flush=True)
            except Exception as exc:  # keep the sweep going
                failures += 1
                result = {"error": f"{type(exc).__name__}: {exc}"}
                print(f"{cell.name} seed {seed}: FAILED {result['error']}", file=sys.stderr, flush=True)
            summary["cells"][cell.name]["seeds"][key] = result
    write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(ablation_table(summary, "test"))
    if cfg.external is not None:
        print("\nexternal")
        print(ablation_table(summary, "external"))
    print(f"wrote {out / 'summary.json'}")
    return EXIT_FAILURE if failures else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "dump-embeddings": cmd_dump_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bimcq", description="Bi-MCQ fine-tuning on synthetic multi-label data.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration (default: packaged default)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a dotted config key")
        p.add_argument("--out", help="output path for this command")
        p.add_argument("--seed", type=int, help="top-level seed")
        if name != "ablate":
            p.add_argument("--data", help="dataset directory")
            p.add_argument("--split", help="dataset split name")
        if name in ("eval", "dump-embeddings"):
            p.add_argument("--checkpoint", help="checkpoint file")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, args.set, args.seed)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (FileNotFoundError, IntegrityError, ParseError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
