"""Command-line entry point.

    egointeract gen              --config C --out DIR
    egointeract train            --config C --stage {1,2} --data DIR --ckpt-out P [--ckpt-in P]
    egointeract eval             --config C --ckpt-in P --data DIR --out DIR
    egointeract export-affinity  --ckpt-in P --clip PATH --out DIR
    egointeract gradcheck        --config C

Every command that writes a directory also writes the effective config
(defaults merged, overrides applied) to ``config.json`` inside it.

Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError
from .clipfile import ClipFormatError, load_clip, save_clip
from .config import ConfigError, RunConfig
from .gradcheck import format_table, model_gradcheck
from .model import EgoModel, frame_block, prepare_clip
from .synthetic import InfeasibleSpec, generate_clip, make_dataset
from .train import NumericError, evaluate, model_from_checkpoint, train_stage1, train_stage2

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="egointeract", description="Ego-object interaction graphs on synthetic driving clips.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path, help="run config (JSON); defaults apply when omitted")
        sp.add_argument("--seed", type=int, help="overrides data.seed and train.seed")

    sp = sub.add_parser("gen", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--out", type=Path, help="dataset directory (default: paths.data_dir)")

    sp = sub.add_parser("train", help="train one stage")
    common(sp)
    sp.add_argument("--stage", type=int, choices=(1, 2), required=True)
    sp.add_argument("--data", type=Path, help="dataset directory (default: paths.data_dir)")
    sp.add_argument("--ckpt-in", type=Path, help="stage-1 checkpoint (required for stage 2)")
    sp.add_argument("--ckpt-out", type=Path, required=True)
    sp.add_argument("--out", type=Path, help="directory for the metrics log (default: next to --ckpt-out)")

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    common(sp)
    sp.add_argument("--ckpt-in", type=Path, required=True)
    sp.add_argument("--data", type=Path, help="dataset directory (default: paths.data_dir)")
    sp.add_argument("--out", type=Path, help="report directory (default: paths.out_dir)")

    sp = sub.add_parser("export-affinity", help="dump per-frame affinity matrices of one clip")
    common(sp)
    sp.add_argument("--ckpt-in", type=Path, required=True)
    sp.add_argument("--clip", type=Path, required=True, help="clip file (.clip / .json pair)")
    sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    common(sp)
    sp.add_argument("--out", type=Path, help="optional directory for the table")
    return p


def load_config(args) -> RunConfig:
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg.data.seed = args.seed
        cfg.train.seed = args.seed
    return cfg


def echo_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps())


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def clip_paths(data_dir: Path, split: str) -> list[Path]:
    d = data_dir / split
    if not d.is_dir():
        raise DataError(f"no {split!r} split under {data_dir}")
    paths = sorted(d.glob("*.clip"))
    if not paths:
        raise DataError(f"{d} holds no clips")
    return paths


def load_split(data_dir: Path, split: str, tcfg) -> list:
    out = []
    for p in clip_paths(data_dir, split):
        try:
            out.append(prepare_clip(load_clip(p), tcfg))
        except ValueError as exc:  # includes ClipFormatError
            raise DataError(f"{p}: {exc}") from exc
    return out


def cmd_gen(args) -> int:
    cfg = load_config(args)
    out = args.out or Path(cfg.paths.data_dir)
    train, ev, report = make_dataset(cfg.data.n_train, cfg.data.n_eval, cfg.data.seed, cfg.scene_template())
    for name, split in (("train", train), ("eval", ev)):
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        for i, clip in enumerate(split.clips()):
            save_clip(clip, d / f"clip_{i:06d}")
    _write_json(out / "report.json", report)
    echo_config(cfg, out)
    print(f"wrote {len(train)} train and {len(ev)} eval clips to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    tcfg = cfg.train_config(args.stage)
    if args.stage == 2 and args.ckpt_in is None:
        raise UsageError("stage 2 needs --ckpt-in pointing at a stage-1 checkpoint")
    stage1 = None
    if args.stage == 2:
        stage1 = Checkpoint.load(args.ckpt_in)
        if stage1.stage != 1:
            raise DataError(f"{args.ckpt_in} is a stage-{stage1.stage} checkpoint, expected stage 1")
    data = load_split(args.data or Path(cfg.paths.data_dir), "train", tcfg)
    out = args.out or args.ckpt_out.parent
    echo_config(cfg, out)
    rows: list[dict] = []
    if args.stage == 1:
        result = train_stage1(tcfg, data, log=rows.append)
    else:
        try:
            result = train_stage2(tcfg, data, stage1, log=rows.append)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    result.checkpoint.save(args.ckpt_out)
    heads = list(tcfg.heads)
    with open(out / f"metrics_stage{args.stage}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss"] + [f"loss_{h}" for h in heads])
        for r in rows:
            w.writerow([r["iteration"], repr(r["loss"])] + [repr(r[f"loss_{h}"]) for h in heads])
    last = rows[-1]["loss"] if rows else float("nan")
    print(f"stage {args.stage}: {len(rows)} iterations, final loss {last:.4f}, checkpoint {args.ckpt_out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    model = model_from_checkpoint(Checkpoint.load(args.ckpt_in))
    data = load_split(args.data or Path(cfg.paths.data_dir), "eval", model.cfg)
    report = evaluate(model, data)
    out = args.out or Path(cfg.paths.out_dir)
    echo_config(cfg, out)
    (out / "eval.json").write_text(report.to_json())
    (out / "eval.csv").write_text(report.to_csv())
    print(" ".join(f"{h} mAP {v:.4f}" for h, v in report.mAP.items()), f"({report.n_frames} frames)")
    return EXIT_OK


def _node_records(nodes, objects=None) -> list[dict]:
    recs = []
    for i, (kind, loc) in enumerate(zip(nodes.kinds, nodes.locations)):
        r = {"kind": kind, "location": [float(v) for v in loc]}
        if objects is not None:
            r["object"] = objects[i] if i < len(objects) else None
        recs.append(r)
    return recs


def _write_matrix(path: Path, G: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in G:
            w.writerow([repr(float(v)) for v in row])


def cmd_export_affinity(args) -> int:
    cfg = load_config(args)
    model = model_from_checkpoint(Checkpoint.load(args.ckpt_in))
    if not model.has_graphs:
        raise DataError(f"{args.ckpt_in} has no graph parameters (stage-1 checkpoint?)")
    try:
        cg = prepare_clip(load_clip(args.clip), model.cfg)
    except ValueError as exc:
        raise DataError(f"{args.clip}: {exc}") from exc
    out = args.out
    echo_config(cfg, out)
    Gt = model.thing_affinity(cg) if model.thing is not None else None
    Gs = model.stuff_affinity(cg) if model.stuff is not None else None
    frames = []
    for t in range(cg.T):
        rec = {"t": t}
        if Gt is not None:
            _write_matrix(out / f"thing_t{t:03d}.csv", frame_block(Gt, cg.thing_rows, t))
            rec["thing_nodes"] = _node_records(cg.thing_nodes[t], cg.thing_index[t])
        if Gs is not None:
            _write_matrix(out / f"stuff_t{t:03d}.csv", frame_block(Gs, cg.stuff_rows, t))
            rec["stuff_nodes"] = _node_records(cg.stuff_nodes[t])
            rec["stuff_dists"] = [float(d) for d in cg.stuff_dists[t]]
        frames.append(rec)
    _write_json(out / "affinity.json", {
        "clip": args.clip.name,
        "mu_thing": model.cfg.mu_thing,
        "mu_stuff": model.cfg.mu_stuff,
        "frames": frames,
    })
    print(f"exported {cg.T} frames to {out}")
    return EXIT_OK


def gradcheck_rows(cfg: RunConfig):
    """Check every parameter group of a float64 stage-2 model on one generated clip."""
    tcfg = dataclasses.replace(cfg.train_config(2), dtype="float64", fusion="mlp")
    template = dataclasses.replace(cfg.scene_template(), seed=cfg.data.seed, dataset_seed=cfg.data.seed,
                                   goal=tcfg.goal_classes[0] if tcfg.goal_classes else "background",
                                   cause=tcfg.cause_classes[0] if tcfg.cause_classes else "background")
    cg = prepare_clip(generate_clip(template), tcfg)
    return model_gradcheck(EgoModel.initialize(tcfg), cg, seed=cfg.train.seed)


def cmd_gradcheck(args) -> int:
    cfg = load_config(args)
    rows = gradcheck_rows(cfg)
    table = format_table(rows)
    print(table)
    if args.out is not None:
        echo_config(cfg, args.out)
        (args.out / "gradcheck.txt").write_text(table + "\n")
    if not all(r.passed for r in rows):
        print("gradcheck: some parameter groups FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-affinity": cmd_export_affinity,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"egointeract: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, InfeasibleSpec) as exc:
        print(f"egointeract: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ClipFormatError, CheckpointError) as exc:
        print(f"egointeract: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"egointeract: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
