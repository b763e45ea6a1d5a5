"""Command line entry point: ``occtrack <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import assess as A
from .checkpoint import load_checkpoint, save_checkpoint, update_header
from .geometry import BoundingBox, SimilarityTransform, accumulate_motion
from .harness.ablation import VARIANTS, AblationSuite, format_table, run_ablation, variant_plan
from .harness.dataset import load_suite, save_sequence
from .harness.metrics import evaluate
from .harness.synth import generate_sequence, load_config, sample_config
from .harness.training import TrainingPlan, mine_suite, train_all, train_trajectory_model
from .pipeline import Models, PipelineConfig, lazy_threshold, run_sequence
from .trajnet import TrajectoryNetConfig, build_windows, sequence_motion, train_trajectory

log = logging.getLogger("occtrack")


def _on_off(v: str) -> bool:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return v == "on"


def _truthy(v: str) -> bool:
    return v.strip().lower() in ("1", "true", "yes", "on")


def cmd_generate(args) -> None:
    cfg, extra = load_config(args.config)
    count = int(extra.pop("count", 1))
    randomise = _truthy(extra.pop("random", "false"))
    occl = _truthy(extra.pop("random_occlusion", "false"))
    if extra:
        raise ValueError(f"unknown config keys: {', '.join(sorted(extra))}")
    out = Path(args.out)
    for i in range(count):
        if randomise:
            c = sample_config(
                cfg.seed + i, occlusion=occl, frame_shape=cfg.frame_shape, length=cfg.length, target_size=cfg.target_size
            )
        else:
            c = replace(cfg, seed=cfg.seed + i)
        save_sequence(generate_sequence(c), out if count == 1 else out / f"seq_{i:04d}")
    print(f"wrote {count} sequence(s) to {out}")


def _traj_config(args) -> TrajectoryNetConfig:
    return TrajectoryNetConfig(
        past_len=args.past_len,
        map_shape=(args.map_size, args.map_size),
        compensate=not args.no_bg,
        use_image=not args.no_img,
        location_input="coords" if args.coords else "map",
    )


def cmd_train_traj(args) -> None:
    cfg = _traj_config(args)
    seqs = load_suite(args.data)
    motions = [sequence_motion(s, args.motion if cfg.compensate else "none") for s in seqs]
    windows = build_windows(seqs, cfg, stride=args.stride, motions=motions)
    res = train_trajectory(windows, cfg, epochs=args.epochs, lr=args.lr, seed=args.seed)
    save_checkpoint(args.out, Models(res.net), seed=args.seed, traj_epochs=args.epochs)
    print(f"trained on {len(windows)} windows; loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}; wrote {args.out}")


def cmd_train_assess(args) -> None:
    models, header = load_checkpoint(args.checkpoint)
    if models.traj is None:
        raise ValueError(f"{args.checkpoint} has no trajectory network")
    cfg = A.AssessConfig(
        past_len=models.traj.cfg.past_len, use_heatmap=not args.no_heatmap, traj_heatmap=args.traj_heatmap
    )
    seqs = load_suite(args.data)
    motions = [sequence_motion(s, args.motion if models.traj.cfg.compensate else "none") for s in seqs]
    samples = mine_suite(seqs, models.traj, motions, seed=args.seed, traj_heatmap=cfg.traj_heatmap)
    res = A.train_assessment(samples, cfg, epochs=args.epochs, lr=args.lr, seed=args.seed)
    out = args.out or args.checkpoint
    keep = {k: v for k, v in header.items() if k in ("seed", "traj_epochs")}
    save_checkpoint(out, replace(models, assess=res.net, temperature=1.0), assess_epochs=args.epochs, assess_seed=args.seed, **keep)
    print(f"trained on {len(samples)} samples; loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}; wrote {out}")


def cmd_calibrate(args) -> None:
    models, _ = load_checkpoint(args.checkpoint)
    if models.traj is None or models.assess is None:
        raise ValueError(f"{args.checkpoint} needs both networks before calibration")
    seqs = load_suite(args.data)
    motions = [sequence_motion(s, args.motion if models.traj.cfg.compensate else "none") for s in seqs]
    samples = mine_suite(seqs, models.traj, motions, seed=args.seed, traj_heatmap=models.assess.cfg.traj_heatmap)
    cal = A.calibrate_temperature(samples, models.assess)
    tau = lazy_threshold(seqs, q=args.tau_percentile)
    update_header(args.checkpoint, temperature=repr(cal.T), tau=repr(tau))
    print(f"temperature {cal.T:.6g}, tau {tau:.6g}; updated {args.checkpoint}")


def _motion_records(results) -> list[dict]:
    steps = [SimilarityTransform.identity()] + [r.step or SimilarityTransform.identity() for r in results[1:]]
    acc = accumulate_motion(steps)
    return [
        {"frame": k, "r": s.r, "c": s.c, "vx": s.v[0], "vy": s.v[1], "mx": float(m[0]), "my": float(m[1])}
        for k, (s, m) in enumerate(zip(steps, acc))
    ]


def cmd_track(args) -> None:
    models, _ = load_checkpoint(args.checkpoint)
    seqs = load_suite(args.seq)
    if len(seqs) != 1:
        raise ValueError(f"{args.seq} holds {len(seqs)} sequences; track takes one")
    seq = seqs[0]
    cfg = PipelineConfig(lazy=args.lazy, tracker_only=args.tracker_only)
    results = run_sequence(seq.frames, seq.boxes[0], models, cfg)
    Path(args.out).write_text(json.dumps([r.to_json() for r in results], indent=1) + "\n")
    if args.dump_motion:
        with open(args.dump_motion, "w") as f:
            for rec in _motion_records(results):
                f.write(json.dumps(rec) + "\n")
    n_traj = sum(r.branch == "trajectory" for r in results)
    print(f"tracked {len(results)} frames ({n_traj} from the trajectory branch); wrote {args.out}")


def load_results(path: str | Path) -> list[BoundingBox]:
    recs = json.loads(Path(path).read_text())
    try:
        return [BoundingBox.from_xywh(r["x"], r["y"], r["w"], r["h"]) for r in recs]
    except (KeyError, TypeError) as e:
        raise ValueError(f"{path}: malformed result record ({e})") from None


def cmd_eval(args) -> None:
    seqs = load_suite(args.seq)
    if len(seqs) != 1:
        raise ValueError(f"{args.seq} holds {len(seqs)} sequences; eval takes one")
    rep = evaluate(load_results(args.results), seqs[0])
    Path(args.report).write_text(json.dumps(rep.to_dict(), indent=1) + "\n")
    print(f"AUC {rep.auc:.4f}  precision@20 {rep.precision:.4f}  mean IoU {rep.mean_iou:.4f}; wrote {args.report}")


def cmd_train_variants(args) -> None:
    base = TrainingPlan(seed=args.seed, traj_epochs=args.traj_epochs, assess_epochs=args.assess_epochs)
    out = Path(args.out)
    trained = {}  # variants that differ only in selection share one trajectory net
    for name in args.variants.split(","):
        name = name.strip()
        if name not in VARIANTS:
            raise ValueError(f"unknown variant {name!r}")
        if VARIANTS[name].checkpoint not in (None, name):
            continue
        plan = variant_plan(name, base)
        if plan.traj not in trained:
            trained[plan.traj] = train_trajectory_model(plan)
        tm = train_all(plan, traj_result=trained[plan.traj])
        save_checkpoint(out / f"{name}.npz", tm.models, seed=plan.seed, traj_epochs=plan.traj_epochs, assess_epochs=plan.assess_epochs)
        print(f"{name}: T {tm.models.temperature:.4g}, tau {tm.models.tau:.4g}")


def cmd_ablate(args) -> None:
    path = Path(args.suite)
    suite = AblationSuite.parse(path.read_text(), base=path.parent)
    reports = run_ablation(suite)
    print(format_table(reports))
    if args.out:
        Path(args.out).write_text(json.dumps({k: v.to_dict() for k, v in reports.items()}, indent=1) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occtrack", description="Occlusion-robust tracking with trajectory prediction.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render synthetic sequences from a config")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    def common(sp, epochs, lr):
        sp.add_argument("--data", required=True, help="sequence or directory of sequences")
        sp.add_argument("--epochs", type=int, default=epochs)
        sp.add_argument("--lr", type=float, default=lr)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--motion", choices=["estimated", "camera", "none"], default="estimated")

    t = sub.add_parser("train-traj", help="train the trajectory network")
    common(t, 20, 2e-4)
    t.add_argument("--out", required=True)
    t.add_argument("--past-len", type=int, default=11)
    t.add_argument("--map-size", type=int, default=32)
    t.add_argument("--stride", type=int, default=2)
    t.add_argument("--no-bg", action="store_true")
    t.add_argument("--no-img", action="store_true")
    t.add_argument("--coords", action="store_true")
    t.set_defaults(func=cmd_train_traj)

    a = sub.add_parser("train-assess", help="train the assessment network on mined samples")
    common(a, 40, 1e-3)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--out")
    a.add_argument("--no-heatmap", action="store_true")
    a.add_argument("--traj-heatmap", choices=["tracker", "response"], default="tracker")
    a.set_defaults(func=cmd_train_assess)

    c = sub.add_parser("calibrate", help="fit the temperature and lazy threshold on a validation split")
    c.add_argument("--data", required=True)
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--seed", type=int, default=1)
    c.add_argument("--motion", choices=["estimated", "camera", "none"], default="estimated")
    c.add_argument("--tau-percentile", type=float, default=20.0)
    c.set_defaults(func=cmd_calibrate)

    k = sub.add_parser("track", help="run the pipeline on one sequence")
    k.add_argument("--seq", required=True)
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--lazy", type=_on_off, default=True, metavar="on|off")
    k.add_argument("--tracker-only", action="store_true")
    k.add_argument("--dump-motion")
    k.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", help="score tracking results against ground truth")
    e.add_argument("--results", required=True)
    e.add_argument("--seq", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("train-variants", help="train the checkpoints an ablation suite needs")
    v.add_argument("--out", required=True)
    v.add_argument("--variants", default="complete,no-bg,no-heatmap")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--traj-epochs", type=int, default=20)
    v.add_argument("--assess-epochs", type=int, default=40)
    v.set_defaults(func=cmd_train_variants)

    b = sub.add_parser("ablate", help="evaluate pipeline variants on a seeded suite")
    b.add_argument("--suite", required=True)
    b.add_argument("--out")
    b.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError, OSError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
