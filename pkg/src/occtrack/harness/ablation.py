"""Pipeline variants evaluated side by side on one seeded synthetic suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from ..pipeline import Models, PipelineConfig, run_sequence
from .metrics import MetricReport, evaluate_suite
from .training import TrainingPlan, synthetic_suite

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    """How a variant differs from the complete method.

    ``checkpoint`` names the variant whose trained models it reuses
    (itself when None); ``traj`` and ``assess`` override config fields for
    training; ``pipeline`` configures inference.
    """

    checkpoint: str | None = None
    traj: dict = field(default_factory=dict)
    assess: dict = field(default_factory=dict)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)


VARIANTS: dict[str, Variant] = {
    "complete": Variant(),
    "tracker-only": Variant(checkpoint="complete", pipeline=PipelineConfig(tracker_only=True)),
    "no-calibration": Variant(checkpoint="complete", pipeline=PipelineConfig(calibrate=False)),
    "no-lazy": Variant(checkpoint="complete", pipeline=PipelineConfig(lazy=False)),
    "no-bg": Variant(traj={"compensate": False}),
    "no-img": Variant(traj={"use_image": False}),
    "coords": Variant(traj={"location_input": "coords"}),
    "temp-6": Variant(traj={"past_len": 6}),
    "temp-16": Variant(traj={"past_len": 16}),
    "no-heatmap": Variant(assess={"use_heatmap": False}),
    "weight": Variant(checkpoint="no-heatmap", pipeline=PipelineConfig(selection="weight")),
    "response-heatmap": Variant(assess={"traj_heatmap": "response"}),
}


def checkpoint_name(variant: str) -> str:
    v = VARIANTS[variant]
    return v.checkpoint or variant


def variant_plan(variant: str, base: TrainingPlan | None = None) -> TrainingPlan:
    """Training plan of the checkpoint a variant uses."""
    base = base or TrainingPlan()
    v = VARIANTS[checkpoint_name(variant)]
    traj = replace(base.traj, **v.traj)
    assess = replace(base.assess, past_len=traj.past_len, **v.assess)
    return replace(base, traj=traj, assess=assess)


@dataclass
class AblationSuite:
    """A ``key: value`` suite description.

    ``checkpoints`` is a directory holding ``<name>.npz`` for each variant's
    checkpoint; the benchmark is ``count`` sequences from ``seed``.
    """

    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    count: int = 50
    seed: int = 9_000_000
    occlusion: bool = True
    camera: str | None = None
    length: int = 40
    checkpoints: str = "checkpoints"

    def __post_init__(self):
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ValueError(f"unknown variants: {', '.join(unknown)}")

    @classmethod
    def parse(cls, text: str, base: Path | None = None) -> "AblationSuite":
        kw: dict = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition(":")
            if not sep:
                raise ValueError(f"line {lineno}: expected 'key: value'")
            key, value = key.strip(), value.strip()
            if key == "variants":
                kw[key] = [v.strip() for v in value.split(",") if v.strip()]
            elif key in ("count", "seed", "length"):
                kw[key] = int(value)
            elif key == "occlusion":
                kw[key] = value.lower() in ("1", "true", "yes", "on")
            elif key == "camera":
                kw[key] = None if value in ("", "any", "random") else value
            elif key == "checkpoints":
                kw[key] = str((base / value) if base is not None and not Path(value).is_absolute() else value)
            else:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
        return cls(**kw)

    def sequences(self) -> list:
        return synthetic_suite(self.count, self.seed, occlusion=self.occlusion, camera=self.camera, length=self.length)


def evaluate_variant(models: Models, variant: str, sequences: Sequence) -> MetricReport:
    cfg = VARIANTS[variant].pipeline
    return evaluate_suite([(run_sequence(s.frames, s.boxes[0], models, cfg), s) for s in sequences])


def run_ablation(
    suite: AblationSuite, models: dict[str, Models] | None = None, sequences: Sequence | None = None
) -> dict[str, MetricReport]:
    """Reports keyed by variant, in suite order.

    Models come from ``models`` (keyed by checkpoint name) or are loaded from
    the suite's checkpoint directory.
    """
    from ..checkpoint import load_checkpoint

    models = dict(models or {})
    for v in suite.variants:
        name = checkpoint_name(v)
        if name not in models:
            path = Path(suite.checkpoints) / f"{name}.npz"
            if not path.exists():
                raise FileNotFoundError(f"variant {v!r}: missing checkpoint {path}")
            models[name] = load_checkpoint(path)[0]
    seqs = sequences if sequences is not None else suite.sequences()
    out = {}
    for v in suite.variants:
        out[v] = evaluate_variant(models[checkpoint_name(v)], v, seqs)
        log.info("%s: auc %.4f", v, out[v].auc)
    return out


def format_table(reports: dict[str, MetricReport]) -> str:
    head = f"{'variant':<18}{'AUC':>8}{'prec@20':>9}{'mIoU':>8}{'fail':>8}{'occ mIoU':>10}"
    rows = [head, "-" * len(head)]
    for name, r in reports.items():
        occ = r.attributes.get("occluded")
        occ_s = f"{occ.mean_iou:10.4f}" if occ is not None else f"{'-':>10}"
        rows.append(f"{name:<18}{r.auc:8.4f}{r.precision:9.4f}{r.mean_iou:8.4f}{r.failure_rate:8.4f}{occ_s}")
    return "\n".join(rows)

