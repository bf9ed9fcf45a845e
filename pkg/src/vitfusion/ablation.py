"""Ablation runners: fusion-strategy comparison and component removal.

Every variant trains under the same seed and step budget and is scored with
the same evaluation, so rows differ only in the ablated mechanism. Removed
components are replaced by single linear stages that preserve widths.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .config import RunConfig
from .evaluation import evaluate_model
from .nn import ConfigError
from .training import train

FUSION_STRATEGY_ROWS = [
    ("SUM", {"fusion_strategy": "sum"}),
    ("CONCAT", {"fusion_strategy": "concat"}),
    ("DIRECT CONCAT", {"fusion_strategy": "direct_concat"}),
]

COMPONENT_ROWS = [
    ("Without Both", {"camera_stage": "linear", "lidar_stage": "linear"}),
    ("Without LidarViT", {"lidar_stage": "linear"}),
    ("Without CameraViT", {"camera_stage": "linear"}),
    ("Without MixViT", {"fusion_stage": "linear"}),
    ("Normal", {}),
]

ABLATION_KINDS = {
    "fusion_strategy": FUSION_STRATEGY_ROWS,
    "component_removal": COMPONENT_ROWS,
}


@dataclass
class AblationReport:
    kind: str
    classes: list
    difficulty: str
    rows: list = field(default_factory=list)     # (name, {class: {"ap","aph"}})

    def to_dict(self) -> dict:
        return {"kind": self.kind, "classes": self.classes,
                "difficulty": self.difficulty, "rows": self.rows}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_text(self) -> str:
        fmt = lambda v: "  n/a" if v is None else f"{100 * v:5.1f}"
        header = f"{'variant':<18}" + "".join(
            f"{c + ' AP':>10}{c + ' APH':>11}" for c in self.classes)
        lines = [f"[{self.kind} @ {self.difficulty}]", header]
        for name, cells in self.rows:
            row = f"{name:<18}"
            for c in self.classes:
                row += f"{fmt(cells[c]['ap']):>10}{fmt(cells[c]['aph']):>11}"
            lines.append(row)
        return "\n".join(lines)


def run_ablation(kind: str, cfg: RunConfig, train_scenes, eval_scenes=None,
                 difficulty: str = "hard", log_fn=None) -> AblationReport:
    """Train and evaluate every variant of the requested ablation."""
    if kind not in ABLATION_KINDS:
        raise ConfigError(f"unknown ablation kind {kind!r}")
    eval_scenes = eval_scenes if eval_scenes is not None else train_scenes
    report = AblationReport(kind=kind, classes=list(cfg.classes), difficulty=difficulty)
    for name, overrides in ABLATION_KINDS[kind]:
        variant_cfg = dataclasses.replace(cfg, **overrides)
        result = train(variant_cfg, "fusion", train_scenes, log_fn=log_fn)
        eval_report = evaluate_model(result.model, eval_scenes)
        cells = {
            cls: {"ap": eval_report.ap("3d", cls, difficulty),
                  "aph": eval_report.aph("3d", cls, difficulty)}
            for cls in cfg.classes
        }
        report.rows.append((name, cells))
    return report
