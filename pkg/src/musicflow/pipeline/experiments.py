"""Paired-arm ablations and the guidance-weight sweep, built from the pipeline stages."""

from __future__ import annotations

import itertools
import logging
from pathlib import Path
from typing import Any

from musicflow.pipeline.stages import cmd_evaluate, cmd_generate, cmd_train
from musicflow.utils.assets import ArtifactStore
from musicflow.utils.errors import MusicflowError
from musicflow.utils.settings import AblationAxis, Conditioning, LossWeighting
from musicflow.utils.support import write_json
from musicflow.utils.typing import TYPE_CHECKING

if TYPE_CHECKING:
    from musicflow.utils.config import RunConfig

logger = logging.getLogger(__name__)

ABLATION_ARMS: dict[AblationAxis, dict[str, dict[str, Any]]] = {
    AblationAxis.LOSS_WEIGHTING: {
        "uniform": {"loss_weighting": LossWeighting.UNIFORM.value},
        "one_plus_t": {"loss_weighting": LossWeighting.ONE_PLUS_T.value},
    },
    AblationAxis.CONDITIONING: {
        "concat": {"conditioning": Conditioning.CONCAT.value},
        "cross_attention": {"conditioning": Conditioning.CROSS_ATTENTION.value},
    },
    AblationAxis.CONTROLS: {
        "unconditional": {"controls": ""},
        "chords": {"controls": "chords"},
        "melody": {"controls": "melody"},
        "drums": {"controls": "drums"},
        "audio": {"controls": "audio"},
    },
}

SWEEP_TEXT = (0.0, 0.5)
SWEEP_LOCAL = (0.0, -0.5)
SWEEP_BOTH = (1.5, 2.0)

TABLE_METRICS = ("chord_iou", "melody_accuracy", "chroma_cosine", "onset_f1")


def _table(rows: dict[str, dict[str, Any]]) -> str:
    header = f"{'arm':<28}" + "".join(f"{name:>17}" for name in (*TABLE_METRICS, "frechet"))
    lines = [header]
    for arm, summary in rows.items():
        cells = [summary["metrics"].get(name) for name in TABLE_METRICS] + [summary["frechet_distance"]]
        lines.append(f"{arm:<28}" + "".join(f"{'n/a' if v is None else f'{v:.4f}':>17}" for v in cells))
    return "\n".join(lines)


def _summary(report: dict[str, Any]) -> dict[str, Any]:
    return {
        "metrics": {name: report["aggregates"][name]["mean"] for name in report["aggregates"]},
        "frechet_distance": report["frechet_distance"],
        "manifest_digest": report["manifest_digest"],
    }


def compare_to_baseline(arms: dict[str, dict[str, Any]]) -> dict[str, dict[str, float | None]]:
    """Metric differences of every arm against the first one."""
    baseline_name, *others = arms
    baseline = arms[baseline_name]["metrics"]
    deltas = {}
    for arm in others:
        metrics = arms[arm]["metrics"]
        deltas[arm] = {
            name: None if metrics.get(name) is None or baseline.get(name) is None else metrics[name] - baseline[name]
            for name in TABLE_METRICS
        }
    return deltas


def cmd_ablate(cfg: RunConfig, axis: AblationAxis | str, force: bool = False) -> dict[str, Any]:
    """
    Train, generate and evaluate one toy model per arm of `axis`.

    Arms share the corpus, codec and seed and differ only in the ablated key. Returns
    (and writes) the side-by-side comparison, including each arm's metric deltas
    against the first arm (the unconditional one for `controls`). Single-control arms
    train with the 40% drop-all preset.
    """
    axis = AblationAxis(axis)
    base = Path(cfg.run_dir) / f"ablate_{axis.value}"
    arms: dict[str, dict[str, Any]] = {}

    for arm, changes in ABLATION_ARMS[axis].items():
        arm_cfg = cfg.replace(run_dir=str(base / arm), out_dir=str(base / arm / "generate"), **changes)
        logger.info(f"Ablation {axis.value}: arm {arm} ({changes})")
        cmd_train(arm_cfg, force=force)
        cmd_generate(arm_cfg, force=force)
        arms[arm] = _summary(cmd_evaluate(arm_cfg, force=force))

    digests = {summary["manifest_digest"] for summary in arms.values()}
    if len(digests) != 1:
        raise MusicflowError(f"Ablation arms were evaluated on different corpora: {sorted(digests)}")

    comparison = {
        "axis": axis.value,
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
        "arms": arms,
        "versus_baseline": compare_to_baseline(arms),
    }
    write_json(base / "comparison.json", comparison)
    logger.info(f"Ablation {axis.value}:\n{_table(arms)}")
    return comparison


def cmd_sweep_guidance(cfg: RunConfig, force: bool = False) -> list[dict[str, Any]]:
    """Generate and evaluate over the guidance grid; rows ranked by mean chord IOU."""
    ArtifactStore(cfg).model()
    base = Path(cfg.out_dir) / "sweep"
    rows = []
    for text, local, both in itertools.product(SWEEP_TEXT, SWEEP_LOCAL, SWEEP_BOTH):
        label = f"text{text:+.1f}_local{local:+.1f}_both{both:+.1f}"
        arm_cfg = cfg.replace(alpha_text=text, alpha_local=local, alpha_both=both, out_dir=str(base / label))
        cmd_generate(arm_cfg, force=force)
        summary = _summary(cmd_evaluate(arm_cfg, force=force))
        rows.append({"label": label, "alpha": [text, local, both], **summary})

    rows.sort(key=lambda row: -(row["metrics"]["chord_iou"] or 0.0))
    write_json(base / "sweep.json", rows)
    logger.info(f"Guidance sweep:\n{_table({row['label']: row for row in rows})}")
    return rows
