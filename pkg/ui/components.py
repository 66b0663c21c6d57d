"""Plain-text renderers for command-line output."""

import math
from typing import Dict, List, Optional, Sequence

import numpy as np

from core.numcore import GradCheckReport
from core.probe import ProbeMetrics, ProbeReport
from utils.helpers import format_metric


def render_int_grid(matrix: np.ndarray) -> List[str]:
    """One line per row, space-separated integers."""
    return [" ".join(str(int(v)) for v in row) for row in np.asarray(matrix)]


def render_mask_grid(mask: np.ndarray) -> List[str]:
    """``0`` for permitted pairs, ``-inf`` for masked ones."""
    return [" ".join("0" if v == 0 else "-inf" for v in row) for row in np.asarray(mask)]


def render_inspect(
    sentence_id: str,
    labels: Sequence[str],
    distances: np.ndarray,
    mask: np.ndarray,
    depths: np.ndarray,
    delta: int,
) -> str:
    """D grid, M grid and depth vector of one sentence."""
    lines = [f"# sent_id = {sentence_id}", "# positions = " + " ".join(labels), "# D"]
    lines += render_int_grid(distances)
    lines.append(f"# M delta = {delta}")
    lines += render_mask_grid(mask)
    lines.append("# depths")
    lines.append(" ".join(str(int(d)) for d in depths))
    return "\n".join(lines) + "\n"


def render_probe_line(metrics: ProbeMetrics) -> str:
    """``sent_id uuas root spearman``."""
    root = 1.0 if metrics.root_correct else 0.0
    return f"{metrics.sentence_id} {format_metric(metrics.uuas)} {format_metric(root)} " \
           f"{format_metric(metrics.spearman)}"


def render_probe_report(report: ProbeReport) -> str:
    lines = [render_probe_line(m) for m in report.sequences]
    lines.append(f"ALL {format_metric(report.mean_uuas)} {format_metric(report.root_accuracy)} "
                 f"{format_metric(report.mean_spearman)}")
    return "\n".join(lines) + "\n"


def render_parameter_counts(counts: Dict[str, int]) -> str:
    width = max(len(k) for k in counts)
    return "\n".join(f"{name.ljust(width)} {value}" for name, value in counts.items()) + "\n"


def render_grad_check(report: GradCheckReport, tolerance: float, verbose: bool = False) -> str:
    """Max relative error line, optionally preceded by the per-parameter errors."""
    lines = []
    if verbose:
        for name, error in sorted(report.errors.items()):
            lines.append(f"{name} {error:.3e}")
    status = "ok" if report.max_error < tolerance else "FAILED"
    worst = report.worst_parameter or "-"
    lines.append(f"max_relative_error {report.max_error:.3e} ({worst}) tolerance {tolerance:.0e} {status}")
    return "\n".join(lines) + "\n"


def render_training_summary(stage: str, steps: int, final: Optional[Dict[str, float]]) -> str:
    parts = [f"{stage} steps={steps}"]
    for key, value in (final or {}).items():
        if key in ("step", "run", "alpha"):
            continue
        if value is None or (isinstance(value, float) and math.isnan(value)):
            continue
        parts.append(f"{key}={format_metric(value)}")
    return " ".join(parts) + "\n"
