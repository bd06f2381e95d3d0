"""Labeling-evolution curves from an epoch log.

Always writes a CSV; also renders a PNG when matplotlib is installed
(``pip install ssrl-desk[plot]``).
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Any

from .logging import get_logger

logger = get_logger(__name__)

EVOLUTION_COLUMNS = ["epoch", "active_clusters", "nmi", "accuracy_pct", "purity_pct"]


def write_labeling_evolution(records: list[dict[str, Any]], out_dir: Path) -> list[Path]:
    """Write ``labeling_evolution.csv`` (and ``.png`` if possible); returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "labeling_evolution.csv"
    with csv_path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=EVOLUTION_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(records)
    written = [csv_path]

    png_path = _render(records, out_dir / "labeling_evolution.png")
    if png_path is not None:
        written.append(png_path)
    return written


def _render(records: list[dict[str, Any]], path: Path) -> Path | None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.info("matplotlib not installed, skipping image")
        return None

    epochs = [r["epoch"] for r in records]
    fig, (top, bottom) = plt.subplots(2, 1, sharex=True, figsize=(7, 6))
    top.plot(epochs, [r["active_clusters"] for r in records], marker="o", ms=3)
    top.set_ylabel("active clusters")
    for key, label in (("accuracy_pct", "accuracy %"), ("purity_pct", "purity %")):
        bottom.plot(epochs, [r[key] for r in records], label=label)
    bottom.plot(epochs, [100.0 * r["nmi"] for r in records], label="NMI x 100")
    bottom.set_xlabel("epoch")
    bottom.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
