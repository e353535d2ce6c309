"""Optional SVG line charts of MA/BA per round, drawn from a metrics CSV."""

from __future__ import annotations

from pathlib import Path

from .runner import read_metrics


def plot_metrics(csv_path, svg_path=None, title=None) -> Path:
    """Write an SVG with MA and BA against the round index. Needs matplotlib."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as err:  # pragma: no cover - depends on the environment
        raise RuntimeError("plotting needs matplotlib (pip install 'trojandam[plot]')") from err
    csv_path = Path(csv_path)
    svg_path = Path(svg_path) if svg_path else csv_path.with_suffix(".svg")
    rows = read_metrics(csv_path)
    rounds = [r["round"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(rounds, [r["ma"] for r in rows], label="MA")
    ax.plot(rounds, [r["ba"] for r in rows], label="BA")
    ax.set_xlabel("round")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(loc="lower right")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)
    return svg_path
