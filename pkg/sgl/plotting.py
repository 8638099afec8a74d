"""plotting.py

Static SVG line charts of CSV outputs.

"""


import logging

import matplotlib

matplotlib.use("Agg")

# element ids derive from the salt instead of random uuids
matplotlib.rcParams["svg.hashsalt"] = "sgl"

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from sgl.errors import MissingColumnError  # noqa: E402


logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


def emit_plot(
    csv_path: str,
    x: str,
    ys,
    out_path: str,
    logx: bool = False,
    logy: bool = False,
    title: str = None,
):
    """Draws one line per ``y`` column against ``x`` and saves an SVG.

    Parameters
    ------------
    csv_path: str
        the CSV file with a header row.
    x: str
        the column on the horizontal axis.
    ys: list(str)
        the columns drawn as lines.
    out_path: str
        the SVG file to write.
    logx: bool
        uses a logarithmic horizontal axis.
    logy: bool
        uses a logarithmic vertical axis; values below ``1e-12`` are clamped.
    title: str
        the chart title.

    Returns
    ---------
    str
        ``out_path``.
    """
    frame = pd.read_csv(csv_path)

    for column in [x, *ys]:
        if column not in frame.columns:
            raise MissingColumnError(column, csv_path)

    figure, axes = plt.subplots(figsize=(6.4, 4.0))

    for column in ys:
        values = frame[column].to_numpy(dtype=float)

        if logy and np.any(values < LOG_FLOOR):
            logger.warning(
                "Warning: clamped %d values of '%s' to %g for the log scale",
                int(np.sum(values < LOG_FLOOR)),
                column,
                LOG_FLOOR,
            )
            values = np.maximum(values, LOG_FLOOR)

        axes.plot(frame[x].to_numpy(dtype=float), values, label=column)

    if logx:
        axes.set_xscale("log")

    if logy:
        axes.set_yscale("log")

    axes.set_xlabel(x)
    axes.legend()

    if title:
        axes.set_title(title)

    figure.tight_layout()
    figure.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(figure)

    logger.info("Successfully wrote plot output: %s", out_path)

    return out_path


def emit_density_plot(densities: dict, target, out_path: str, title: str = None):
    """Draws model densities, keyed by label, over a target ``DensityGrid``."""
    figure, axes = plt.subplots(figsize=(6.4, 4.0))
    axes.plot(target.x, target.p, color="black", linestyle="--", label="target")

    for label, density in densities.items():
        axes.plot(density.x, density.p, label=str(label))

    axes.set_xlabel("x")
    axes.legend()

    if title:
        axes.set_title(title)

    figure.tight_layout()
    figure.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(figure)

    logger.info("Successfully wrote plot output: %s", out_path)

    return out_path
