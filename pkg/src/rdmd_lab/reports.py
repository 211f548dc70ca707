"""
CSV, JSON and SVG artifacts. Every writer is byte-deterministic for equal
inputs: fixed float format, ``\\n`` line endings, and SVGs without dates or
random ids.
"""
from __future__ import annotations

import io
import json
import logging
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from matplotlib.collections import LineCollection  # noqa: E402

from rdmd_lab.data import PairSet  # noqa: E402
from rdmd_lab.errors import ValidationError  # noqa: E402
from rdmd_lab.files import write_bytes, write_text  # noqa: E402

log = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
SVG_RC = {"svg.hashsalt": "rdmd-lab", "svg.fonttype": "none", "path.simplify": False}
SOURCE_COLOR, OUTPUT_COLOR, TARGET_COLOR = "#1f77b4", "#d62728", "#7f7f7f"


def frame_to_csv_text(df: pd.DataFrame) -> str:
    return df.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_csv(path: str | Path, df: pd.DataFrame) -> Path:
    path = write_text(path, frame_to_csv_text(df))
    log.info("wrote %s (%d rows)", path, len(df))
    return path


def write_log_csv(path: str | Path, rows: Sequence[dict], columns: Sequence[str]) -> Path:
    return write_csv(path, pd.DataFrame(list(rows), columns=list(columns)))


def write_json(path: str | Path, obj) -> Path:
    path = write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")
    log.info("wrote %s", path)
    return path


def pair_columns(dim: int) -> list[str]:
    return [f"x_{i}" for i in range(dim)] + [f"y_{i}" for i in range(dim)]


def pairs_frame(pairs: PairSet) -> pd.DataFrame:
    return pd.DataFrame(np.hstack([pairs.inputs, pairs.outputs]), columns=pair_columns(pairs.dim))


def write_pairs_csv(path: str | Path, pairs: PairSet) -> Path:
    return write_csv(path, pairs_frame(pairs))


def write_samples_csv(path: str | Path, samples: np.ndarray) -> Path:
    samples = np.asarray(samples, dtype=np.float64)
    return write_csv(path, pd.DataFrame(samples, columns=[f"x_{i}" for i in range(samples.shape[1])]))


def _read_numeric_csv(path: str | Path, what: str) -> pd.DataFrame:
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise ValidationError(f"{what} CSV not found: {path}") from None
    except pd.errors.EmptyDataError:
        raise ValidationError(f"{what} CSV {path} has no header") from None
    except pd.errors.ParserError as e:
        raise ValidationError(f"malformed {what} CSV {path}: {e}") from None

    values = np.empty(raw.shape, dtype=np.float64)
    for i, row in enumerate(raw.itertuples(index=False)):
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except (TypeError, ValueError):
                # header is line 1
                raise ValidationError(
                    f"malformed {what} CSV {path}: row {i + 1} (line {i + 2}) column {raw.columns[j]!r} = {cell!r}"
                ) from None
            if not np.isfinite(values[i, j]):
                raise ValidationError(f"malformed {what} CSV {path}: row {i + 1} has a non-finite value")
    return pd.DataFrame(values, columns=raw.columns)


def read_pairs_csv(path: str | Path) -> PairSet:
    df = _read_numeric_csv(path, "pair")
    cols = list(df.columns)
    dim = len(cols) // 2
    if dim == 0 or cols != pair_columns(dim):
        raise ValidationError(f"pair CSV {path}: expected columns {pair_columns(max(dim, 2))}, got {cols}")
    values = df.to_numpy()
    return PairSet(values[:, :dim].reshape(-1, dim), values[:, dim:].reshape(-1, dim))


def read_samples_csv(path: str | Path) -> np.ndarray:
    return _read_numeric_csv(path, "sample").to_numpy()


def _save_svg(fig, path: str | Path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    path = write_bytes(path, buf.getvalue())
    log.info("wrote %s", path)
    return path


def plot_pairs(
    pairs: PairSet,
    path: str | Path,
    reference: np.ndarray | None = None,
    title: str | None = None,
) -> Path:
    """Source points, generator outputs and input->output segments; optional target cloud behind."""
    with plt.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(6, 6))
        if reference is not None and len(reference):
            ax.scatter(reference[:, 0], reference[:, 1], s=2, c=TARGET_COLOR, alpha=0.4, label="target", linewidths=0)
        if len(pairs):
            segments = np.stack([pairs.inputs[:, :2], pairs.outputs[:, :2]], axis=1)
            ax.add_collection(LineCollection(segments, colors="k", linewidths=0.2, alpha=0.3))
            ax.scatter(pairs.inputs[:, 0], pairs.inputs[:, 1], s=2, c=SOURCE_COLOR, label="x", linewidths=0)
            ax.scatter(pairs.outputs[:, 0], pairs.outputs[:, 1], s=2, c=OUTPUT_COLOR, label="G(x)", linewidths=0)
            ax.legend(loc="upper right", markerscale=4)
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("x_0")
        ax.set_ylabel("x_1")
        if title:
            ax.set_title(title)
        return _save_svg(fig, path)


def plot_surface(grid: pd.DataFrame, lam: float, path: str | Path) -> Path:
    table = grid.pivot(index="r", columns="alpha", values="total")
    r = table.index.to_numpy()
    alpha = table.columns.to_numpy()
    z = table.to_numpy()
    i, j = np.unravel_index(np.argmin(z), z.shape)
    with plt.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(6, 5))
        cs = ax.contourf(alpha, r, z, levels=30, cmap="viridis")
        ax.contour(alpha, r, z, levels=15, colors="k", linewidths=0.3)
        fig.colorbar(cs, ax=ax)
        ax.plot([alpha[j]], [r[i]], marker="*", color="w", markersize=10)
        ax.set_xlabel("alpha")
        ax.set_ylabel("r")
        ax.set_title(f"loss surface, lambda={lam:g}")
        return _save_svg(fig, path)


def plot_tradeoff(sweep: pd.DataFrame, path: str | Path) -> Path:
    """Transport cost against energy distance, one point per run, labelled by lambda."""
    with plt.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(6, 4.5))
        for sigma_init, group in sweep.sort_values("lambda").groupby("sigma_init", sort=True, dropna=False):
            ax.plot(group["transport_cost_rms"], group["energy_distance"], marker="o", label=f"sigma_init={sigma_init:g}")
            for _, row in group.iterrows():
                ax.annotate(f"{row['lambda']:g}", (row["transport_cost_rms"], row["energy_distance"]), fontsize=7)
        ax.set_xlabel("transport cost (rms)")
        ax.set_ylabel("energy distance to target")
        ax.legend()
        return _save_svg(fig, path)

