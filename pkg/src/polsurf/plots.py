"""Figure rendering for reports (all files, no interactive windows)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_channel_image(frame, channel: str, path) -> None:
    """Render one frame channel to an 8-bit image file.

    AoP uses a cyclic colormap (the angle is defined modulo pi), DoP is
    grayscale, color is clipped linear RGB.
    """
    if channel == "aop":
        plt.imsave(path, frame.aop, cmap="hsv", vmin=-np.pi / 2, vmax=np.pi / 2)
    elif channel == "dop":
        plt.imsave(path, frame.dop, cmap="gray", vmin=0.0, vmax=1.0)
    elif channel == "color":
        plt.imsave(path, np.clip(frame.color, 0.0, 1.0))
    else:
        raise ValueError(f"unknown channel {channel!r}; valid: aop, dop, color")


def save_error_histogram(errors: np.ndarray, e_max: float, path) -> None:
    """Signed-error distribution, truncated to +-e_max (red = swelling)."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(np.clip(errors, -e_max, e_max), bins=60, color="#c44", alpha=0.85)
    ax.axvline(0.0, color="k", lw=0.8)
    ax.set_xlabel("signed error")
    ax.set_ylabel("vertices")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_loss_curves(telemetry_rows: list[dict], path) -> None:
    """Per-iteration loss terms and schedule weights from telemetry."""
    it = [r["iteration"] for r in telemetry_rows]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    for key in ("loss_color", "loss_pol", "loss_normal", "loss_eikonal", "loss_mask"):
        ax1.plot(it, [r[key] for r in telemetry_rows], label=key.replace("loss_", ""))
    ax1.set_yscale("symlog", linthresh=1e-4)
    ax1.legend(fontsize=7, ncol=3)
    ax1.set_ylabel("loss")
    ax2.plot(it, [r["lambda_p"] for r in telemetry_rows], label="lambda_p")
    ax2.plot(it, [r["lambda_n"] for r in telemetry_rows], label="lambda_n")
    ax2.plot(it, [r["active_levels"] for r in telemetry_rows], label="active levels")
    ax2.legend(fontsize=7)
    ax2.set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
