"""Polarization imaging: Stokes vectors, AoP/DoP maps and frame I/O.

All intensities are linear radiometric values (no gamma). A frame bundles
the color image, the AoP/DoP maps computed from four polarizer-angle
images, a foreground mask and the pinhole camera.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

EPS_NUM = 1e-6

MAGIC = "PFRAME v1"

# channel name -> plane count
_KNOWN_CHANNELS = {
    "color3": 3,
    "aop1": 1,
    "dop1": 1,
    "mask1": 1,
    "gtnormal3": 3,
    "gtdepth1": 1,
}


class FrameFormatError(ValueError):
    """Malformed frame container (bad header, truncated or mismatched channels)."""


@dataclass
class StokesVector:
    """Linear polarization state: total intensity and the two difference terms."""

    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray


@dataclass
class CameraModel:
    """Pinhole intrinsics plus a rigid world->camera transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3,3) world->camera
    translation: np.ndarray  # (3,) meters

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass
class PolarizationFrame:
    """One calibrated view: color, AoP, DoP, mask and the camera."""

    color: np.ndarray  # (H,W,3) linear RGB
    aop: np.ndarray  # (H,W) radians in [-pi/2, pi/2]
    dop: np.ndarray  # (H,W) in [0,1]
    mask: np.ndarray  # (H,W) bool, True = foreground
    camera: CameraModel
    gtnormal: np.ndarray | None = None  # (H,W,3) camera-frame, eval only
    gtdepth: np.ndarray | None = None  # (H,W), eval only

    @property
    def height(self) -> int:
        return self.color.shape[0]

    @property
    def width(self) -> int:
        return self.color.shape[1]


def stokes_from_polarizer_images(i0, i45, i90, i135) -> StokesVector:
    """Stokes parameters from four polarizer-angle intensity images.

    s0 = (I0+I45+I90+I135)/2, s1 = I0-I90, s2 = I45-I135.
    """
    i0, i45, i90, i135 = (np.asarray(a, dtype=np.float64) for a in (i0, i45, i90, i135))
    for a in (i0, i45, i90, i135):
        if np.any(a < 0):
            raise ValueError("polarizer intensities must be nonnegative")
    s0 = (i0 + i45 + i90 + i135) / 2.0
    return StokesVector(s0=s0, s1=i0 - i90, s2=i45 - i135)


def aop(s: StokesVector) -> np.ndarray:
    """Angle of polarization, (1/2) atan2(s2, s1), in [-pi/2, pi/2].

    Defined as exactly 0 where s1 = s2 = 0.
    """
    return 0.5 * np.arctan2(s.s2, s.s1)


def dop(s: StokesVector) -> np.ndarray:
    """Degree of linear polarization, clamped to [0,1]; 0 where s0 is ~zero."""
    mag = np.hypot(s.s1, s.s2)
    s0 = np.asarray(s.s0, dtype=np.float64)
    out = np.where(s0 > EPS_NUM, mag / np.where(s0 > EPS_NUM, s0, 1.0), 0.0)
    return np.clip(out, 0.0, 1.0)


def wrap_aop(phi):
    """Wrap an angle into [-pi/2, pi/2) modulo pi."""
    return np.mod(np.asarray(phi) + np.pi / 2, np.pi) - np.pi / 2


def frame_from_polarizer_images(i0, i45, i90, i135, mask, camera: CameraModel,
                                color: np.ndarray | None = None) -> PolarizationFrame:
    """Build a frame from four aligned polarizer-angle images.

    Each input may be (H,W) or (H,W,3); AoP/DoP are computed on the
    channel mean. The color image defaults to s0/2 (the unpolarized
    average intensity).
    """
    s = stokes_from_polarizer_images(i0, i45, i90, i135)
    s0, s1, s2 = s.s0, s.s1, s.s2
    if s0.ndim == 3:
        s = StokesVector(s0.mean(-1), s1.mean(-1), s2.mean(-1))
    if color is None:
        c = s0 / 2.0
        color = np.repeat(c[..., None], 3, axis=-1) if c.ndim == 2 else c
    return PolarizationFrame(
        color=np.asarray(color, dtype=np.float32),
        aop=np.asarray(aop(s), dtype=np.float32),
        dop=np.asarray(dop(s), dtype=np.float32),
        mask=np.asarray(mask, dtype=bool),
        camera=camera,
    )


def _fmt_floats(vals) -> str:
    return " ".join(f"{v:.17g}" for v in np.asarray(vals, dtype=np.float64).ravel())


def write_frame(frame: PolarizationFrame, path) -> None:
    """Serialize a frame: text header + camera block + raw float32 channels."""
    h, w = frame.color.shape[:2]
    channels: list[tuple[str, np.ndarray]] = [
        ("color3", frame.color),
        ("aop1", frame.aop),
        ("dop1", frame.dop),
        ("mask1", frame.mask.astype(np.float32)),
    ]
    if frame.gtnormal is not None:
        channels.append(("gtnormal3", frame.gtnormal))
    if frame.gtdepth is not None:
        channels.append(("gtdepth1", frame.gtdepth))

    cam = frame.camera
    with open(path, "wb") as f:
        f.write(f"{MAGIC} {w} {h}\n".encode())
        f.write(f"K {_fmt_floats([cam.fx, cam.fy, cam.cx, cam.cy])}\n".encode())
        f.write(f"R {_fmt_floats(cam.rotation)}\n".encode())
        f.write(f"t {_fmt_floats(cam.translation)}\n".encode())
        for name, data in channels:
            planes = _KNOWN_CHANNELS[name]
            arr = np.asarray(data, dtype="<f4")
            if arr.shape[:2] != (h, w) or arr.size != h * w * planes:
                raise FrameFormatError(f"channel {name}: shape {arr.shape} does not match {h}x{w}")
            f.write(f"channel {name}\n".encode())
            f.write(arr.tobytes())


def _read_line(f: io.BufferedReader) -> str:
    raw = f.readline()
    if not raw:
        raise FrameFormatError("unexpected end of file")
    return raw.decode("ascii", errors="replace").rstrip("\n")


def read_frame(path) -> PolarizationFrame:
    """Read a frame written by :func:`write_frame`; round trip is bit exact."""
    with open(path, "rb") as f:
        header = _read_line(f).split()
        if len(header) != 4 or " ".join(header[:2]) != MAGIC:
            raise FrameFormatError(f"bad header in {path}")
        w, h = int(header[2]), int(header[3])

        k_line = _read_line(f).split()
        r_line = _read_line(f).split()
        t_line = _read_line(f).split()
        if k_line[0] != "K" or r_line[0] != "R" or t_line[0] != "t":
            raise FrameFormatError("malformed camera block")
        fx, fy, cx, cy = (float(v) for v in k_line[1:5])
        camera = CameraModel(fx, fy, cx, cy,
                             np.array([float(v) for v in r_line[1:10]]).reshape(3, 3),
                             np.array([float(v) for v in t_line[1:4]]))

        chans: dict[str, np.ndarray] = {}
        while True:
            raw = f.readline()
            if not raw:
                break
            parts = raw.decode("ascii", errors="replace").split()
            if len(parts) != 2 or parts[0] != "channel":
                raise FrameFormatError(f"expected channel record, got {raw[:40]!r}")
            name = parts[1]
            if name not in _KNOWN_CHANNELS:
                raise FrameFormatError(f"unknown channel {name}")
            planes = _KNOWN_CHANNELS[name]
            n = h * w * planes
            buf = f.read(n * 4)
            if len(buf) != n * 4:
                raise FrameFormatError(f"channel {name} truncated")
            arr = np.frombuffer(buf, dtype="<f4").copy()
            chans[name] = arr.reshape(h, w, planes) if planes > 1 else arr.reshape(h, w)

    for req in ("color3", "aop1", "dop1", "mask1"):
        if req not in chans:
            raise FrameFormatError(f"missing channel {req}")
    return PolarizationFrame(
        color=chans["color3"],
        aop=chans["aop1"],
        dop=chans["dop1"],
        mask=chans["mask1"] > 0.5,
        camera=camera,
        gtnormal=chans.get("gtnormal3"),
        gtdepth=chans.get("gtdepth1"),
    )
