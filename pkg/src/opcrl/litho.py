"""Forward lithography: rasterize, aerial image, constant-threshold resist, EPE and PV band."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import fft as sp_fft
from scipy.ndimage import map_coordinates

from .errors import ConfigError, GeometryError
from .layout import MaskState, Polygon, mask_polygons, occupancy


@dataclass(frozen=True)
class LithoConfig:
    pixel_nm: int = 2
    kernel: str = "gaussian"  # "gaussian" | "socs"
    sigma_nm: float = 25.0
    kernel_file: str | None = None
    resist_threshold: float = 0.5
    dose_corners: tuple[float, float, float] = (0.98, 1.0, 1.02)
    epe_search_range_nm: float = 40.0

    def __post_init__(self):
        if self.pixel_nm <= 0:
            raise ConfigError("pixel_nm must be positive")
        if self.kernel not in ("gaussian", "socs"):
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.kernel == "socs" and not self.kernel_file:
            raise ConfigError("socs kernel needs kernel_file")
        if self.kernel == "gaussian" and self.sigma_nm <= 0:
            raise ConfigError("sigma_nm must be positive")
        lo, nom, hi = self.dose_corners
        if not (lo < 1.0 < hi) or nom != 1.0:
            raise ConfigError("dose corners must satisfy min < 1 = nominal < max")
        if not 0.0 < self.resist_threshold < 1.0:
            raise ConfigError("resist_threshold must lie in (0, 1)")
        if self.epe_search_range_nm <= 0:
            raise ConfigError("epe_search_range_nm must be positive")

    def grid_shape(self, width: int, height: int) -> tuple[int, int]:
        if width % self.pixel_nm or height % self.pixel_nm:
            raise ConfigError(f"pixel_nm={self.pixel_nm} does not divide clip {width}x{height}")
        return height // self.pixel_nm, width // self.pixel_nm


@dataclass(frozen=True)
class AerialImage:
    grid: np.ndarray
    pixel_nm: int


@dataclass
class LithoResult:
    printed: dict[str, np.ndarray]  # "inner", "nominal", "outer"
    intensity: np.ndarray  # nominal-dose aerial image
    epe: np.ndarray  # signed nm per measure point, positive = contour outside target
    not_found: np.ndarray
    pvb: float

    @property
    def epe_total(self) -> float:
        return float(np.sum(np.abs(self.epe)))

    @property
    def n_points(self) -> int:
        return len(self.epe)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def gaussian_kernel(sigma_px: float) -> np.ndarray:
    r = int(np.ceil(4.0 * sigma_px))
    ax = np.arange(-r, r + 1, dtype=float)
    g = np.exp(-0.5 * (ax / sigma_px) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def load_socs(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a SOCS kernel file; returns (weights[K], kernels[K, s, s] complex)."""
    try:
        doc = json.loads(Path(path).read_text())
        count, size = int(doc["count"]), int(doc["size"])
        weights, kernels = [], []
        for entry in doc["kernels"]:
            re = np.asarray(entry["real"], dtype=float)
            im = np.asarray(entry["imag"], dtype=float)
            if re.size != size * size or im.size != size * size:
                raise ValueError(f"kernel needs {size * size} entries")
            weights.append(float(entry["weight"]))
            kernels.append((re + 1j * im).reshape(size, size))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"malformed SOCS kernel file {path}: {exc}") from None
    if len(kernels) != count or count == 0:
        raise ConfigError(f"SOCS kernel file {path}: count={count} but {len(kernels)} kernels")
    if size % 2 == 0:
        raise ConfigError(f"SOCS kernel file {path}: kernel size must be odd")
    return np.asarray(weights), np.stack(kernels)


def write_socs(path, weights, kernels) -> None:
    kernels = np.asarray(kernels, dtype=complex)
    doc = {
        "count": len(weights),
        "size": kernels.shape[1],
        "kernels": [
            {"weight": float(w), "real": k.real.ravel().tolist(), "imag": k.imag.ravel().tolist()}
            for w, k in zip(weights, kernels)
        ],
    }
    Path(path).write_text(json.dumps(doc))


@lru_cache(maxsize=8)
def _kernels(config: LithoConfig):
    if config.kernel == "gaussian":
        return np.ones(1), gaussian_kernel(config.sigma_nm / config.pixel_nm)[None]
    return load_socs(config.kernel_file)


def open_frame_level(config: LithoConfig) -> float:
    """Intensity deep inside an unbounded clear mask at nominal dose."""
    weights, kernels = _kernels(config)
    if config.kernel == "gaussian":
        return 1.0
    sums = kernels.reshape(len(kernels), -1).sum(axis=1)
    return float(np.sum(weights * np.abs(sums) ** 2))


@lru_cache(maxsize=16)
def _kernel_spectra(config: LithoConfig, shape: tuple[int, int]):
    weights, kernels = _kernels(config)
    kh, kw = kernels.shape[1:]
    full = (sp_fft.next_fast_len(shape[0] + kh - 1), sp_fft.next_fast_len(shape[1] + kw - 1))
    if config.kernel == "gaussian":
        spec = sp_fft.rfft2(kernels[0], s=full)
    else:
        spec = sp_fft.fft2(kernels, s=full, axes=(-2, -1))
    return weights, spec, full, (kh // 2, kw // 2)


def convolve_same(grid: np.ndarray, config: LithoConfig) -> np.ndarray:
    """Linear 'same' convolution of the mask with every kernel, via zero-padded FFT.

    Returns a real image for the gaussian kernel and a stack of complex fields
    for SOCS.
    """
    h, w = grid.shape
    weights, spec, full, (oy, ox) = _kernel_spectra(config, (h, w))
    if config.kernel == "gaussian":
        out = sp_fft.irfft2(sp_fft.rfft2(grid, s=full) * spec, s=full)
        return out[oy:oy + h, ox:ox + w]
    fields = sp_fft.ifft2(sp_fft.fft2(grid, s=full)[None] * spec, axes=(-2, -1))
    return fields[:, oy:oy + h, ox:ox + w]


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def rasterize(polygons, shape: tuple[int, int], pixel_nm: int) -> np.ndarray:
    """Binary mask: a pixel is 1 iff its centre lies inside some polygon."""
    h, w = shape
    xs = (np.arange(w) + 0.5) * pixel_nm
    ys = (np.arange(h) + 0.5) * pixel_nm
    return occupancy(polygons, xs, ys).astype(np.float64)


def aerial(grid: np.ndarray, config: LithoConfig, dose: float = 1.0) -> AerialImage:
    grid = np.asarray(grid, dtype=np.float64)
    if config.kernel == "gaussian":
        img = dose * convolve_same(grid, config)
    else:
        weights, _, _, _ = _kernel_spectra(config, grid.shape)
        fields = convolve_same(grid, config)
        img = dose**2 * np.einsum("k,kij->ij", weights, np.abs(fields) ** 2)
    # FFT round-off can leave tiny negatives where the true value is zero
    return AerialImage(np.maximum(img, 0.0), config.pixel_nm)


def print_image(image: np.ndarray, config: LithoConfig) -> np.ndarray:
    level = config.resist_threshold * open_frame_level(config)
    return np.asarray(image) >= level


def pv_band(inner: np.ndarray, outer: np.ndarray, pixel_nm: int) -> float:
    if inner.shape != outer.shape:
        raise GeometryError("corner grids differ in shape")
    band = np.logical_or(inner, outer) & ~np.logical_and(inner, outer)
    return float(pixel_nm**2 * np.count_nonzero(band))


def measure_epe(points, normals, intensity: np.ndarray, config: LithoConfig):
    """Signed EPE at each measure point.

    The nominal image is sampled (bilinearly) along the outward normal over the
    search range; the threshold crossing nearest to the target edge is located
    by linear interpolation. Returns (epe, not_found). Points without a crossing
    get +/-range, signed by whether the point itself prints.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    normals = np.asarray(normals, dtype=float).reshape(-1, 2)
    h, w = intensity.shape
    p = config.pixel_nm
    rng = config.epe_search_range_nm
    level = config.resist_threshold * open_frame_level(config)
    epe = np.zeros(len(points))
    missing = np.zeros(len(points), dtype=bool)
    for i, ((mx, my), (nx, ny)) in enumerate(zip(points, normals)):
        if not (0 <= mx <= w * p and 0 <= my <= h * p):
            raise GeometryError(f"measure point ({mx}, {my}) lies outside the clip")
        # knots where the moving coordinate crosses pixel centres keep the
        # bilinear profile exactly piecewise linear between samples
        m, d = (mx, nx) if nx != 0 else (my, ny)
        centres = (np.arange(np.floor((m - rng) / p - 0.5), np.ceil((m + rng) / p - 0.5) + 1) + 0.5) * p
        t = np.concatenate([(centres - m) * d, [-rng, 0.0, rng]])
        t = np.unique(t[(t >= -rng) & (t <= rng)])
        xs, ys = mx + t * nx, my + t * ny
        vals = map_coordinates(intensity, [ys / p - 0.5, xs / p - 0.5], order=1, mode="nearest")
        f = vals - level
        on = f >= 0
        flips = np.nonzero(on[:-1] != on[1:])[0]
        if len(flips) == 0:
            missing[i] = True
            at0 = f[np.searchsorted(t, 0.0)]
            epe[i] = rng if at0 >= 0 else -rng
            continue
        f0, f1 = f[flips], f[flips + 1]
        cross = t[flips] + (t[flips + 1] - t[flips]) * f0 / (f0 - f1)
        epe[i] = cross[np.argmin(np.abs(cross))]
    return epe, missing


def measure_geometry(mask: MaskState):
    """Measure points and outward normals of a mask's segments, in segment order."""
    pts, nrm = [], []
    for s in mask.segments:
        if s.measure_point is not None:
            pts.append(s.measure_point)
            nrm.append(s.normal)
    return np.asarray(pts, dtype=float).reshape(-1, 2), np.asarray(nrm, dtype=float).reshape(-1, 2)


def simulate_polygons(polygons: list[Polygon], width: int, height: int, points, normals,
                      config: LithoConfig) -> LithoResult:
    shape = config.grid_shape(width, height)
    grid = rasterize(polygons, shape, config.pixel_nm)
    base = aerial(grid, config, 1.0).grid
    lo, _, hi = config.dose_corners
    scale = (lambda d: d) if config.kernel == "gaussian" else (lambda d: d * d)
    printed = {
        "inner": print_image(scale(lo) * base, config),
        "nominal": print_image(base, config),
        "outer": print_image(scale(hi) * base, config),
    }
    epe, missing = measure_epe(points, normals, base, config)
    pvb = pv_band(printed["inner"], printed["outer"], config.pixel_nm)
    return LithoResult(printed, base, epe, missing, pvb)


def simulate(mask: MaskState, config: LithoConfig) -> LithoResult:
    """Rasterize, image at three doses, print, then measure EPE and PV band. Pure."""
    pts, nrm = measure_geometry(mask)
    layout = mask.layout
    return simulate_polygons(mask_polygons(mask), layout.width, layout.height, pts, nrm, config)
