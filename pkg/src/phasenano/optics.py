"""Coherent 4f microscope simulation for phase objects.

Renders a :class:`~phasenano.targets.PhaseMap` through a scalar, monochromatic,
coherent two-lens model: the object field is Fourier transformed, manipulated
at the pupil plane, transformed back and squared. Three contrast modes are
provided:

* brightfield: plain circular pupil. A pure phase object is nearly invisible
  here, so a small fixed amplitude absorption on the features keeps this op
  useful as a control case.
* pcm: Zernike phase contrast. The illumination is tilted so the undiffracted
  beam lands inside an annular phase ring, which phase-shifts and attenuates
  it before recombination.
* dic: two copies of the field, sheared by +/- s/2 and offset by the bias
  phase, interfere between crossed polarizers; the intensity is then blurred
  by the system PSF.

All spatial frequencies are in cycles/nm, all lengths in nm unless a name
says otherwise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.special import j0, j1

from .targets import PhaseMap, SamplingError

__all__ = [
    "OpticalConfig",
    "PsfKernel",
    "ImageField",
    "DicParams",
    "SpectrumPeak",
    "PsfTruncationWarning",
    "PitchMismatchError",
    "rayleigh_limit",
    "make_psf",
    "convolve_psf",
    "render_brightfield",
    "render_pcm",
    "dic_bias",
    "render_dic",
    "render",
    "camera_sample",
    "add_noise",
    "fourier_spectrum",
    "export_spectrum",
]

MODALITIES = ("brightfield", "pcm", "dic")
PSF_MODELS = ("airy", "gaussian")

# First zero of the Airy pattern at 0.61 lambda/NA; Gaussian of matching
# core FWHM has sigma = 0.21 lambda/NA.
AIRY_FIRST_ZERO = 0.61
GAUSSIAN_SIGMA_FACTOR = 0.21


class PsfTruncationWarning(UserWarning):
    """Kernel support captures less than 99% of the analytic PSF energy."""


class PitchMismatchError(ValueError):
    """Operands sampled at different pixel pitches."""


@dataclass(frozen=True)
class OpticalConfig:
    """Microscope parameters driving PSF, rendering and the Rayleigh limit."""

    wavelength: float = 580.0       # nm
    na_obj: float = 1.4
    na_cond: float = 0.9
    modality: str = "pcm"
    obj_mag: float = 100.0
    intermediate_mag: float = 2.4
    camera_pixel_um: float = 1.85
    psf_model: str = "airy"

    def __post_init__(self) -> None:
        if self.wavelength <= 0:
            raise ValueError("wavelength must be > 0")
        if not 0.0 < self.na_obj <= 1.7:
            raise ValueError(f"na_obj must lie in (0, 1.7], got {self.na_obj}")
        if self.na_cond < 0:
            raise ValueError("na_cond must be >= 0")
        if self.obj_mag <= 0 or self.intermediate_mag <= 0:
            raise ValueError("magnifications must be > 0")
        if self.camera_pixel_um <= 0:
            raise ValueError("camera_pixel_um must be > 0")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")
        if self.psf_model not in PSF_MODELS:
            raise ValueError(f"psf_model must be one of {PSF_MODELS}")

    @property
    def object_pitch(self) -> float:
        """Camera pixel size referred to the object plane, nm/px."""
        return self.camera_pixel_um * 1000.0 / (self.obj_mag * self.intermediate_mag)

    @property
    def pupil_radius(self) -> float:
        """Objective pupil radius in cycles/nm."""
        return self.na_obj / self.wavelength

    # Presets standing in for the acquisition hardware: a 20X/0.40 objective
    # for low resolution, 40X/0.60 for high resolution, and the 100X/1.4 oil
    # objective used for validation imaging.
    @classmethod
    def preset_20x(cls, modality: str = "pcm") -> "OpticalConfig":
        return cls(na_obj=0.40, na_cond=0.40, obj_mag=20.0, intermediate_mag=1.0,
                   modality=modality)

    @classmethod
    def preset_40x(cls, modality: str = "pcm") -> "OpticalConfig":
        return cls(na_obj=0.60, na_cond=0.60, obj_mag=40.0, intermediate_mag=1.0,
                   modality=modality)

    @classmethod
    def preset_100x(cls, intermediate_mag: float = 2.4, modality: str = "pcm") -> "OpticalConfig":
        return cls(na_obj=1.4, na_cond=0.9, obj_mag=100.0,
                   intermediate_mag=intermediate_mag, modality=modality)


@dataclass(frozen=True)
class PsfKernel:
    """Discrete non-negative PSF, normalized to unit sum."""

    kernel: np.ndarray
    pitch: float
    captured_energy: float = 1.0

    def __post_init__(self) -> None:
        if self.pitch <= 0:
            raise ValueError("pitch must be > 0")
        if np.any(self.kernel < 0):
            raise ValueError("PSF kernel must be non-negative")
        total = float(self.kernel.sum())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"PSF kernel must sum to 1 +- 1e-9, sums to {total}")


@dataclass
class ImageField:
    """A camera-plane intensity image with object-referred pixel pitch."""

    intensity: np.ndarray
    pitch: float
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.pitch <= 0:
            raise ValueError("pitch must be > 0")
        arr = np.asarray(self.intensity)
        if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
            raise ValueError("intensity must be HxW or HxWx3")
        if not np.all(np.isfinite(arr)):
            raise ValueError("intensities must be finite")
        if arr.min() < 0:
            raise ValueError("intensities must be >= 0")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.intensity.shape


@dataclass(frozen=True)
class DicParams:
    """Nomarski prism settings: shear vector (nm) and bias retardance (degrees).

    The bias path difference and the shear angle are always derived, never
    stored: ``bias = retardance/360 * wavelength`` and the shear angle is the
    spatial derivative of the bias, nonzero only when the retardance varies
    across the field (e.g. a translating prism).
    """

    shear: tuple[float, float] = (141.4213562373095, 141.4213562373095)
    retardance_deg: float = 90.0
    retardance_gradient_deg_per_nm: float = 0.0

    def __post_init__(self) -> None:
        if math.hypot(*self.shear) <= 0:
            raise ValueError("shear magnitude must be > 0")

    @property
    def shear_magnitude(self) -> float:
        return math.hypot(*self.shear)

    def bias_nm(self, wavelength: float) -> float:
        return dic_bias(self.retardance_deg, wavelength)

    def shear_angle_rad(self, wavelength: float) -> float:
        return self.retardance_gradient_deg_per_nm / 360.0 * wavelength


@dataclass(frozen=True)
class SpectrumPeak:
    """One extracted Fourier-plane component of I(r) = A sin(k.r + phi0)."""

    amplitude: float
    k: tuple[float, float]   # (kx, ky) cycles/nm
    phase: float             # phi0, radians


# --- resolution limit ---------------------------------------------------------


def rayleigh_limit(cfg: OpticalConfig, mode: str = "brightfield") -> float:
    """Minimum resolvable separation in nm.

    0.61 lambda / NA_obj for fluorescence, 1.22 lambda / (NA_cond + NA_obj)
    for brightfield (transmitted light).
    """
    if cfg.na_obj <= 0:
        raise ValueError("na_obj must be > 0")
    if mode == "fluorescence":
        return 0.61 * cfg.wavelength / cfg.na_obj
    if mode == "brightfield":
        if cfg.na_cond + cfg.na_obj <= 0:
            raise ValueError("na_cond + na_obj must be > 0 for brightfield")
        return 1.22 * cfg.wavelength / (cfg.na_cond + cfg.na_obj)
    raise ValueError(f"mode must be 'fluorescence' or 'brightfield', got {mode!r}")


# --- PSF generation and convolution -------------------------------------------


def make_psf(cfg: OpticalConfig, pitch: float, support_px: int) -> PsfKernel:
    """Sample the system PSF on a square support of odd size.

    airy: squared jinc with first zero at 0.61 lambda/NA.
    gaussian: sigma = 0.21 lambda/NA, FWHM-matched to the Airy core.

    Emits :class:`PsfTruncationWarning` when the support holds less than 99%
    of the analytic energy; the kernel is renormalized to unit sum regardless.
    """
    if support_px < 1 or support_px % 2 == 0:
        raise ValueError(f"support_px must be odd and positive, got {support_px}")
    first_zero = AIRY_FIRST_ZERO * cfg.wavelength / cfg.na_obj
    if first_zero < 3.0 * pitch:
        raise SamplingError(
            f"pitch {pitch} nm/px too coarse: first PSF zero at {first_zero:.1f} nm "
            f"must span at least 3 px"
        )
    half = support_px // 2
    coords = (np.arange(support_px) - half) * pitch
    r = np.hypot(coords[:, None], coords[None, :])
    radius = half * pitch

    if cfg.psf_model == "airy":
        v = 2.0 * math.pi * cfg.na_obj * r / cfg.wavelength
        with np.errstate(invalid="ignore", divide="ignore"):
            amp = np.where(v == 0.0, 1.0, 2.0 * j1(v) / np.where(v == 0.0, 1.0, v))
        kernel = amp**2
        v_edge = 2.0 * math.pi * cfg.na_obj * radius / cfg.wavelength
        captured = float(1.0 - j0(v_edge) ** 2 - j1(v_edge) ** 2) if v_edge > 0 else 0.0
    else:
        sigma = GAUSSIAN_SIGMA_FACTOR * cfg.wavelength / cfg.na_obj
        kernel = np.exp(-(r**2) / (2.0 * sigma**2))
        captured = float(1.0 - math.exp(-(radius**2) / (2.0 * sigma**2)))

    if captured < 0.99:
        warnings.warn(
            f"PSF support of {support_px} px at {pitch} nm/px captures only "
            f"{captured:.3f} of the analytic energy",
            PsfTruncationWarning,
            stacklevel=2,
        )
    kernel = kernel / kernel.sum()
    return PsfKernel(kernel=kernel, pitch=float(pitch), captured_energy=captured)


def _embed_kernel(kernel: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Place a small centred kernel on a field-sized grid with its centre at (0,0)."""
    kh, kw = kernel.shape
    out = np.zeros(shape)
    out[:kh, :kw] = kernel
    return np.roll(out, (-(kh // 2), -(kw // 2)), axis=(0, 1))


def convolve_psf(field: ImageField, psf: PsfKernel) -> ImageField:
    """Circular convolution via frequency-domain multiplication.

    The unit-sum kernel preserves total intensity to 1e-6 relative.
    """
    if not math.isclose(field.pitch, psf.pitch, rel_tol=1e-9):
        raise PitchMismatchError(
            f"field pitch {field.pitch} nm/px != psf pitch {psf.pitch} nm/px"
        )
    img = np.asarray(field.intensity, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("convolve_psf expects a single-channel field")
    if psf.kernel.shape[0] > img.shape[0] or psf.kernel.shape[1] > img.shape[1]:
        raise ValueError("PSF kernel larger than the field")
    kpad = _embed_kernel(psf.kernel, img.shape)
    out = np.fft.ifft2(np.fft.fft2(img) * np.fft.fft2(kpad)).real
    out = np.maximum(out, 0.0)
    return ImageField(intensity=out, pitch=field.pitch, meta=dict(field.meta))


# --- coherent rendering --------------------------------------------------------


def _freq_grids(shape: tuple[int, int], pitch: float) -> tuple[np.ndarray, np.ndarray]:
    fy = np.fft.fftfreq(shape[0], d=pitch)
    fx = np.fft.fftfreq(shape[1], d=pitch)
    return fy[:, None], fx[None, :]


def _check_pupil_sampling(pitch: float, cfg: OpticalConfig) -> None:
    nyquist = 0.5 / pitch
    if cfg.pupil_radius > nyquist:
        raise SamplingError(
            f"simulation pitch {pitch} nm/px cannot carry the NA {cfg.na_obj} pupil "
            f"(needs pitch < {0.5 * cfg.wavelength / cfg.na_obj:.1f} nm/px)"
        )


def _background_opd(pm: PhaseMap) -> float:
    if pm.provenance is not None:
        return float(pm.provenance.background_opd)
    return float(np.median(pm.opd))


def _object_field(pm: PhaseMap, cfg: OpticalConfig, absorption: float = 0.0) -> np.ndarray:
    phase = 2.0 * math.pi * pm.opd / cfg.wavelength
    amp = np.ones_like(pm.opd)
    if absorption:
        amp = np.where(pm.opd != _background_opd(pm), 1.0 - absorption, 1.0)
    return amp * np.exp(1j * phase)


def _pupil_filter(spectrum: np.ndarray, pitch: float, cfg: OpticalConfig) -> np.ndarray:
    fy, fx = _freq_grids(spectrum.shape, pitch)
    k2 = fy**2 + fx**2
    return np.where(k2 <= cfg.pupil_radius**2, spectrum, 0.0)


def _intensity(field: np.ndarray) -> np.ndarray:
    return np.maximum((field * field.conj()).real, 0.0)


def render_brightfield(pm: PhaseMap, cfg: OpticalConfig, absorption: float = 0.02) -> ImageField:
    """Pupil-filtered coherent brightfield image.

    ``absorption`` is a fixed amplitude loss on the feature pixels; without
    it a pure phase object is invisible to first order, which is exactly the
    limitation phase contrast and DIC exist to overcome.
    """
    _check_pupil_sampling(pm.pitch, cfg)
    field = _object_field(pm, cfg, absorption=absorption)
    spectrum = _pupil_filter(np.fft.fft2(field), pm.pitch, cfg)
    out = _intensity(np.fft.ifft2(spectrum))
    return ImageField(out, pm.pitch, meta={"modality": "brightfield"})


def _pick_tilt_bin(
    tilt: float,
    extents: tuple[float, float],
    annulus: tuple[float, float],
) -> tuple[float, float]:
    """Snap the illumination tilt onto exact FFT bins inside the phase ring.

    The undiffracted beam must be a single spectral bin, and that bin must lie
    inside the annulus, so on coarse frequency grids the naive rounding of the
    45-degree target is replaced by the nearest in-ring bin.
    """
    ty = tx = tilt / math.sqrt(2.0)
    ey, ex = extents
    by, bx = ty * ey, tx * ex
    lo, hi = annulus
    best = None
    best_dist = math.inf
    for iy in range(max(0, math.floor(by) - 3), math.ceil(by) + 4):
        for ix in range(max(0, math.floor(bx) - 3), math.ceil(bx) + 4):
            ky, kx = iy / ey, ix / ex
            if not lo <= math.hypot(ky, kx) <= hi:
                continue
            dist = math.hypot(ky - ty, kx - tx)
            if dist < best_dist:
                best, best_dist = (ky, kx), dist
    if best is None:
        warnings.warn(
            "frequency grid too coarse to place the undiffracted beam inside the "
            "phase ring; phase contrast will be weak (enlarge the canvas)",
            stacklevel=3,
        )
        return round(by) / ey, round(bx) / ex
    return best


def render_pcm(
    pm: PhaseMap,
    cfg: OpticalConfig,
    ring: tuple[float, float] = (0.55, 0.75),
    phase_shift_deg: float = 90.0,
    attenuation: float = 0.25,
) -> ImageField:
    """Zernike phase contrast render.

    The annular illumination is represented by a balanced pair of opposite
    plane-wave tilts whose intensities add; each tilt puts the undiffracted
    beam at the ring's mean radius (clamped to the condenser NA and snapped to
    an FFT bin). The balanced pair keeps the halo symmetric so features do
    not drift sideways as they would under one oblique beam. Spectrum inside
    the annulus ``ring`` (fractions of the pupil radius) is phase shifted by
    ``phase_shift_deg`` and attenuated to the intensity fraction
    ``attenuation``; everything recombines through the pupil and is squared.
    +90 degrees gives positive phase contrast: optically thinner bars
    (negative path difference) come out dark on a bright background.
    """
    r_inner, r_outer = ring
    if not 0.0 <= r_inner < r_outer <= 1.0:
        raise ValueError(f"ring radii must satisfy 0 <= r_inner < r_outer <= 1, got {ring}")
    _check_pupil_sampling(pm.pitch, cfg)

    tilt = min(0.5 * (r_inner + r_outer) * cfg.na_obj, cfg.na_cond) / cfg.wavelength
    h, w = pm.opd.shape
    ky, kx = _pick_tilt_bin(tilt, (h * pm.pitch, w * pm.pitch),
                            (r_inner * cfg.pupil_radius, r_outer * cfg.pupil_radius))
    yy = np.arange(h)[:, None] * pm.pitch
    xx = np.arange(w)[None, :] * pm.pitch

    fy, fx = _freq_grids(pm.opd.shape, pm.pitch)
    kr = np.hypot(fy, fx)
    annulus = (kr >= r_inner * cfg.pupil_radius) & (kr <= r_outer * cfg.pupil_radius)
    ring_factor = math.sqrt(attenuation) * np.exp(1j * math.radians(phase_shift_deg))
    obj = _object_field(pm, cfg)

    out = np.zeros(pm.opd.shape)
    for sign in (1.0, -1.0):
        carrier = np.exp(2j * math.pi * sign * (ky * yy + kx * xx))
        spectrum = np.fft.fft2(obj * carrier)
        spectrum = np.where(annulus, spectrum * ring_factor, spectrum)
        spectrum = _pupil_filter(spectrum, pm.pitch, cfg)
        out += _intensity(np.fft.ifft2(spectrum))
    return ImageField(out / 2.0, pm.pitch, meta={"modality": "pcm"})


def dic_bias(retardance_deg: float, wavelength: float) -> float:
    """Bias path difference in nm: retardance/360 of a wave."""
    if wavelength <= 0:
        raise ValueError("wavelength must be > 0")
    return retardance_deg / 360.0 * wavelength


def _subpixel_shift(field: np.ndarray, dy_px: float, dx_px: float) -> np.ndarray:
    fy, fx = np.fft.fftfreq(field.shape[0])[:, None], np.fft.fftfreq(field.shape[1])[None, :]
    phase = np.exp(-2j * math.pi * (fy * dy_px + fx * dx_px))
    return np.fft.ifft2(np.fft.fft2(field) * phase)


def _otf(shape: tuple[int, int], pitch: float, cfg: OpticalConfig) -> np.ndarray:
    """Analytic optical transfer function of the incoherent PSF on an FFT grid."""
    fy, fx = _freq_grids(shape, pitch)
    nu = np.hypot(fy, fx)
    if cfg.psf_model == "airy":
        cutoff = 2.0 * cfg.na_obj / cfg.wavelength
        rho = np.minimum(nu / cutoff, 1.0)
        otf = (2.0 / math.pi) * (np.arccos(rho) - rho * np.sqrt(1.0 - rho**2))
        otf[nu >= cutoff] = 0.0
    else:
        sigma = GAUSSIAN_SIGMA_FACTOR * cfg.wavelength / cfg.na_obj
        otf = np.exp(-2.0 * (math.pi * sigma * nu) ** 2)
    return otf


def render_dic(pm: PhaseMap, cfg: OpticalConfig, dic: DicParams | None = None) -> ImageField:
    """Differential interference contrast render.

    Two copies of the object field, displaced by +/- shear/2 and offset by
    the bias phase, interfere between crossed polarizers; the resulting
    intensity is blurred by the system PSF. Produces the classic pseudo-relief
    with opposite-sign responses on opposite bar edges; gradients orthogonal
    to the shear are invisible.
    """
    if dic is None:
        dic = DicParams()
    _check_pupil_sampling(pm.pitch, cfg)
    sx, sy = dic.shear
    if dic.shear_magnitude < pm.pitch / 2.0:
        warnings.warn(
            f"shear {dic.shear_magnitude:.2f} nm below half the {pm.pitch} nm pitch; "
            f"falling back to nearest-pixel displacement",
            stacklevel=2,
        )
        dy, dx = round(sy / 2.0 / pm.pitch), round(sx / 2.0 / pm.pitch)
        field = _object_field(pm, cfg)
        f_plus = np.roll(field, (dy, dx), axis=(0, 1))
        f_minus = np.roll(field, (-dy, -dx), axis=(0, 1))
    else:
        field = _object_field(pm, cfg)
        dy, dx = sy / 2.0 / pm.pitch, sx / 2.0 / pm.pitch
        f_plus = _subpixel_shift(field, dy, dx)
        f_minus = _subpixel_shift(field, -dy, -dx)

    beta = 2.0 * math.pi * dic.bias_nm(cfg.wavelength) / cfg.wavelength
    interfered = 0.5 * (f_plus - np.exp(1j * beta) * f_minus)
    intensity = _intensity(interfered)
    blurred = np.fft.ifft2(np.fft.fft2(intensity) * _otf(intensity.shape, pm.pitch, cfg)).real
    blurred = np.maximum(blurred, 0.0)
    return ImageField(blurred, pm.pitch, meta={"modality": "dic"})


def render(pm: PhaseMap, cfg: OpticalConfig, dic: DicParams | None = None) -> ImageField:
    """Render with the modality chosen by the config."""
    if cfg.modality == "brightfield":
        return render_brightfield(pm, cfg)
    if cfg.modality == "pcm":
        return render_pcm(pm, cfg)
    return render_dic(pm, cfg, dic=dic)


# --- camera sampling and noise -------------------------------------------------


def _bin_axis(arr: np.ndarray, p_in: float, p_out: float, axis: int) -> np.ndarray:
    """Integrate a piecewise-constant signal into output pixels of width p_out."""
    arr = np.moveaxis(arr, axis, -1)
    n_in = arr.shape[-1]
    n_out = int(math.floor(n_in * p_in / p_out + 1e-9))
    cum = np.concatenate(
        [np.zeros(arr.shape[:-1] + (1,)), np.cumsum(arr, axis=-1) * p_in], axis=-1
    )
    edges = np.arange(n_out + 1) * p_out / p_in
    i0 = np.minimum(np.floor(edges).astype(int), n_in)
    frac = edges - i0
    i1 = np.minimum(i0 + 1, n_in)
    sampled = cum[..., i0] * (1.0 - frac) + cum[..., i1] * frac
    out = np.diff(sampled, axis=-1) / p_out
    return np.moveaxis(out, -1, axis)


def camera_sample(img: ImageField, cfg: OpticalConfig) -> ImageField:
    """Integrate the simulated field onto the camera's object-referred grid.

    Partial edge pixels are dropped. Upsampling is refused: the camera cannot
    add information.
    """
    p_out = cfg.object_pitch
    if p_out < img.pitch * (1.0 - 1e-9):
        raise ValueError(
            f"camera pitch {p_out:.3f} nm/px finer than simulation pitch "
            f"{img.pitch} nm/px; upsampling is not sampling"
        )
    if math.isclose(p_out, img.pitch, rel_tol=1e-9):
        return ImageField(img.intensity.copy(), img.pitch, meta=dict(img.meta))
    out = _bin_axis(np.asarray(img.intensity, dtype=np.float64), img.pitch, p_out, axis=0)
    out = _bin_axis(out, img.pitch, p_out, axis=1)
    out = np.maximum(out, 0.0)
    meta = dict(img.meta)
    meta["camera"] = {"obj_mag": cfg.obj_mag, "intermediate_mag": cfg.intermediate_mag,
                      "camera_pixel_um": cfg.camera_pixel_um}
    return ImageField(out, p_out, meta=meta)


def _background_noise_std(intensity: np.ndarray, off_mask: np.ndarray) -> float:
    """Robust per-pixel noise estimate from first differences of background pixels.

    Differencing adjacent off-mask pixels cancels smooth structure (diffraction
    halos, shade-off) and leaves sqrt(2) times the pixel noise, which the
    MAD-scaled median turns into a robust sigma.
    """
    diffs = []
    d = np.diff(intensity, axis=1)
    valid = off_mask[:, 1:] & off_mask[:, :-1]
    diffs.append(d[valid])
    d = np.diff(intensity, axis=0)
    valid = off_mask[1:, :] & off_mask[:-1, :]
    diffs.append(d[valid])
    stacked = np.concatenate(diffs)
    if stacked.size == 0:
        raise ValueError("background too fragmented to estimate noise")
    return 1.4826 * float(np.median(np.abs(stacked))) / math.sqrt(2.0)


def _snr_db(intensity: np.ndarray, mask: np.ndarray) -> float:
    """Mask-on vs mask-off SNR in dB.

    Signal is the mean absolute excursion of on-mask pixels from the off-mask
    median; noise is the first-difference background estimate, so smooth
    rendering artifacts do not count as noise.
    """
    on = intensity[mask]
    off = intensity[~mask]
    if on.size == 0 or off.size == 0:
        raise ValueError("signal mask must have both on and off pixels")
    bg = float(np.median(off))
    sigma = _background_noise_std(intensity, ~mask)
    signal = float(np.mean(np.abs(on - bg)))
    if sigma == 0.0:
        return math.inf
    return 20.0 * math.log10(signal / sigma) if signal > 0 else -math.inf


def _default_signal_mask(intensity: np.ndarray) -> np.ndarray:
    """Midrange split; the minority side is taken as signal."""
    lo, hi = float(intensity.min()), float(intensity.max())
    if hi == lo:
        raise ValueError("cannot infer a signal mask from a constant image")
    above = intensity > 0.5 * (lo + hi)
    return above if above.sum() <= above.size // 2 else ~above


def add_noise(
    img: ImageField,
    target_snr_db: float,
    seed: int,
    signal_mask: np.ndarray | None = None,
    allow_clean_floor: bool = False,
) -> ImageField:
    """Add zero-mean Gaussian noise so the measured SNR hits the target.

    The noise scale is calibrated by bisection against the same robust
    estimator used for reporting, on the actually sampled (and zero-clamped)
    noisy image, so the closed loop lands within +-0.5 dB. Deterministic per
    seed. With ``signal_mask`` omitted a midrange split of the clean image is
    used, which is adequate for two-level targets only.

    A clean render carries its own residual background structure, so very
    high targets can be unreachable. By default that raises; with
    ``allow_clean_floor`` the clean image is returned instead, its metadata
    recording the measured ceiling.
    """
    if math.isinf(target_snr_db) and target_snr_db > 0:
        meta = dict(img.meta)
        meta["snr_db"] = math.inf
        return ImageField(img.intensity.copy(), img.pitch, meta=meta)
    if not math.isfinite(target_snr_db):
        raise ValueError(f"target SNR must be finite or +inf, got {target_snr_db}")

    clean = np.asarray(img.intensity, dtype=np.float64)
    if signal_mask is None:
        mask = _default_signal_mask(clean)
    else:
        mask = np.asarray(signal_mask, dtype=bool)
        if mask.shape != clean.shape:
            raise ValueError("signal mask shape must match the image")

    rng = np.random.default_rng(seed)
    unit_noise = rng.standard_normal(clean.shape)

    bg = float(np.median(clean[~mask]))
    excursion = float(np.mean(np.abs(clean[mask] - bg)))
    if excursion == 0.0:
        raise ValueError("image has no signal excursion to set an SNR against")
    ratio = 10.0 ** (target_snr_db / 20.0)

    def measured(sigma: float) -> float:
        return _snr_db(np.maximum(clean + sigma * unit_noise, 0.0), mask)

    lo = excursion / ratio / 64.0
    hi = excursion / ratio * 64.0
    if measured(lo) < target_snr_db:
        if allow_clean_floor:
            ceiling = _snr_db(clean, mask)
            warnings.warn(
                f"target {target_snr_db:g} dB exceeds the clean render's "
                f"{ceiling:.1f} dB ceiling; returning the clean image",
                stacklevel=2,
            )
            meta = dict(img.meta)
            meta.update({"snr_db": float(target_snr_db),
                         "snr_db_measured": ceiling, "noise_sigma": 0.0,
                         "noise_seed": int(seed)})
            return ImageField(clean.copy(), img.pitch, meta=meta)
        raise ValueError(
            "clean image is already noisier than the requested SNR; cannot calibrate"
        )
    for _ in range(60):
        mid = math.sqrt(lo * hi)
        if measured(mid) > target_snr_db:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1.0 + 1e-6:
            break
    sigma = math.sqrt(lo * hi)
    out = np.maximum(clean + sigma * unit_noise, 0.0)
    meta = dict(img.meta)
    meta.update({"snr_db": float(target_snr_db), "noise_seed": int(seed),
                 "noise_sigma": sigma})
    return ImageField(out, img.pitch, meta=meta)


# --- Fourier-plane inspection ----------------------------------------------------


def fourier_spectrum(
    img: ImageField,
    prominence: float = 0.05,
    max_peaks: int = 32,
) -> tuple[np.ndarray, list[SpectrumPeak]]:
    """Centred log-magnitude spectrum plus extracted sinusoidal components.

    Local maxima of the magnitude spectrum above ``prominence`` times the
    global maximum are reported as peaks of I(r) = A sin(k.r + phi0), with r
    in pixel-index coordinates times pitch. Finer structure lands at larger
    |k|, toward the periphery of the returned array.
    """
    arr = np.asarray(img.intensity, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    spectrum = np.fft.fft2(arr)
    mag = np.abs(spectrum)
    n_tot = arr.size

    centered = np.fft.fftshift(mag)
    log_mag = np.log1p(centered)

    local_max = mag == maximum_filter(mag, size=3, mode="wrap")
    threshold = prominence * mag.max()
    peak_idx = np.argwhere(local_max & (mag >= threshold))
    fy = np.fft.fftfreq(arr.shape[0], d=img.pitch)
    fx = np.fft.fftfreq(arr.shape[1], d=img.pitch)

    peaks: list[SpectrumPeak] = []
    for i, j in peak_idx:
        value = spectrum[i, j]
        if i == 0 and j == 0:
            amplitude = float(np.abs(value)) / n_tot
            phase = 0.0
        else:
            amplitude = 2.0 * float(np.abs(value)) / n_tot
            phase = float(np.angle(value)) + math.pi / 2.0
            phase = (phase + math.pi) % (2.0 * math.pi) - math.pi
        peaks.append(SpectrumPeak(amplitude=amplitude, k=(float(fx[j]), float(fy[i])),
                                  phase=phase))
    peaks.sort(key=lambda p: -p.amplitude)
    return log_mag, peaks[:max_peaks]


def export_spectrum(img: ImageField, path_base, prominence: float = 0.05):
    """Write the centred log-magnitude spectrum as PNG plus a CSV peak list.

    Creates ``<path_base>.png`` (with pitch sidecar) and ``<path_base>.csv``
    with one ``amplitude,kx,ky,phase`` row per extracted peak. Returns the
    two paths.
    """
    from pathlib import Path

    from .pngio import write_png8

    log_mag, peaks = fourier_spectrum(img, prominence=prominence)
    base = Path(path_base)
    png_path = write_png8(log_mag, img.pitch, base.with_suffix(".png"),
                          meta={"kind": "log_magnitude_spectrum"})
    lines = ["amplitude,kx_cycles_per_nm,ky_cycles_per_nm,phase_rad"]
    lines += [f"{p.amplitude:.8g},{p.k[0]:.8g},{p.k[1]:.8g},{p.phase:.6f}" for p in peaks]
    csv_path = base.with_suffix(".csv")
    csv_path.write_text("\n".join(lines) + "\n")
    return png_path, csv_path
