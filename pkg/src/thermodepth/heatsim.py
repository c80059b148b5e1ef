"""Synthetic long-pulse thermography data.

Each pixel is modelled as a 1-D slab heated on its front face.  Defect pixels
see a flat-bottom hole at depth ``d``: a slab of thickness ``d`` whose back
face is insulated.  Sound pixels see the full specimen thickness with a
convective back face.  The front face receives the absorbed lamp flux during
the pulse and loses heat by convection at all times.

The heat equation is integrated with an explicit FTCS scheme on a
finite-volume grid (half cells at both faces), so with ``h = 0`` the scheme
conserves the injected energy to rounding error.  A virtual camera adds NETD
noise and maps temperature linearly to 8-bit grey levels.

Grey-level quantisation uses round-half-away-from-zero everywhere
(:func:`round_half_away`).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from numba import njit

from .errors import CalibrationError, ConfigError, InvalidDepth, StabilityViolation

DEFAULT_DEPTHS = tuple(round(0.24e-3 + 0.16e-3 * i, 10) for i in range(9))


@dataclass(frozen=True)
class MaterialProps:
    """PLA mid-range properties (SI units)."""

    conductivity: float = 0.19
    specific_heat: float = 1900.0
    density: float = 1225.0
    emissivity: float = 0.92

    def __post_init__(self):
        for name in ("conductivity", "specific_heat", "density", "emissivity"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"material.{name} must be a positive number, got {v!r}")
        if self.emissivity > 1:
            raise ConfigError(f"material.emissivity must be <= 1, got {self.emissivity!r}")


@dataclass(frozen=True)
class SpecimenSpec:
    thickness: float = 5e-3
    lateral_size: float = 90e-3
    defect_depths: tuple = DEFAULT_DEPTHS
    defect_radius: float = 8e-3
    material: MaterialProps = field(default_factory=MaterialProps)

    def __post_init__(self):
        object.__setattr__(self, "defect_depths", tuple(float(d) for d in self.defect_depths))
        if not self.thickness > 0:
            raise ConfigError(f"specimen.thickness must be positive, got {self.thickness!r}")
        if not self.defect_depths:
            raise ConfigError("specimen.defect_depths must not be empty")
        for d in self.defect_depths:
            if not 0 < d < self.thickness:
                raise ConfigError(
                    f"specimen.defect_depths entry {d!r} outside (0, {self.thickness})"
                )


@dataclass(frozen=True)
class ExcitationSpec:
    pulse_duration: float = 30.0
    absorbed_flux: float = 2000.0
    ambient_temp: float = 298.15
    convection_coeff: float = 10.0
    record_duration: float = 220.0
    frame_rate: float = 50.0

    def __post_init__(self):
        for name in ("pulse_duration", "absorbed_flux", "ambient_temp", "record_duration", "frame_rate"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"excitation.{name} must be positive, got {v!r}")
        if not (math.isfinite(self.convection_coeff) and self.convection_coeff >= 0):
            raise ConfigError(
                f"excitation.convection_coeff must be >= 0, got {self.convection_coeff!r}"
            )
        if self.pulse_duration >= self.record_duration:
            raise ConfigError("excitation.pulse_duration must be shorter than record_duration")

    @property
    def n_frames(self) -> int:
        return int(round(self.record_duration * self.frame_rate))


@dataclass(frozen=True)
class CameraSpec:
    """Virtual IR camera.  ``calib_min``/``calib_max`` of ``None`` means
    "derive from the dataset" (see :func:`auto_calibration`)."""

    netd_sigma: float = 0.035
    bit_depth: int = 8
    calib_min: float | None = None
    calib_max: float | None = None

    def __post_init__(self):
        if not self.netd_sigma >= 0:
            raise ConfigError(f"camera.netd_sigma must be >= 0, got {self.netd_sigma!r}")
        if self.bit_depth != 8:
            raise ConfigError("camera.bit_depth: only 8-bit output is supported")

    @property
    def max_level(self) -> int:
        return 2**self.bit_depth - 1


@dataclass(frozen=True)
class GridParams:
    """Discretisation.  ``dx=None`` picks ``min(defect_depths) / 40``;
    ``dt=None`` picks the largest step with Fourier number <= ``fourier``
    that divides the frame interval evenly."""

    dx: float | None = None
    dt: float | None = None
    fourier: float = 0.4
    nodes_per_min_depth: int = 40


@dataclass(frozen=True)
class TemperatureCurve:
    samples: np.ndarray  # front-surface temperature per frame, K
    frame_rate: float

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.samples)) / self.frame_rate


@dataclass(frozen=True)
class PixelCurve:
    values: np.ndarray  # grey levels in [0, 255]
    frame_rate: float
    label_depth: float | None = None  # metres; None for sound pixels

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise ValueError("PixelCurve values must be one-dimensional")
        if v.size and (v.min() < 0 or v.max() > 255):
            raise ValueError("PixelCurve values must lie in [0, 255]")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)


@dataclass
class Dataset:
    curves: list
    depth_index: list
    pixel_index: list
    seeds: list  # [master_seed, depth_idx, pixel_idx] per curve
    config: dict
    calibration: tuple

    def __len__(self):
        return len(self.curves)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label_depth for c in self.curves], dtype=float)


def thermal_diffusivity(m: MaterialProps) -> float:
    return m.conductivity / (m.density * m.specific_heat)


def round_half_away(x):
    """Round half away from zero (``np.round`` rounds half to even)."""
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class _Grid:
    n_cells: int
    dx: float
    dt: float
    steps_per_frame: int
    fourier: float


def resolve_grid(spec: SpecimenSpec, exc: ExcitationSpec, thickness: float, grid: GridParams) -> _Grid:
    alpha = thermal_diffusivity(spec.material)
    target_dx = grid.dx if grid.dx is not None else min(spec.defect_depths) / grid.nodes_per_min_depth
    if not target_dx > 0:
        raise ConfigError(f"grid.dx must be positive, got {target_dx!r}")
    n_cells = max(2, int(math.ceil(thickness / target_dx - 1e-9)))
    dx = thickness / n_cells
    frame_dt = 1.0 / exc.frame_rate
    if grid.dt is None:
        dt_max = grid.fourier * dx * dx / alpha
        steps = max(1, int(math.ceil(frame_dt / dt_max - 1e-12)))
    else:
        steps = int(round(frame_dt / grid.dt))
        if steps < 1 or abs(steps * grid.dt - frame_dt) > 1e-9 * frame_dt:
            raise ConfigError(f"grid.dt={grid.dt!r} must divide the frame interval {frame_dt!r}")
    dt = frame_dt / steps
    fo = alpha * dt / (dx * dx)
    if fo > 0.5:
        raise StabilityViolation(
            f"Fourier number alpha*dt/dx^2 = {fo:.4f} exceeds 0.5 (dx={dx:.3e} m, dt={dt:.3e} s)"
        )
    return _Grid(n_cells, dx, dt, steps, fo)


@njit(cache=True)
def _ftcs(n_cells, fo, gain, q0, h_front, h_back, steps_per_frame, n_frames, pulse_steps):
    # u is the temperature rise above ambient at the n_cells + 1 nodes;
    # nodes 0 and n_cells own half cells.
    u = np.zeros(n_cells + 1)
    un = np.zeros(n_cells + 1)
    out = np.zeros(n_frames)
    step = 0
    for f in range(1, n_frames):
        for _ in range(steps_per_frame):
            q = q0 if step < pulse_steps else 0.0
            un[0] = u[0] + 2.0 * fo * (u[1] - u[0]) + gain * (q - h_front * u[0])
            for i in range(1, n_cells):
                un[i] = u[i] + fo * (u[i - 1] - 2.0 * u[i] + u[i + 1])
            un[n_cells] = u[n_cells] + 2.0 * fo * (u[n_cells - 1] - u[n_cells]) - gain * h_back * u[n_cells]
            u, un = un, u
            step += 1
        out[f] = u[0]
    return out, u


def _run(spec, exc, depth, grid, absorbed_flux=None, back_h=None):
    if depth is not None and not 0 < depth < spec.thickness:
        raise InvalidDepth(f"depth {depth!r} must lie strictly between 0 and {spec.thickness}")
    thickness = spec.thickness if depth is None else float(depth)
    g = resolve_grid(spec, exc, thickness, grid)
    m = spec.material
    gain = 2.0 * g.dt / (m.density * m.specific_heat * g.dx)
    q0 = exc.absorbed_flux if absorbed_flux is None else absorbed_flux
    if back_h is None:
        back_h = 0.0 if depth is not None else exc.convection_coeff
    pulse_steps = int(round(exc.pulse_duration / g.dt))
    rise, final = _ftcs(
        g.n_cells, g.fourier, gain, float(q0),
        float(exc.convection_coeff), float(back_h), g.steps_per_frame, exc.n_frames, pulse_steps,
    )
    return rise, final, g


def simulate_pixel(
    spec: SpecimenSpec,
    exc: ExcitationSpec,
    depth: float | None = None,
    grid: GridParams = GridParams(),
) -> TemperatureCurve:
    """Front-surface temperature of one pixel, sampled at the frame rate.

    ``depth=None`` simulates a sound pixel.  Raises :class:`InvalidDepth` for
    depths outside ``(0, thickness)`` and :class:`StabilityViolation` when the
    requested grid has Fourier number above 0.5.
    """
    rise, _, _ = _run(spec, exc, depth, grid)
    return TemperatureCurve(exc.ambient_temp + rise, exc.frame_rate)


def slab_energy(spec, exc, depth=None, grid=GridParams(), convection_coeff=None):
    """Internal energy gain per unit area (J/m^2) at the end of the record."""
    if convection_coeff is not None:
        exc = replace(exc, convection_coeff=convection_coeff)
    _, u, g = _run(spec, exc, depth, grid)
    m = spec.material
    w = np.full(len(u), g.dx)
    w[0] = w[-1] = g.dx / 2
    return float(m.density * m.specific_heat * np.dot(w, u))


def quantize_curve(t: TemperatureCurve, cam: CameraSpec, rng_seed=None, label_depth=None) -> PixelCurve:
    """Add NETD noise and map temperature linearly onto grey levels."""
    lo, hi = cam.calib_min, cam.calib_max
    if lo is None or hi is None or not lo < hi:
        raise CalibrationError(f"calib_min ({lo!r}) must be below calib_max ({hi!r})")
    temps = np.asarray(t.samples, dtype=float)
    if cam.netd_sigma > 0:
        rng = np.random.default_rng(rng_seed)
        temps = temps + rng.normal(0.0, cam.netd_sigma, size=temps.shape)
    levels = (temps - lo) * cam.max_level / (hi - lo)
    levels = np.clip(round_half_away(levels), 0, cam.max_level)
    return PixelCurve(levels, t.frame_rate, label_depth)


def auto_calibration(spec, exc, grid=GridParams(), pad=0.05):
    """Grey-scale calibration bracketing the sound pixel and the shallowest
    defect (noiseless), widened by ``pad`` of the range on each side."""
    sound = simulate_pixel(spec, exc, None, grid).samples
    shallow = simulate_pixel(spec, exc, min(spec.defect_depths), grid).samples
    lo = min(sound.min(), shallow.min())
    hi = max(sound.max(), shallow.max())
    span = hi - lo
    return float(lo - pad * span), float(hi + pad * span)


def pixel_rng(master_seed: int, depth_idx: int, pixel_idx: int) -> np.random.Generator:
    """Independent stream per pixel; does not depend on generation order."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(depth_idx), int(pixel_idx)))
    return np.random.default_rng(ss)


def generate_dataset(
    spec: SpecimenSpec = SpecimenSpec(),
    exc: ExcitationSpec = ExcitationSpec(),
    cam: CameraSpec = CameraSpec(),
    pixels_per_depth: int = 197,
    master_seed: int = 0,
    flux_jitter: float = 0.02,
    grid: GridParams = GridParams(),
) -> Dataset:
    """Labelled pixel curves for every configured defect depth.

    Each pixel gets its own absorbed flux ``q0 * (1 + U(-j, j))`` and NETD
    noise.  The temperature rise is linear in the flux, so each depth is
    simulated once at nominal flux and rescaled per pixel.
    """
    if pixels_per_depth < 1:
        raise ConfigError(f"pixels_per_depth must be >= 1, got {pixels_per_depth!r}")
    if not 0 <= flux_jitter < 1:
        raise ConfigError(f"flux_jitter must lie in [0, 1), got {flux_jitter!r}")
    if cam.calib_min is None or cam.calib_max is None:
        lo, hi = auto_calibration(spec, exc, grid)
        cam = replace(cam, calib_min=lo, calib_max=hi)
    if not cam.calib_min < cam.calib_max:
        raise CalibrationError(f"calib_min ({cam.calib_min!r}) must be below calib_max ({cam.calib_max!r})")

    curves, d_idx, p_idx, seeds = [], [], [], []
    for i, depth in enumerate(spec.defect_depths):
        base = simulate_pixel(spec, exc, depth, grid)
        rise = base.samples - exc.ambient_temp
        for j in range(pixels_per_depth):
            rng = pixel_rng(master_seed, i, j)
            scale = 1.0 + (rng.uniform(-flux_jitter, flux_jitter) if flux_jitter > 0 else 0.0)
            t = TemperatureCurve(exc.ambient_temp + scale * rise, exc.frame_rate)
            curves.append(quantize_curve(t, cam, rng, label_depth=depth))
            d_idx.append(i)
            p_idx.append(j)
            seeds.append([int(master_seed), i, j])

    config = config_to_dict(spec, exc, cam)
    config["generation"] = {
        "pixels_per_depth": int(pixels_per_depth),
        "master_seed": int(master_seed),
        "flux_jitter": float(flux_jitter),
        "grid": asdict(grid),
    }
    return Dataset(curves, d_idx, p_idx, seeds, config, (cam.calib_min, cam.calib_max))


def config_to_dict(spec: SpecimenSpec, exc: ExcitationSpec, cam: CameraSpec) -> dict:
    specimen = asdict(spec)
    material = specimen.pop("material")
    specimen["defect_depths"] = list(spec.defect_depths)
    return {
        "material": material,
        "specimen": specimen,
        "excitation": asdict(exc),
        "camera": asdict(cam),
    }


def config_from_dict(doc: dict | None):
    """Build ``(spec, exc, cam)`` from a config document; every field optional."""
    doc = dict(doc or {})
    # pipeline/training/model sections belong to other stages of a run config
    unknown = set(doc) - {
        "material", "specimen", "excitation", "camera", "generation", "pipeline", "training", "model",
    }
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")

    def build(cls, section):
        body = doc.get(section)
        if body is None:
            body = {}
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        allowed = {f for f in cls.__dataclass_fields__ if f != "material"}
        bad = set(body) - allowed
        if bad:
            raise ConfigError(f"unknown field(s) in {section}: {sorted(bad)}")
        try:
            return cls(**body)
        except TypeError as exc:
            raise ConfigError(f"{section}: {exc}") from exc

    material = build(MaterialProps, "material")
    spec = replace(build(SpecimenSpec, "specimen"), material=material)
    return spec, build(ExcitationSpec, "excitation"), build(CameraSpec, "camera")
