"""Per-frame reconstruction: power correction, initialization, two-stage MH."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from .cube import TransientCube
from .errors import EmptyInput, InvalidRate, NoChangeDetected
from .geometry import PlaneSpec, bin_to_distance
from .mcmc import ChainResult, MhSettings, run_chain
from .transport import FacetParams, QuadratureSettings, SensorConfig, fast_rates, shadow_panel

_log = logging.getLogger(__name__)

FG_NAMES = ("theta_min", "theta_max", "albedo", "range", "height")
OC_NAMES = ("albedo", "range")


@dataclass
class FrameMeasurement:
    x: TransientCube  # counts
    b: TransientCube  # reference rates over the same frame time
    sensor: SensorConfig

    def __post_init__(self):
        if self.x.shape != self.b.shape or self.x.shape != (self.sensor.n_pixels, self.sensor.n_bins):
            raise ValueError("measurement, reference and sensor dimensions disagree")
        if np.any(self.b.values < 0):
            raise ValueError("reference rates must be nonnegative")

    @property
    def frame_time(self) -> float:
        return self.x.frame_time

    def subset(self, keep: np.ndarray) -> "FrameMeasurement":
        """Restrict to the pixels flagged in boolean mask ``keep``."""
        s = self.sensor
        sensor = SensorConfig(
            s.laser, s.pixels[keep], s.pixel_area, s.bin_width, s.n_bins, s.t0, s.intensity, s.edge,
            s.laser_normal, s.floor_normal,
        )
        return FrameMeasurement(self.x.with_values(self.x.values[keep]), self.b.with_values(self.b.values[keep]), sensor)


@dataclass
class InitParams:
    beta_time: float = 0.3
    beta_theta: float = 1.5
    Q: int = 64
    min_interval_mass: float = 0.05  # fraction of total profile mass an interval must hold
    merge_gap: int = 2  # angular bins; closer intervals are merged
    min_object_gain: float = 100.0  # log-likelihood improvement a candidate object must bring
    min_relative_gain: float = 0.01  # ... and as a fraction of the first accepted object's improvement
    early_bins: int = 10
    noise_sigmas: float = 3.0
    hot_pixel_mads: float = 10.0

    def __post_init__(self):
        if self.Q < 8:
            raise ValueError("Q must be at least 8")
        if not (0 < self.beta_time < 1):
            raise ValueError("beta_time must lie in (0, 1)")


@dataclass
class PriorBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, float)
        self.hi = np.asarray(self.hi, float)
        if self.lo.shape != self.hi.shape or np.any(self.lo >= self.hi):
            raise ValueError("prior box needs lo < hi for every parameter")

    @classmethod
    def foreground(cls, M: int, r=(0.3, 3.0), h=(0.3, 3.0), albedo=(0.0, 2.0)) -> "PriorBox":
        lo = [0.0, 0.0, albedo[0], r[0], h[0]] * M
        hi = [math.pi, math.pi, albedo[1], r[1], h[1]] * M
        return cls(lo, hi)

    @classmethod
    def background(cls, r_fg: list[float], r_max=5.0, albedo=(0.0, 2.0)) -> "PriorBox":
        lo, hi = [], []
        for r in r_fg:
            lo += [albedo[0], r + 1e-6]
            hi += [albedo[1], r_max]
        return cls(lo, hi)

    def contains(self, v) -> bool:
        v = np.asarray(v)
        return bool(np.all(v >= self.lo) and np.all(v <= self.hi))


@dataclass
class InitialGuess:
    M: int
    fg: np.ndarray  # (M, 5)
    oc: np.ndarray  # (M, 2)
    profile: np.ndarray  # s_theta
    intervals: list[tuple[int, int]]
    argmax_bin: int
    argmin_bin: int


@dataclass
class FrameEstimate:
    M: int
    foreground: list[dict]
    occluded: list[dict]
    kappa: float
    diagnostics: dict = field(default_factory=dict)

    def fg_params(self) -> list[FacetParams]:
        return [FacetParams(**{k: d[k] for k in FG_NAMES}) for d in self.foreground]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "FrameEstimate":
        return cls(d["M"], d["foreground"], d["occluded"], d["kappa"], d.get("diagnostics", {}))

    @classmethod
    def load(cls, path) -> "FrameEstimate":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ------------------------------------------------------------ preprocessing


def hot_pixel_mask(reference: np.ndarray, n_mads: float = 10.0) -> np.ndarray:
    """True for usable pixels: per-pixel reference totals not above median + n_mads * MAD."""
    totals = np.asarray(reference).sum(axis=1)
    med = np.median(totals)
    mad = np.median(np.abs(totals - med))
    return totals <= med + n_mads * mad


def laser_power_correction(x: TransientCube, b_prime: TransientCube, early_bins: int = 10):
    """Scale the reference so its early-bin total matches the measurement's."""
    from .errors import ZeroReference

    den = float(b_prime.values[:, :early_bins].sum())
    if den <= 0:
        raise ZeroReference("reference has no counts in the early bins")
    kappa = float(x.values[:, :early_bins].astype(float).sum()) / den
    return kappa, b_prime.with_values(kappa * b_prime.values)


def log_likelihood(x, rates) -> float:
    """Poisson log-likelihood summed over all cells."""
    x = np.asarray(x, dtype=float)
    lam = np.asarray(rates, dtype=float)
    bad = (lam <= 0) & (x > 0)
    if np.any(bad):
        raise InvalidRate(f"{int(bad.sum())} cells have nonpositive rate with positive count")
    pos = lam > 0
    xlog = np.where(pos, x * np.log(np.where(pos, lam, 1.0)), 0.0)
    return float(np.sum(xlog - lam - gammaln(x + 1)))


class _PoissonTerm:
    """Log-likelihood with the count-only constant precomputed."""

    def __init__(self, x):
        self.x = np.asarray(x, dtype=float)
        self.const = float(np.sum(gammaln(self.x + 1)))
        self.has = self.x > 0

    def __call__(self, lam) -> float:
        if np.any(lam[self.has] <= 0):
            raise InvalidRate("nonpositive rate with positive count")
        return float(np.sum(self.x[self.has] * np.log(lam[self.has])) - np.sum(lam)) - self.const


# ------------------------------------------------------------ initialization


def frame_rates(facet, frame: FrameMeasurement, quad: QuadratureSettings) -> np.ndarray:
    """Facet response as expected counts over the frame's integration time."""
    return fast_rates(facet, frame.sensor, quad) * frame.frame_time


def visibility_matrix(sensor: SensorConfig, Q: int) -> np.ndarray:
    """Fraction of each azimuthal bin visible from each pixel."""
    gamma = sensor.pixel_azimuths
    w = math.pi / Q
    return np.clip((gamma[:, None] - np.arange(Q) * w) / w, 0.0, 1.0)


def passive_1d(y_passive, sensor: SensorConfig, Q: int = 64, iterations: int = 500) -> np.ndarray:
    """Nonnegative azimuthal profile explaining the temporally integrated change.

    Ridge-regularized nonnegative least squares against the visibility
    matrix, solved by accelerated projected gradient.
    """
    y = np.asarray(y_passive, dtype=float)
    A = visibility_matrix(sensor, Q)
    if not np.any(y):
        return np.zeros(Q)
    AtA = A.T @ A
    mu = 1e-3 * np.trace(AtA) / Q
    H = AtA + mu * np.eye(Q)
    g0 = A.T @ y
    step = 1.0 / np.linalg.eigvalsh(H)[-1]
    s = np.zeros(Q)
    z = s.copy()
    t = 1.0
    for _ in range(iterations):
        s_new = np.maximum(z - step * (H @ z - g0), 0.0)
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        z = s_new + ((t - 1) / t_new) * (s_new - s)
        s, t = s_new, t_new
    return s


def profile_intervals(s_theta: np.ndarray, p: InitParams) -> list[tuple[int, int]]:
    """Inclusive angular-bin intervals where the profile exceeds its threshold."""
    total = float(s_theta.sum())
    if total <= 0:
        return []
    above = s_theta > (p.beta_theta / len(s_theta)) * total
    runs = []
    q = 0
    while q < len(above):
        if above[q]:
            start = q
            while q + 1 < len(above) and above[q + 1]:
                q += 1
            runs.append([start, q])
        q += 1
    merged = []
    for r in runs:
        if merged and r[0] - merged[-1][1] - 1 <= p.merge_gap:
            merged[-1][1] = r[1]
        else:
            merged.append(r)
    return [(a, b) for a, b in merged if s_theta[a : b + 1].sum() >= p.min_interval_mass * total]


def _half_level_crossing(series: np.ndarray, peak: int) -> float:
    """Fractional bin where ``series`` first reaches half its value at ``peak``, scanning back."""
    half = 0.5 * series[peak]
    k = peak
    while k > 0 and series[k - 1] >= half:
        k -= 1
    if k == 0:
        return 0.0
    lo, hi = series[k - 1], series[k]
    return k - 1 + (half - lo) / (hi - lo) if hi != lo else float(k)


def _bin_to_range(kf: float, sensor: SensorConfig) -> float:
    """Half the round-trip distance at fractional bin-center position ``kf``."""
    return 0.5 * float(bin_to_distance(kf + 0.5, sensor.bin_width, sensor.t0))


def change_statistic(frame: FrameMeasurement, p: InitParams):
    """Spatially integrated change, its per-bin noise scale, and the detection floor."""
    y = frame.x.values.astype(float) - frame.b.values
    y_si = y.sum(axis=0)
    sd = np.sqrt(np.maximum(frame.b.values.sum(axis=0), 1.0))
    z = y_si / sd
    sigma = float(np.std(z[: p.early_bins]))
    floor = p.noise_sigmas * max(sigma, 1.0) if np.any(y) else math.inf
    return y, y_si, z, floor


def _fg_ll(frame, term, quad):
    b = frame.b.values

    def ll(vec):
        lam = b.copy()
        for row in vec.reshape(-1, 5):
            lam += frame_rates(FacetParams(*row), frame, quad)
        return term(lam)

    return ll


def initialize(frame: FrameMeasurement, p: InitParams = InitParams(), quad: QuadratureSettings = QuadratureSettings(),
               priors_fg: PriorBox | None = None) -> InitialGuess:
    """Object count and starting parameters from integrated views of the change."""
    y, y_si, z, floor = change_statistic(frame, p)
    if not np.any(y) or z.max() <= floor:
        raise NoChangeDetected(f"peak change {z.max():.2f} sigma does not exceed floor {floor:.2f}")
    k_max = int(np.argmax(y_si))
    k_min = int(np.argmin(y_si))
    kf_fg = _half_level_crossing(y_si, k_max)
    r_fg = _bin_to_range(kf_fg, frame.sensor)
    if k_min > k_max:
        r_oc = _bin_to_range(_half_level_crossing(-y_si, k_min), frame.sensor)
    else:
        r_oc = r_fg + 1.0
    K_fg = [k for k in range(k_min if k_min > k_max else len(y_si)) if y_si[k] >= p.beta_time * y_si[k_max]]
    y_passive = y[:, K_fg].sum(axis=1)
    s_theta = passive_1d(y_passive, frame.sensor, p.Q)
    intervals = profile_intervals(s_theta, p)
    if not intervals:
        raise NoChangeDetected("azimuthal profile has no interval above threshold")
    w = math.pi / p.Q
    box = priors_fg or PriorBox.foreground(1)
    term = _PoissonTerm(frame.x.values)
    r_fg = float(np.clip(r_fg, box.lo[3] + 1e-3, box.hi[3] - 1e-3))

    # each candidate interval must earn its place by improving the fit
    order = sorted(intervals, key=lambda iv: -s_theta[iv[0] : iv[1] + 1].sum())
    accepted, rows = [], []
    model = frame.b.values.copy()
    try:
        current = term(model)
    except InvalidRate:
        current = -math.inf
    first_gain = None
    for a, b in order:
        fit = _fit_candidate(frame, term, model, y - (model - frame.b.values), a * w, (b + 1) * w, r_fg, box, quad)
        need = p.min_object_gain if first_gain is None else max(p.min_object_gain, p.min_relative_gain * first_gain)
        if fit is None or fit[0] - current < need:
            if fit is not None:
                _log.debug("candidate %s rejected, gain %.1f", (a, b), fit[0] - current)
            continue
        gain_ll, row, rates = fit
        _log.debug("candidate %s gains %.1f", (a, b), gain_ll - current)
        if first_gain is None:
            first_gain = gain_ll - current
        accepted.append((a, b))
        rows.append(row)
        model = model + rates
        current = gain_ll
    if not rows:
        raise NoChangeDetected("no candidate object improves the fit enough")
    order_idx = np.argsort([r[0] for r in rows])
    fg = np.array(rows)[order_idx]
    accepted = [accepted[i] for i in order_idx]
    oc = np.array([[1.0, min(max(r_oc, row[3] + 0.05), 4.95)] for row in fg])
    return InitialGuess(len(fg), fg, oc, s_theta, accepted, k_max, k_min)


def _fit_candidate(frame, term, model, resid, th_lo, th_hi, r0, box, quad):
    """Coarse-to-fine (range, height) grid with least-squares albedo for one facet."""
    r_lo, r_hi = box.lo[3] + 1e-3, box.hi[3] - 1e-3
    h_lo, h_hi = box.lo[4] + 1e-3, box.hi[4] - 1e-3
    a_lo, a_hi = box.lo[2], box.hi[2] - 1e-3

    def evaluate(r, h):
        unit = frame_rates(FacetParams(th_lo, th_hi, 1.0, r, h), frame, quad)
        den = float(np.sum(unit * unit))
        if den <= 0:
            return None
        a = float(np.clip(np.sum(resid * unit) / den, a_lo, a_hi))
        try:
            return term(model + a * unit), np.array([th_lo, th_hi, a, r, h]), a * unit
        except InvalidRate:
            return None

    def search(rs, hs):
        best = None
        for r in np.unique(np.clip(rs, r_lo, r_hi)):
            for h in np.unique(np.clip(hs, h_lo, h_hi)):
                got = evaluate(r, h)
                if got is not None and (best is None or got[0] > best[0]):
                    best = got
        return best

    best = search(r0 + np.arange(-0.2, 0.81, 0.1), np.arange(0.5, 2.61, 0.3))
    if best is None:
        return None
    r1, h1 = best[1][3], best[1][4]
    fine = search(r1 + np.arange(-0.05, 0.051, 0.025), h1 + np.arange(-0.15, 0.151, 0.075))
    return fine if fine is not None and fine[0] > best[0] else best


# ------------------------------------------------------------ MH stages


def _fg_valid(vec) -> bool:
    rows = np.asarray(vec).reshape(-1, 5)
    return bool(np.all(rows[:, 0] < rows[:, 1]))


def _default_sigma_fg(M: int) -> np.ndarray:
    return np.tile(np.array([0.02, 0.02, 0.05, 0.02, 0.05]) ** 2, M)


def _default_sigma_bg(M: int) -> np.ndarray:
    return np.tile(np.array([0.05, 0.05]) ** 2, M)


def _estimate_rows(result: ChainResult, width: int, valid) -> np.ndarray:
    est = result.estimate.copy()
    if not valid(est):
        # per-parameter modes can land in an infeasible combination; fall back to medians
        med = np.median(result.samples, axis=0)
        rows, mrows = est.reshape(-1, width), med.reshape(-1, width)
        for i in range(len(rows)):
            if not valid(rows[i]):
                rows[i] = mrows[i]
        est = rows.ravel()
    return est


def mh_stage_foreground(frame: FrameMeasurement, init: InitialGuess, priors: PriorBox | None = None,
                        settings: MhSettings = MhSettings(), quad: QuadratureSettings = QuadratureSettings()):
    """Joint MH over all foreground facets, ignoring background occlusion."""
    priors = priors or PriorBox.foreground(init.M)
    if settings.sigma is None:
        settings = MhSettings(**{**asdict(settings), "sigma": _default_sigma_fg(init.M)})
    start = np.clip(init.fg.ravel(), priors.lo, priors.hi)
    term = _PoissonTerm(frame.x.values)
    result = run_chain(_fg_ll(frame, term, quad), start, priors.lo, priors.hi, settings, _fg_valid)
    est = _estimate_rows(result, 5, _fg_valid).reshape(-1, 5)
    return est, result


def occluded_panels(fg_row, oc_row, sensor: SensorConfig):
    """Shadow facets of one object, seen from the laser spot and from the FOV center."""
    facet = FacetParams(*fg_row)
    fgp = facet.to_panel(sensor.edge)
    d = sensor.edge.direction(facet.theta_mid)
    plane = PlaneSpec(-d, sensor.edge.base + oc_row[1] * d)
    out = []
    for occ in (sensor.laser, sensor.fov_center):
        try:
            sp = shadow_panel(fgp, occ, plane, oc_row[0])
        except ValueError:
            sp = None
        if sp is not None:
            out.append(sp)
    return out


def occluded_rates(fg_rows, oc_rows, sensor, quad, frame_time: float = 1.0) -> np.ndarray:
    """Expected counts over ``frame_time`` removed by all occluded regions."""
    total = np.zeros((sensor.n_pixels, sensor.n_bins))
    for fr, orow in zip(np.reshape(fg_rows, (-1, 5)), np.reshape(oc_rows, (-1, 2))):
        for sp in occluded_panels(fr, orow, sensor):
            total += fast_rates(sp, sensor, quad)
    return total * frame_time


def mh_stage_background(frame: FrameMeasurement, fg_hat: np.ndarray, init: InitialGuess, priors: PriorBox | None = None,
                        settings: MhSettings = MhSettings(), quad: QuadratureSettings = QuadratureSettings()):
    """MH over (albedo, range) of every occluded region with the foreground fixed."""
    fg_hat = np.reshape(fg_hat, (-1, 5))
    priors = priors or PriorBox.background(list(fg_hat[:, 3]))
    if settings.sigma is None:
        settings = MhSettings(**{**asdict(settings), "sigma": _default_sigma_bg(len(fg_hat))})
    base = frame.b.values + sum(frame_rates(FacetParams(*r), frame, quad) for r in fg_hat)
    term = _PoissonTerm(frame.x.values)

    def ll(vec):
        lam = base - occluded_rates(fg_hat, vec, frame.sensor, quad, frame.frame_time)
        if np.any(lam <= 0):
            raise InvalidRate("occluded region drives a rate nonpositive")
        return term(lam)

    start = np.clip(init.oc.ravel(), priors.lo + 1e-9, priors.hi)
    # shrink the starting albedo until the start is feasible
    for _ in range(60):
        try:
            ll(start)
            break
        except InvalidRate:
            start[0::2] *= 0.5
    result = run_chain(ll, start, priors.lo, priors.hi, settings)
    return result.estimate.reshape(-1, 2), result


# ------------------------------------------------------------ pipeline


@dataclass
class ReconstructionSettings:
    init: InitParams = field(default_factory=InitParams)
    fg: MhSettings = field(default_factory=lambda: MhSettings(iterations=4000))
    bg: MhSettings = field(default_factory=lambda: MhSettings(iterations=2500))
    quad: QuadratureSettings = field(default_factory=QuadratureSettings)


def prepare_frame(x: TransientCube, b_prime: TransientCube, sensor: SensorConfig, p: InitParams = InitParams()):
    """Drop hot pixels and rescale the reference by kappa. Returns (frame, kappa, kept-pixel mask)."""
    keep = hot_pixel_mask(b_prime.values, p.hot_pixel_mads)
    raw = FrameMeasurement(x, b_prime, sensor).subset(keep)
    kappa, b = laser_power_correction(raw.x, raw.b, p.early_bins)
    return FrameMeasurement(raw.x, b, raw.sensor), kappa, keep


def reconstruct_frame(
    x: TransientCube,
    b_prime: TransientCube,
    sensor: SensorConfig,
    settings: ReconstructionSettings = ReconstructionSettings(),
    strict: bool = False,
) -> FrameEstimate:
    """Full per-frame pipeline. Returns ``M = 0`` when no change is found unless ``strict``."""
    if x.values.size == 0:
        raise EmptyInput("empty measurement")
    frame, kappa, keep = prepare_frame(x, b_prime, sensor, settings.init)
    diag = {"hot_pixels": np.flatnonzero(~keep).tolist()}
    try:
        init = initialize(frame, settings.init, settings.quad)
    except NoChangeDetected as exc:
        if strict:
            raise
        diag["no_change"] = str(exc)
        return FrameEstimate(0, [], [], kappa, diag)
    fg_hat, fg_res = mh_stage_foreground(frame, init, settings=settings.fg, quad=settings.quad)
    oc_hat, bg_res = mh_stage_background(frame, fg_hat, init, settings=settings.bg, quad=settings.quad)
    diag.update(
        initial={"fg": init.fg.tolist(), "oc": init.oc.tolist(), "intervals": init.intervals,
                 "profile": init.profile.tolist()},
        foreground=fg_res.diagnostics(),
        background=bg_res.diagnostics(),
    )
    fg = [dict(zip(FG_NAMES, map(float, r))) for r in fg_hat]
    oc = [dict(zip(OC_NAMES, map(float, r))) for r in oc_hat]
    return FrameEstimate(init.M, fg, oc, kappa, diag)
