"""Dispersive cavity transmission model and cooperativity fitting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class NoConvergence(RuntimeError):
    pass


class DegenerateData(ValueError):
    pass


@dataclass(frozen=True)
class CavityConfig:
    """Physical constants and probe operating point.

    Frequencies are linear (Hz), i.e. the angular value divided by 2*pi.
    ``delta_ca_hz`` is cavity minus atom, ``delta_pc_hz`` probe minus cavity.
    """

    eta: float = 21.0
    gamma_hz: float = 5.2e6
    kappa_hz: float = 37e3
    delta_ca_hz: float = 107e6
    delta_pc_hz: float = 0.0
    photons_per_bin_empty: float = 1000.0
    bin_us: int = 100

    def __post_init__(self):
        problems = cavity_problems(self.__dict__)
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def y(self) -> float:
        return atom_detuning(self.delta_pc_hz, self)

    @property
    def x(self) -> float:
        return 2.0 * self.delta_pc_hz / self.kappa_hz

    def level(self, n_eff) -> np.ndarray | float:
        """Noiseless transmission at the operating point for ``n_eff`` coupled atoms."""
        return transmission(n_eff, self.x, self.y, self.eta)


def cavity_problems(values: dict) -> list[str]:
    out = []
    for name in ("eta", "gamma_hz", "kappa_hz", "photons_per_bin_empty", "bin_us"):
        value = values[name]
        if not np.isfinite(value) or value <= 0:
            out.append(f"{name} must be > 0 (got {value})")
    for name in ("delta_ca_hz", "delta_pc_hz"):
        if not np.isfinite(values[name]):
            out.append(f"{name} must be finite")
    return out


def atom_detuning(delta_pc_hz, cfg: CavityConfig):
    """Normalized probe-atom detuning 2(Delta + delta)/Gamma."""
    return 2.0 * (cfg.delta_ca_hz + np.asarray(delta_pc_hz, dtype=float)) / cfg.gamma_hz


def transmission(n_eff, x, y, eta):
    """Normalized cavity transmission for ``n_eff`` effectively coupled atoms.

    ``n_eff`` is the atom number times the mean coupling factor, so integer
    values give the bare single-mode result. Broadcasts over array inputs.
    """
    if np.any(np.asarray(eta) <= 0):
        raise ValueError("eta must be positive")
    n_eff = np.asarray(n_eff, dtype=float)
    if np.any(n_eff < 0):
        raise ValueError("n_eff must be non-negative")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    lor = 1.0 / (1.0 + y * y)
    absorb = 1.0 + n_eff * eta * lor
    shift = x - n_eff * eta * y * lor
    out = 1.0 / (absorb * absorb + shift * shift)
    return float(out) if out.ndim == 0 else out


def effective_atoms(t, x, y, eta):
    """Invert :func:`transmission` for ``n_eff`` (the non-negative root).

    Transmissions at or above the empty-cavity value map to 0. Only
    meaningful where transmission is monotone in ``n_eff`` (e.g. x = 0).
    """
    t = np.clip(np.asarray(t, dtype=float), 1e-9, None)
    lor = 1.0 / (1.0 + y * y)
    a = eta * lor
    b = eta * y * lor
    # (1 + n a)^2 + (x - n b)^2 = 1/t
    qa = a * a + b * b
    qb = 2.0 * (a - x * b)
    qc = 1.0 + x * x - 1.0 / t
    disc = np.clip(qb * qb - 4.0 * qa * qc, 0.0, None)
    n = (-qb + np.sqrt(disc)) / (2.0 * qa)
    n = np.clip(n, 0.0, None)
    return float(n) if n.ndim == 0 else n


def dispersive_shift_hz(n: int, cfg: CavityConfig) -> float:
    """Atom-induced shift of the cavity resonance in Hz (sign follows y)."""
    if n < 0:
        raise ValueError("n must be non-negative")
    y = atom_detuning(0.0, cfg)
    return float(0.5 * cfg.kappa_hz * n * cfg.eta * y / (1.0 + y * y))


@dataclass(frozen=True)
class SpectrumPoint:
    x: float
    transmission: float
    n_atoms: int
    sigma: float = 0.01


def spectrum(n: int, cfg: CavityConfig, x_grid: Sequence[float]) -> list[SpectrumPoint]:
    """Noiseless transmission spectrum versus normalized probe-cavity detuning.

    Scanning the probe moves y as well as x, so y is recomputed per point.
    """
    xs = np.asarray(x_grid, dtype=float)
    if xs.size == 0 or not np.all(np.isfinite(xs)):
        raise ValueError("x_grid must be non-empty and finite")
    ys = atom_detuning(0.5 * xs * cfg.kappa_hz, cfg)
    ts = np.atleast_1d(transmission(n, xs, ys, cfg.eta))
    return [SpectrumPoint(float(x), float(t), int(n), 0.01) for x, t in zip(xs, ts)]


@dataclass(frozen=True)
class FitResult:
    eta: float
    eta_stderr: float
    covariance: np.ndarray
    iterations: int
    residual: float
    kappa_hz: float

    def as_dict(self) -> dict:
        return {
            "eta": self.eta,
            "eta_stderr": self.eta_stderr,
            "iterations": self.iterations,
            "residual": self.residual,
            "kappa_hz": self.kappa_hz,
        }


def _flatten(datasets) -> tuple[np.ndarray, ...]:
    n, x, t, s = [], [], [], []
    for n_atoms, points in datasets:
        for p in points:
            n.append(n_atoms)
            x.append(p.x)
            t.append(p.transmission)
            s.append(p.sigma)
    arrs = tuple(np.asarray(v, dtype=float) for v in (n, x, t, s))
    if arrs[0].size == 0:
        raise DegenerateData("no spectrum points")
    if np.any(arrs[3] <= 0):
        raise ValueError("sigma must be positive for fitting")
    return arrs


def fit_cooperativity(
    datasets: Iterable[tuple[int, Sequence[SpectrumPoint]]],
    cfg: CavityConfig,
    *,
    free_kappa: bool = False,
    max_iter: int = 200,
    grid: Sequence[float] | None = None,
) -> FitResult:
    """Shared-eta weighted least-squares fit over spectra of several atom numbers.

    Gamma and Delta are held at ``cfg``. With ``free_kappa`` the cavity width
    is also fitted; the stored x values are then read as 2*delta/kappa_nominal.
    Damped Gauss-Newton (Levenberg-Marquardt) from the best point of a coarse
    eta grid.
    """
    n, x_nom, t_obs, sigma = _flatten(datasets)
    if np.all(n == 0):
        raise DegenerateData("all spectra have zero atoms; eta is unconstrained")
    # probe detuning in Hz is what was really scanned
    y = atom_detuning(0.5 * x_nom * cfg.kappa_hz, cfg)
    lor = 1.0 / (1.0 + y * y)
    w = 1.0 / sigma

    def model(p):
        eta = p[0]
        scale = p[1] if free_kappa else 1.0
        x = x_nom / scale
        absorb = 1.0 + n * eta * lor
        shift = x - n * eta * y * lor
        t = 1.0 / (absorb**2 + shift**2)
        r = (t - t_obs) * w
        d_eta = -t * t * (2.0 * absorb * n * lor - 2.0 * shift * n * y * lor)
        cols = [d_eta]
        if free_kappa:
            cols.append(-t * t * 2.0 * shift * (-x_nom / scale**2))
        jac = np.stack(cols, axis=1) * w[:, None]
        return r, jac

    def cost(p):
        r, _ = model(p)
        return float(r @ r)

    if grid is None:
        grid = np.linspace(1.0, 100.0, 199)
    p = np.array([min(grid, key=lambda e: cost([e, 1.0]))] + ([1.0] if free_kappa else []))

    lam = 1e-3
    r, jac = model(p)
    c = float(r @ r)
    for it in range(1, max_iter + 1):
        a = jac.T @ jac
        g = jac.T @ r
        step = -np.linalg.solve(a + lam * np.diag(np.diag(a)), g)
        trial = p + step
        if trial[0] <= 0 or (free_kappa and trial[1] <= 0):
            lam *= 10.0
            continue
        r_new, jac_new = model(trial)
        c_new = float(r_new @ r_new)
        if c_new <= c:
            rel = abs(c - c_new) / max(c, 1e-300)
            p, r, jac, c = trial, r_new, jac_new, c_new
            lam = max(lam / 10.0, 1e-12)
            if rel < 1e-10 or np.linalg.norm(step) < 1e-12:
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                # no downhill direction left at machine precision
                break
    else:
        raise NoConvergence(f"no convergence after {max_iter} iterations")

    cov = np.linalg.inv(jac.T @ jac)
    kappa = cfg.kappa_hz * (p[1] if free_kappa else 1.0)
    return FitResult(
        eta=float(p[0]),
        eta_stderr=float(np.sqrt(cov[0, 0])),
        covariance=cov,
        iterations=it,
        residual=c,
        kappa_hz=float(kappa),
    )
