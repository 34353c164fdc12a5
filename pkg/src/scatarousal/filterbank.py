"""Dyadic analytic Morlet filter bank defined on an FFT grid.

Band-pass filters are Gaussians in frequency with a DC-cancelling term,
supported on positive frequencies only. The low-pass is a Gaussian whose
time-domain standard deviation is a quarter of the averaging window.
"""
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError

# Ratio of the mother wavelet centre frequency to the sampling rate.
XI0_RATIO = 0.425
# Bandwidth multiplier; neighbouring filters cross at about -2.8 dB.
# The exact -3 dB value 1/sqrt(ln 2) ~ 1.201 leaves A_low at 0.342.
BANDWIDTH_K = 1.25


@dataclass(frozen=True)
class FilterBankConfig:
    fs: float = 200.0
    n_fft: int = 4096
    J: int = 8
    Q: int = 1
    m_max: int = 2
    T: int = 512
    p: int = 1
    include_order0: bool = False

    def validate(self):
        if not self.fs > 0:
            raise ConfigError(f"fs must be positive, got {self.fs}")
        if self.T < 1 or self.T & (self.T - 1):
            raise ConfigError(f"T must be a power of two, got {self.T}")
        if self.n_fft < 2 * self.T or self.n_fft & (self.n_fft - 1):
            raise ConfigError(
                f"n_fft must be a power of two >= 2*T={2 * self.T}, got {self.n_fft}")
        if self.J < 1:
            raise ConfigError(f"J must be >= 1, got {self.J}")
        if 2 ** self.J > self.T:
            raise ConfigError(f"2^J <= T violated: 2^{self.J} > {self.T}")
        if self.Q < 1:
            raise ConfigError(f"Q must be >= 1, got {self.Q}")
        if self.m_max not in (1, 2):
            raise ConfigError(f"m_max must be 1 or 2, got {self.m_max}")
        if self.p != 1:
            raise ConfigError(f"p is fixed to 1 for 1-D signals, got {self.p}")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown filterbank keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class FilterBank:
    """Frequency responses sampled on ``config.n_fft`` DFT bins (numpy order).

    ``psi_hat`` has shape (n_filters, n_fft); ``xi`` holds centre
    frequencies in Hz, decreasing with scale index.
    """

    config: FilterBankConfig
    phi_hat: np.ndarray
    psi_hat: np.ndarray
    xi: np.ndarray
    sigma: np.ndarray
    frame_bounds: tuple = field(default=(0.0, 0.0))

    @property
    def n_filters(self):
        return self.psi_hat.shape[0]

    @property
    def filters(self):
        """List of ``(j, xi_hz, spectrum)`` triples."""
        return [(j, float(self.xi[j]), self.psi_hat[j]) for j in range(self.n_filters)]

    def covered_band(self):
        """Band ``[xi_last / 2, fs / 2]`` in Hz on which the frame is near-tight."""
        return float(self.xi[-1]) / 2.0, self.config.fs / 2.0


def frequency_grid(n_fft, fs):
    """Signed DFT bin frequencies in Hz; the Nyquist bin is taken as positive."""
    f = np.fft.fftfreq(n_fft, d=1.0 / fs)
    f[n_fft // 2] = fs / 2.0
    return f


def _morlet_hat(freqs, xi, sigma):
    pos = freqs >= 0
    w = freqs[pos]
    beta = math.exp(-xi * xi / (2 * sigma * sigma))
    out = np.zeros_like(freqs)
    out[pos] = np.exp(-((w - xi) ** 2) / (2 * sigma * sigma)) - beta * np.exp(
        -(w * w) / (2 * sigma * sigma))
    # beta cancels the Gaussian exactly at DC; pin it to avoid a 1e-17 residue
    out[freqs == 0] = 0.0
    return out


def build_filterbank(config=None):
    """Build the band-pass family and low-pass for ``config``.

    Raises
    ------
    ConfigError
        If the config invariants fail or the widest-scale filter is narrower
        than one frequency bin.
    """
    config = (config or FilterBankConfig()).validate()
    fs, n_fft, Q = config.fs, config.n_fft, config.Q
    n_filters = config.J * Q
    ratio = 2.0 ** (1.0 / Q)
    rel_bw = (ratio - 1.0) / (ratio + 1.0) * BANDWIDTH_K

    xi = XI0_RATIO * fs * ratio ** (-np.arange(n_filters, dtype=np.float64))
    sigma = xi * rel_bw
    bin_hz = fs / n_fft
    if sigma[-1] < bin_hz:
        raise ConfigError(
            f"J={config.J} too large for n_fft={n_fft}: widest-scale bandwidth "
            f"{sigma[-1]:.4g} Hz is below one frequency bin ({bin_hz:.4g} Hz)")

    freqs = frequency_grid(n_fft, fs)
    psi = np.stack([_morlet_hat(freqs, xi[j], sigma[j]) for j in range(n_filters)])

    sigma_t = config.T / 4.0
    sigma_phi = fs / (2.0 * math.pi * sigma_t)
    phi = np.exp(-(freqs ** 2) / (2.0 * sigma_phi ** 2))

    # Scale band-pass filters so |phi|^2 + sum |psi|^2 <= 1 on every bin.
    phi2 = phi ** 2
    s = (psi ** 2).sum(axis=0)
    nz = s > 0
    scale = float(np.min((1.0 - phi2[nz]) / s[nz]))
    psi = psi * math.sqrt(scale) if scale < 1.0 else psi

    fb = FilterBank(config, phi, psi, xi, sigma)
    object.__setattr__(fb, "frame_bounds", littlewood_paley_bounds(fb))
    return fb


def littlewood_paley_sum(fb):
    return np.abs(fb.phi_hat) ** 2 + (np.abs(fb.psi_hat) ** 2).sum(axis=0)


def littlewood_paley_bounds(fb, band=None):
    """Min and max of the Littlewood-Paley sum over non-negative bins.

    ``band=(lo, hi)`` in Hz restricts the scan; the default is ``[0, fs/2]``.
    """
    cfg = fb.config
    freqs = frequency_grid(cfg.n_fft, cfg.fs)
    lo, hi = band if band is not None else (0.0, cfg.fs / 2.0)
    sel = (freqs >= 0) & (freqs >= lo) & (freqs <= hi)
    lp = littlewood_paley_sum(fb)[sel]
    if lp.size == 0:
        return 0.0, 0.0
    return float(lp.min()), float(lp.max())


def dump_filterbank(fb, out_dir):
    """Write every spectrum as little-endian float64 plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fb.phi_hat.astype("<f8").tofile(out / "phi.dat")
    names = []
    for j in range(fb.n_filters):
        name = f"psi_{j:02d}.dat"
        fb.psi_hat[j].astype("<f8").tofile(out / name)
        names.append(name)
    manifest = {
        "format_version": 1,
        "config": fb.config.to_dict(),
        "n_filters": fb.n_filters,
        "n_bins": fb.config.n_fft,
        "centers_hz": [float(x) for x in fb.xi],
        "bandwidths_hz": [float(x) for x in fb.sigma],
        "frame_bounds": list(fb.frame_bounds),
        "covered_band_hz": list(fb.covered_band()),
        "covered_frame_bounds": list(littlewood_paley_bounds(fb, fb.covered_band())),
        "lowpass_file": "phi.dat",
        "bandpass_files": names,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
