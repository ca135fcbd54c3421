"""Broadband joint-parameter extension operating on STFT tensors.

A single physical parameter (the per-sensor-index delay ``tau``, reported
as a DOA in degrees) couples all frequency bins: bin ``k`` sees the
steering vector ``exp(1j omega_k tau v)``.  Newton steps use per-bin
derivatives averaged over frequency, with the chain rule contributing a
factor ``omega_k`` per bin for the first derivative and ``omega_k^2`` for
the second.  The per-bin source samples share a joint rational
nonlinearity, which ties the bins together statistically and removes the
permutation ambiguity.
"""

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.io.wavfile
import scipy.linalg
import scipy.optimize
import scipy.signal

from .capon_ice import CaponConfig
from .core import COVARIANCE_EPS
from .errors import Diverged, SingularCovariance, SpatialAliasWarning

SIR_CAP_DB = 150.0


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform linear array: ``d`` sensors, ``spacing_m`` apart."""

    spacing_m: float
    d: int
    c: float = 343.0

    def __post_init__(self):
        if self.spacing_m <= 0.0:
            raise ValueError("spacing must be positive")
        if self.d < 2:
            raise ValueError("need at least two sensors")


@dataclass(frozen=True)
class StftTensor:
    """Complex STFT data of shape ``(K, d, n_frames)`` with K = fft_len/2+1."""

    data: np.ndarray
    sample_rate: float
    fft_len: int
    hop: int

    def __post_init__(self):
        data = np.asarray(self.data, dtype=complex)
        if data.ndim != 3:
            raise ValueError("expected (bins, channels, frames) tensor")
        k, d, frames = data.shape
        if k != self.fft_len // 2 + 1:
            raise ValueError(f"expected {self.fft_len // 2 + 1} bins, got {k}")
        if frames <= d:
            raise ValueError("need more frames than channels")
        object.__setattr__(self, "data", data)

    @property
    def n_bins(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def n_frames(self) -> int:
        return self.data.shape[2]

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.sample_rate / self.fft_len


def _sqrt_hann(fft_len: int) -> np.ndarray:
    n = np.arange(fft_len)
    return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / fft_len))


def stft(signal: np.ndarray, fft_len: int, hop: int, sample_rate: float) -> StftTensor:
    """Multichannel STFT with a square-root Hann window.

    ``signal`` is ``(channels, samples)``; the signal is zero-padded by one
    window on each side so that, together with the matching synthesis window
    in :func:`istft`, the round trip reconstructs the input exactly.
    """
    signal = np.atleast_2d(np.asarray(signal, dtype=float))
    d, length = signal.shape
    if length < fft_len:
        raise ValueError("signal shorter than one analysis window")
    win = _sqrt_hann(fft_len)
    padded = np.concatenate(
        [np.zeros((d, fft_len)), signal, np.zeros((d, fft_len))], axis=1
    )
    n_frames = (padded.shape[1] - fft_len) // hop + 1
    k = fft_len // 2 + 1
    out = np.empty((k, d, n_frames), dtype=complex)
    for m in range(n_frames):
        seg = padded[:, m * hop: m * hop + fft_len] * win
        out[:, :, m] = np.fft.rfft(seg, axis=1).T
    return StftTensor(out, sample_rate, fft_len, hop)


def istft(tensor: StftTensor, length: Optional[int] = None) -> np.ndarray:
    """Overlap-add inverse of :func:`stft` (square-root Hann synthesis)."""
    k, d, n_frames = tensor.data.shape
    fft_len, hop = tensor.fft_len, tensor.hop
    win = _sqrt_hann(fft_len)
    total = fft_len + (n_frames - 1) * hop
    acc = np.zeros((d, total))
    wsum = np.zeros(total)
    for m in range(n_frames):
        seg = np.fft.irfft(tensor.data[:, :, m].T, n=fft_len, axis=1)
        acc[:, m * hop: m * hop + fft_len] += seg * win
        wsum[m * hop: m * hop + fft_len] += win ** 2
    acc /= np.maximum(wsum, 1e-12)
    out = acc[:, fft_len:]
    if length is not None:
        out = out[:, :length]
    return out


def istft_mono(spec: np.ndarray, reference: StftTensor, length: Optional[int] = None) -> np.ndarray:
    """Inverse STFT of a single-channel spectrogram ``(K, n_frames)``."""
    mono = StftTensor(
        spec[:, None, :], reference.sample_rate, reference.fft_len, reference.hop
    )
    return istft(mono, length)[0]


def theta_to_tau(geom: ArrayGeometry, theta_deg: float) -> float:
    """Per-sensor-index delay for a far-field source at ``theta_deg``.

    Broadside (90 degrees) maps to zero delay; the cosine convention makes
    ``tau`` span ``[-spacing/c, spacing/c]`` over 180..0 degrees.
    """
    return geom.spacing_m * np.cos(np.radians(theta_deg)) / geom.c


def tau_to_theta(geom: ArrayGeometry, tau_s: float) -> float:
    return float(np.degrees(np.arccos(np.clip(tau_s * geom.c / geom.spacing_m, -1.0, 1.0))))


def steering_broadband(
    geom: ArrayGeometry, theta_deg: float, k: int, sample_rate: float, fft_len: int
) -> np.ndarray:
    """Per-bin steering vector ``exp(1j omega_k tau(theta) v)``.

    Emits :class:`SpatialAliasWarning` when the per-sensor phase step
    ``|omega_k tau|`` exceeds pi (ambiguous at this bin).
    """
    if not 0 <= k <= fft_len // 2:
        raise ValueError(f"bin index {k} out of range")
    tau = theta_to_tau(geom, theta_deg)
    omega = 2.0 * np.pi * k * sample_rate / fft_len
    lam_k = omega * tau
    if abs(lam_k) > np.pi:
        warnings.warn(
            f"spatial aliasing at bin {k}: |omega_k tau| = {abs(lam_k):.3f} > pi",
            SpatialAliasWarning,
            stacklevel=2,
        )
    v = np.arange(geom.d, dtype=float)
    return np.exp(1j * lam_k * v)


@dataclass(frozen=True)
class IveResult:
    theta_deg: float
    tau_s: float
    iterations: int
    converged: bool
    weights: np.ndarray                 # (K, d) per-bin separating vectors
    extracted: np.ndarray               # (K, n_frames) extracted spectrogram
    included_bins: np.ndarray
    alias_bins: np.ndarray
    flagged_bins: np.ndarray            # bins whose covariance needed extra care


def _included_bins(tensor: StftTensor, fmin_hz: float, exclude_nyquist: bool) -> np.ndarray:
    freqs = tensor.bin_frequencies()
    mask = freqs >= fmin_hz
    if exclude_nyquist:
        mask[-1] = False
    return np.flatnonzero(mask)


class _BinContext:
    """Per-bin covariance factors and derivative machinery shared by
    :func:`run_ive` and :func:`derivatives_at`."""

    def __init__(self, tensor, geom, fmin_hz, exclude_nyquist, bins=None):
        if geom.d != tensor.n_channels:
            raise ValueError("geometry channel count does not match the tensor")
        if bins is None:
            bins = _included_bins(tensor, fmin_hz, exclude_nyquist)
        bins = np.asarray(bins, dtype=int)
        if bins.size == 0:
            raise ValueError("no frequency bins left after exclusions")
        self.tensor = tensor
        self.geom = geom
        self.v = np.arange(geom.d, dtype=float)
        self.omegas_all = 2.0 * np.pi * tensor.bin_frequencies()
        frames = tensor.n_frames

        factors, flagged, usable = {}, [], []
        for k in bins:
            xk = tensor.data[k]
            ck = xk @ xk.conj().T / frames
            ck = 0.5 * (ck + ck.conj().T)
            eps = COVARIANCE_EPS
            fac = None
            while fac is None:
                try:
                    fac = scipy.linalg.cho_factor(
                        ck + (eps * np.real(np.trace(ck)) / geom.d + 1e-300)
                        * np.eye(geom.d),
                        lower=True,
                    )
                except scipy.linalg.LinAlgError:
                    eps *= 1e3
                    if eps > 1e-1:
                        break
            if fac is None:
                flagged.append(int(k))
                continue
            if eps != COVARIANCE_EPS:
                flagged.append(int(k))
            factors[int(k)] = fac
            usable.append(int(k))
        self.bins = np.asarray(usable, dtype=int)
        if self.bins.size == 0:
            raise SingularCovariance("every included bin has a singular covariance")
        self.factors = factors
        self.flagged = np.asarray(flagged, dtype=int)
        self.omegas = self.omegas_all[self.bins]

    def states(self, tau: float):
        """Steering, weights, source samples and powers for all bins."""
        frames = self.tensor.n_frames
        a = np.exp(1j * np.outer(self.omegas * tau, self.v))      # (B, d)
        w = np.empty_like(a)
        s = np.empty((self.bins.size, frames), dtype=complex)
        sig2 = np.empty(self.bins.size)
        sig2_solve = np.empty(self.bins.size)
        for i, k in enumerate(self.bins):
            ci_a = scipy.linalg.cho_solve(self.factors[k], a[i])
            denom = np.real(np.vdot(a[i], ci_a))
            w[i] = ci_a / denom
            s[i] = w[i].conj() @ self.tensor.data[k]
            sig2[i] = np.mean(np.abs(s[i]) ** 2)
            sig2_solve[i] = 1.0 / denom
        return a, w, s, sig2, sig2_solve

    def derivatives(self, a, w, s, sig2, sig2_solve):
        """Per-bin first/second derivatives with the joint nonlinearity."""
        frames = self.tensor.n_frames
        u = s / np.sqrt(sig2)[:, None]
        s_tot = 1.0 + np.sum(np.abs(u) ** 2, axis=0)              # (frames,)
        phi = np.conj(u) / s_tot
        nu = np.real(np.mean(phi * u, axis=1))                    # (B,)
        rho = np.real(np.mean((s_tot - np.abs(u) ** 2) / s_tot ** 2, axis=1))
        d1 = np.empty(self.bins.size)
        d2 = np.empty(self.bins.size)
        for i, k in enumerate(self.bins):
            av = a[i] * self.v
            ci_av = scipy.linalg.cho_solve(self.factors[k], av)
            xk = self.tensor.data[k]
            a_w = (xk @ (xk.conj().T @ w[i])) / frames / sig2[i]
            score_mean = (xk * phi[i]).mean(axis=1) / np.sqrt(sig2[i])
            gw = a_w - score_mean / nu[i]
            d1[i] = -2.0 * sig2[i] * np.imag(np.vdot(gw, ci_av))
            c1 = (nu[i] - rho[i]) / (nu[i] * sig2[i])
            # solve-consistent sigma^2 keeps the bracket >= 0 exactly
            bracket = (
                sig2_solve[i] * np.real(np.vdot(av, ci_av))
                - np.abs(np.vdot(w[i], av)) ** 2
            )
            d2[i] = 2.0 * c1 * sig2[i] * bracket
        return d1, d2, nu

    def joint_log_pdf_term(self, tau: float) -> float:
        """Sample mean of the joint model log-pdf ``-log(1 + sum_k |u_k|^2)``.

        Exact relation used by tests: its derivative with respect to the
        k-th bin phase equals ``nu_k`` times that bin's first derivative,
        so d/dtau = sum_k omega_k nu_k d1_k.
        """
        _, _, s, sig2, _ = self.states(tau)
        u = s / np.sqrt(sig2)[:, None]
        return float(np.mean(-np.log1p(np.sum(np.abs(u) ** 2, axis=0))))


@dataclass(frozen=True)
class BinDerivatives:
    """Joint and per-bin derivative diagnostics at a fixed delay."""

    d1_tau: float
    d2_tau: float
    per_bin_first: np.ndarray
    per_bin_second: np.ndarray
    nus: np.ndarray
    omegas: np.ndarray
    bins: np.ndarray


def derivatives_at(
    tensor: StftTensor,
    geom: ArrayGeometry,
    tau_s: float,
    fmin_hz: float = 100.0,
    exclude_nyquist: bool = True,
    bins=None,
) -> BinDerivatives:
    """Evaluate the joint first/second derivatives at a fixed delay.

    The joint derivatives are the frequency averages of the per-bin values
    with chain-rule factors ``omega_k`` and ``omega_k^2``.
    """
    ctx = _BinContext(tensor, geom, fmin_hz, exclude_nyquist, bins)
    a, w, s, sig2, sig2_solve = ctx.states(tau_s)
    d1, d2, nu = ctx.derivatives(a, w, s, sig2, sig2_solve)
    return BinDerivatives(
        d1_tau=float(np.mean(ctx.omegas * d1)),
        d2_tau=float(np.mean(ctx.omegas ** 2 * d2)),
        per_bin_first=d1,
        per_bin_second=d2,
        nus=nu,
        omegas=ctx.omegas,
        bins=ctx.bins,
    )


def run_ive(
    tensor: StftTensor,
    geom: ArrayGeometry,
    cfg: CaponConfig,
    fmin_hz: float = 100.0,
    exclude_nyquist: bool = True,
    bins=None,
) -> IveResult:
    """Joint Newton search over the single delay parameter.

    ``cfg.lambda_ini`` is the initial DOA in degrees.  Per iteration each
    included bin rebuilds its steering vector, distortionless weights and
    normalized source samples; the joint rational nonlinearity

        phi_k(u) = conj(u_k) / (1 + sum_k |u_k|^2)

    couples the bins.  The delay update averages the per-bin first and
    second derivatives with chain-rule factors ``omega_k`` and
    ``omega_k^2``; steps are capped so the top included bin moves at most
    ``step_cap`` radians, and the delay stays in the physical range
    ``|tau| <= spacing/c``.  Convergence is the max-norm change of the
    weights across all bins.  Bins below ``fmin_hz`` and the Nyquist bin
    are excluded by default; pass ``bins`` to override.
    """
    ctx = _BinContext(tensor, geom, fmin_hz, exclude_nyquist, bins)
    tau_max = geom.spacing_m / geom.c
    step_cap_tau = cfg.step_cap / float(np.max(ctx.omegas))

    tau = float(np.clip(theta_to_tau(geom, cfg.lambda_ini), -tau_max, tau_max))
    a, w, s, sig2, sig2_solve = ctx.states(tau)
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        d1_b, d2_b, _ = ctx.derivatives(a, w, s, sig2, sig2_solve)
        d1 = float(np.mean(ctx.omegas * d1_b))
        d2 = float(np.mean(ctx.omegas ** 2 * d2_b))
        if not (np.isfinite(d1) and np.isfinite(d2)):
            raise Diverged(f"non-finite derivatives at tau={tau}")
        if d2 < 0.0:
            delta = -d1 / d2
        else:
            delta = np.sign(d1) * 0.1 * step_cap_tau
        delta = float(np.clip(delta, -step_cap_tau, step_cap_tau)) * cfg.damping
        tau_new = float(np.clip(tau + delta, -tau_max, tau_max))
        a_new, w_new, s_new, sig2_new, sig2_solve_new = ctx.states(tau_new)
        dw = float(np.max(np.abs(w_new - w)))
        tau, a, w, s, sig2, sig2_solve = (
            tau_new, a_new, w_new, s_new, sig2_new, sig2_solve_new)
        if dw <= cfg.tol_w:
            converged = True
            break

    weights, extracted = beamform_at(tensor, geom, tau_to_theta(geom, tau))
    alias = np.flatnonzero(np.abs(ctx.omegas_all * tau) > np.pi)
    return IveResult(
        theta_deg=tau_to_theta(geom, tau),
        tau_s=tau,
        iterations=iterations,
        converged=converged,
        weights=weights,
        extracted=extracted,
        included_bins=ctx.bins,
        alias_bins=alias,
        flagged_bins=ctx.flagged,
    )


EXTRACTION_LOADING = 3e-3


def beamform_at(
    tensor: StftTensor,
    geom: ArrayGeometry,
    theta_deg: float,
    loading: float = EXTRACTION_LOADING,
):
    """Per-bin distortionless weights at a fixed DOA, plus the extracted
    spectrogram; returns ``(weights (K, d), extracted (K, n_frames))``.

    ``loading`` is the relative diagonal load of the per-bin covariances.
    The default is far heavier than the solver epsilon used during the
    parameter search: a broadband source spreads over each STFT bin, so the
    bin-center steering vector is slightly mismatched and an unloaded MPDR
    would partially cancel the target (superdirective self-nulling).  Bins
    whose covariance cannot be factorized fall back to passing channel 0
    through unchanged.
    """
    k_all, d, frames = tensor.data.shape
    if geom.d != d:
        raise ValueError("geometry channel count does not match the tensor")
    tau = theta_to_tau(geom, theta_deg)
    omegas = 2.0 * np.pi * tensor.bin_frequencies()
    v = np.arange(d, dtype=float)
    weights = np.zeros((k_all, d), dtype=complex)
    extracted = np.zeros((k_all, frames), dtype=complex)
    for k in range(k_all):
        xk = tensor.data[k]
        ck = xk @ xk.conj().T / frames
        ck = 0.5 * (ck + ck.conj().T)
        try:
            fac = scipy.linalg.cho_factor(
                ck + (loading * np.real(np.trace(ck)) / d + 1e-300) * np.eye(d),
                lower=True,
            )
        except scipy.linalg.LinAlgError:
            weights[k, 0] = 1.0
            extracted[k] = xk[0]
            continue
        ak = np.exp(1j * omegas[k] * tau * v)
        ci_a = scipy.linalg.cho_solve(fac, ak)
        wk_vec = ci_a / np.real(np.vdot(ak, ci_a))
        weights[k] = wk_vec
        extracted[k] = wk_vec.conj() @ xk
    return weights, extracted


@dataclass(frozen=True)
class SrpPhatResult:
    theta_deg: float
    stalled: bool
    power: float


def srp_phat(
    tensor: StftTensor,
    geom: ArrayGeometry,
    theta_ini_deg: float,
    fmin_hz: float = 100.0,
) -> SrpPhatResult:
    """Steered-response power with phase transform, refined by a local
    derivative-free search from ``theta_ini_deg``.

    The per-bin cross-spectra are PHAT-normalized elementwise and averaged
    over frames; the steered power is maximized with Nelder-Mead.  If the
    search cannot improve on the initial point (no spatial structure) the
    initial angle is returned with ``stalled=True``.
    """
    if geom.d != tensor.n_channels:
        raise ValueError("geometry channel count does not match the tensor")
    included = _included_bins(tensor, fmin_hz, True)
    omegas = 2.0 * np.pi * tensor.bin_frequencies()[included]
    xn = tensor.data[included]
    mag = np.abs(xn)
    xn = xn / np.maximum(mag, 1e-30)
    r = np.einsum("kdt,ket->kde", xn, xn.conj()) / tensor.n_frames
    v = np.arange(geom.d, dtype=float)

    def power(theta):
        theta = float(np.clip(theta, 0.0, 180.0))
        tau = theta_to_tau(geom, theta)
        a = np.exp(1j * np.outer(omegas * tau, v))               # (B, d)
        return float(np.real(np.einsum("kd,kde,ke->", a.conj(), r, a)))

    res = scipy.optimize.minimize(
        lambda t: -power(t[0]),
        x0=[theta_ini_deg],
        method="Nelder-Mead",
        options={"xatol": 1e-4, "fatol": 1e-10, "maxiter": 200},
    )
    theta = float(np.clip(res.x[0], 0.0, 180.0))
    p_best = power(theta)
    # the PHAT-normalized diagonal contributes exactly K*d; the off-diagonal
    # mass measures spatial coherence.  No coherence -> flagged stall.
    baseline = included.size * geom.d
    structure = (p_best - baseline) / (baseline * (geom.d - 1))
    stalled = structure < 0.01
    if stalled:
        theta = float(theta_ini_deg)
        p_best = power(theta)
    return SrpPhatResult(theta_deg=theta, stalled=stalled, power=p_best)


# ---------------------------------------------------------------------------
# WAV handling and synthesis of anechoic phase-shift mixtures
# ---------------------------------------------------------------------------

def read_wav(path):
    """Read a WAV file as ``(sample_rate, (channels, samples) float64)``.

    PCM 16-bit and 32-bit (and float) data are scaled to roughly [-1, 1].
    """
    rate, data = scipy.io.wavfile.read(path)
    data = np.atleast_2d(data.T if data.ndim == 2 else data)
    if data.dtype == np.int16:
        data = data.astype(float) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(float) / 2147483648.0
    else:
        data = data.astype(float)
    return rate, data


def write_wav(path, sample_rate: float, signal: np.ndarray):
    """Write a mono or multichannel float32 WAV."""
    signal = np.asarray(signal, dtype=np.float32)
    if signal.ndim == 2:
        signal = signal.T
    scipy.io.wavfile.write(path, int(sample_rate), signal)


def speech_shaped_noise(rng: np.random.Generator, n: int, sample_rate: float) -> np.ndarray:
    """Spectrally tilted noise with a slow random amplitude envelope.

    The envelope (a few Hz) gives the across-frequency dependence and the
    super-Gaussian marginals that make the source identifiable for the
    joint nonlinearity.
    """
    white = rng.standard_normal(n)
    b, a = scipy.signal.butter(2, [150.0, 3800.0], btype="bandpass", fs=sample_rate)
    shaped = scipy.signal.lfilter(b, a, white)
    b_env, a_env = scipy.signal.butter(2, 3.0, btype="lowpass", fs=sample_rate)
    env = np.abs(scipy.signal.lfilter(b_env, a_env, rng.standard_normal(n)))
    env = env / np.mean(env) + 0.05
    out = shaped * env
    return out / np.sqrt(np.mean(out ** 2))


def anechoic_phase_mix(
    sources: np.ndarray,
    thetas_deg: Sequence[float],
    geom: ArrayGeometry,
    sample_rate: float,
) -> np.ndarray:
    """Mix sources onto the array with exact per-bin phase shifts.

    Each source is fractionally delayed per sensor via a full-length FFT,
    so the mixture obeys ``x_k = sum_s a_k(theta_s) s_{s,k}`` at every
    frequency (the far-field anechoic model).
    """
    sources = np.atleast_2d(sources)
    n_sources, length = sources.shape
    if n_sources != len(thetas_deg):
        raise ValueError("one DOA per source required")
    omega = 2.0 * np.pi * np.fft.rfftfreq(length, 1.0 / sample_rate)
    out = np.zeros((geom.d, length))
    for src, theta in zip(sources, thetas_deg):
        tau = theta_to_tau(geom, theta)
        spec = np.fft.rfft(src)
        for j in range(geom.d):
            out[j] += np.fft.irfft(spec * np.exp(1j * omega * tau * j), n=length)
    return out


def projected_sir_db(y: np.ndarray, ref: np.ndarray) -> float:
    """SIR of ``y`` against a reference by least-squares projection."""
    n = min(y.size, ref.size)
    y, ref = y[:n], ref[:n]
    denom = float(ref @ ref)
    if denom <= 0.0:
        return -SIR_CAP_DB
    alpha = float(ref @ y) / denom
    target = alpha * ref
    resid = y - target
    p_t = float(target @ target)
    p_r = float(resid @ resid)
    if p_r <= 0.0:
        return SIR_CAP_DB
    if p_t <= 0.0:
        return -SIR_CAP_DB
    return float(np.clip(10.0 * np.log10(p_t / p_r), -SIR_CAP_DB, SIR_CAP_DB))


def sir_improvement_db(y: np.ndarray, mix_channel: np.ndarray, refs: np.ndarray):
    """Output-minus-input SIR against the best-matching reference.

    Returns ``(improvement_db, soi_index, sir_in_db, sir_out_db)``; the SOI
    is the reference with the highest projected SIR in the output.
    """
    refs = np.atleast_2d(refs)
    sirs = [projected_sir_db(y, ref) for ref in refs]
    soi = int(np.argmax(sirs))
    sir_out = sirs[soi]
    sir_in = projected_sir_db(mix_channel, refs[soi])
    return sir_out - sir_in, soi, sir_in, sir_out
