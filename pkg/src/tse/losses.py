"""Training losses (SI-SNR, power-law compression) and evaluation metrics.

Evaluation reports scale-invariant SDR, which for single-source references
is the same quantity as the SI-SNR used for training; both share one
implementation. Epsilon guards are relative (floors at eps times the
opposing energy), so the value is exactly scale invariant and lands on
+/-80 dB for perfect or silent estimates with the default eps of 1e-8.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SI_SNR_EPS = 1e-8
PLC_POWER = 0.3


def _zero_mean(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x - x.mean()


def si_snr(estimate: np.ndarray, target: np.ndarray, eps: float = SI_SNR_EPS) -> float:
    """Scale-invariant SNR in dB between an estimate and the target."""
    estimate, target = _zero_mean(estimate), _zero_mean(target)
    if estimate.shape != target.shape:
        raise ValueError(f"length mismatch: {estimate.shape} vs {target.shape}")
    target_energy = float(target @ target)
    if target_energy == 0.0:
        raise ValueError("target is all zero")
    projection = (float(estimate @ target) / target_energy) * target
    residual = estimate - projection
    num = float(projection @ projection)
    den = float(residual @ residual)
    if num == 0.0 and den == 0.0:
        return 10.0 * math.log10(eps)  # silent estimate
    return 10.0 * math.log10(max(num, eps * den) / max(den, eps * num))


si_sdr = si_snr


def si_snr_loss(estimate: Tensor, target: np.ndarray, eps: float = SI_SNR_EPS) -> Tensor:
    """Negative SI-SNR as a differentiable scalar; target is fixed."""
    target = _zero_mean(target)
    target_energy = float(target @ target)
    if target_energy == 0.0:
        raise ValueError("target is all zero")
    tgt = ad.constant(target.astype(estimate.dtype, copy=False))
    est = ad.sub(estimate, ad.tensor_mean(estimate))
    coef = ad.mul(ad.tensor_sum(ad.mul(est, tgt)), 1.0 / target_energy)
    projection = ad.mul(tgt, coef)
    residual = ad.sub(est, projection)
    num = ad.tensor_sum(ad.mul(projection, projection))
    den = ad.tensor_sum(ad.mul(residual, residual))
    # guard branches selected from forward values; each branch is smooth
    num_g = num if num.data >= eps * den.data else ad.mul(den, eps)
    den_g = den if den.data >= eps * num.data else ad.mul(num, eps)
    ratio = ad.mul(num_g, ad.power(den_g, -1.0))
    return ad.mul(ad.log(ratio), -10.0 / math.log(10.0))


def plc_loss(est_mag, target_mag, power: float = PLC_POWER) -> Tensor:
    """Squared error between power-law-compressed magnitude spectra.

    Sum over all bins of (target^p - estimate^p)^2. Magnitudes must be
    nonnegative and the exponent must lie in (0, 1].
    """
    if not 0.0 < power <= 1.0:
        raise ValueError(f"compression power must be in (0, 1], got {power}")
    if not isinstance(est_mag, Tensor):
        est_mag = ad.constant(np.asarray(est_mag, dtype=np.float64))
    target_mag = np.asarray(target_mag.data if isinstance(target_mag, Tensor) else target_mag)
    if est_mag.shape != target_mag.shape:
        raise ValueError(f"shape mismatch: {est_mag.shape} vs {target_mag.shape}")
    if est_mag.data.min() < 0.0 or target_mag.min() < 0.0:
        raise ValueError("magnitudes must be nonnegative")
    compressed_target = ad.constant((target_mag ** power).astype(est_mag.dtype, copy=False))
    diff = ad.sub(compressed_target, ad.power(est_mag, power))
    return ad.tensor_sum(ad.mul(diff, diff))


def si_sdr_improvement(extracted: np.ndarray, mixture: np.ndarray,
                       target: np.ndarray) -> float:
    """SI-SDR gain of the extracted signal over the raw mixture, in dB."""
    return si_snr(extracted, target) - si_snr(mixture, target)


def format_metric_report(rows: list[tuple[str, float, float]]) -> str:
    """One tab-separated line per item (id, SI-SDR in, SI-SDR out, delta)
    plus a mean summary row."""
    lines = ["utterance\tsi_sdr_in\tsi_sdr_out\tdelta"]
    for utt_id, sdr_in, sdr_out in rows:
        lines.append(f"{utt_id}\t{sdr_in:.6f}\t{sdr_out:.6f}\t{sdr_out - sdr_in:.6f}")
    if rows:
        mean_in = sum(r[1] for r in rows) / len(rows)
        mean_out = sum(r[2] for r in rows) / len(rows)
        lines.append(f"mean\t{mean_in:.6f}\t{mean_out:.6f}\t{mean_out - mean_in:.6f}")
    return "\n".join(lines) + "\n"
