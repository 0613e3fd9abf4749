"""Spectrum sensing: radix-2 FFT, per-PRB energy map, median-floor detection.

This is the reference (host-side) implementation of the pipeline the guest
dApp runs. The guest build in ``guests/dapp.c`` follows the same steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..codec import IqFrame


#: floor is clamped to this fraction of the strongest PRB (-120 dB), above
#: the rounding leakage of f32 samples, so noiseless tones stay exact
NUMERIC_FLOOR = 1e-12


class NonPowerOfTwo(ValueError):
    pass


class SampleCountMismatch(ValueError):
    pass


def is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class SensingConfig:
    fft_size: int = 1024
    n_prb: int = 64
    threshold_db: float = 6.0
    agent_endpoint: tuple[str, int] = ("127.0.0.1", 9990)
    dapp_id: int = 1
    period_us: int = 1000
    timing: bool = True
    #: non-zero: wait for the agent to dial in on this port instead of dialling out
    listen_port: int = 0

    def __post_init__(self) -> None:
        if not is_power_of_two(self.fft_size):
            raise NonPowerOfTwo(f"fft_size={self.fft_size}")
        if self.n_prb <= 0 or self.fft_size % self.n_prb:
            raise ValueError(f"fft_size={self.fft_size} is not a multiple of n_prb={self.n_prb}")
        if not self.threshold_db > 0:
            raise ValueError("threshold_db must be positive")

    @property
    def bins_per_prb(self) -> int:
        return self.fft_size // self.n_prb

    def to_keyvalue(self) -> str:
        """Render as the ``key=value`` lines the guest dApp parses."""
        host, port = self.agent_endpoint
        lines = [
            f"dapp_id={self.dapp_id}",
            f"agent_host={host}",
            f"agent_port={port}",
            f"fft_size={self.fft_size}",
            f"n_prb={self.n_prb}",
            f"threshold_db={self.threshold_db!r}",
            f"period_us={self.period_us}",
            f"timing={int(self.timing)}",
        ]
        if self.listen_port:
            lines.append(f"listen_port={self.listen_port}")
        return "\n".join(lines) + "\n"


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def fft(x) -> np.ndarray:
    """Unnormalized forward DFT, ``X[k] = sum_n x[n] exp(-2j*pi*k*n/N)``.

    Iterative decimation-in-time radix-2; each butterfly stage is vectorised.
    """
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[0]
    if x.ndim != 1 or not is_power_of_two(n):
        raise NonPowerOfTwo(f"length {n} is not a power of two")
    out = x[_bit_reverse_indices(n)]
    # twiddles for the full size; stage with half-span h uses every (n/2h)-th
    twiddle = np.exp(-2j * np.pi * np.arange(n // 2) / n)
    h = 1
    while h < n:
        w = twiddle[:: n // (2 * h)]
        blocks = out.reshape(-1, 2 * h)
        even = blocks[:, :h].copy()
        odd = blocks[:, h:] * w
        blocks[:, :h] = even + odd
        blocks[:, h:] = even - odd
        h *= 2
    return out


@dataclass
class PrbEnergyMap:
    energies: np.ndarray = field(repr=False)

    @property
    def n_prb(self) -> int:
        return int(self.energies.shape[0])

    def noise_floor(self) -> float:
        if self.energies.size == 0:
            return 0.0
        return max(float(np.median(self.energies)), float(self.energies.max()) * NUMERIC_FLOOR)


def prb_energies(spectrum: np.ndarray, n_prb: int) -> PrbEnergyMap:
    """Mean ``|X[k]|^2`` over each PRB's contiguous bin range."""
    power = np.abs(np.asarray(spectrum)) ** 2
    return PrbEnergyMap(power.reshape(n_prb, -1).mean(axis=1))


def detect(energy_map: PrbEnergyMap, threshold_db: float) -> frozenset[int]:
    floor = energy_map.noise_floor()
    limit = floor * 10.0 ** (threshold_db / 10.0)
    return frozenset(int(p) for p in np.flatnonzero(energy_map.energies > limit))


def sense(frame: IqFrame | np.ndarray, cfg: SensingConfig) -> frozenset[int]:
    """Return the set of PRB indices whose energy exceeds the noise floor by the margin."""
    samples = frame.samples if isinstance(frame, IqFrame) else np.asarray(frame)
    if samples.shape[0] != cfg.fft_size:
        raise SampleCountMismatch(
            f"frame has {samples.shape[0]} samples, config expects {cfg.fft_size}"
        )
    spectrum = fft(samples.astype(np.complex128))
    return detect(prb_energies(spectrum, cfg.n_prb), cfg.threshold_db)
