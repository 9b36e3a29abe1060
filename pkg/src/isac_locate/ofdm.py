"""OFDM symbol synthesis, circulant multipath channel and per-BS demodulation.

The simulator works on the post-CP circular model: after CP removal the
channel from BS u to BS m is the circulant matrix whose first column is
[h_1 .. h_L, 0 .. 0], so tap l is a delay of l - 1 samples. The explicit
CP path (``transmit_linear_with_cp``) exists to check that equivalence.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import fft, linalg

from .models import OfdmParams, check_allocation
from .scenario import ChannelTaps, TapVector

logger = logging.getLogger("isac-locate.ofdm")

_QPSK = np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j]) / np.sqrt(2.0)


@dataclass(frozen=True)
class OfdmSymbol:
    bs: int
    subcarriers: np.ndarray  # 0-based indices N_m
    freq_symbol: np.ndarray  # s_m, unit modulus on N_m, zero elsewhere
    time_symbol: np.ndarray  # chi_m = sqrt(p) W^H s_m


@dataclass(frozen=True)
class Observation:
    """Frequency-domain samples of one BS on its own sub-carriers."""

    bs: int
    subcarriers: np.ndarray
    y_tilde: np.ndarray
    sensing_matrix: np.ndarray
    noise_power: float

    @property
    def n_rows(self) -> int:
        return len(self.y_tilde)

    @property
    def n_taps(self) -> int:
        return self.sensing_matrix.shape[1]


# --- Transforms ---


def dft_matrix(n: int) -> np.ndarray:
    """Unitary N x N DFT matrix W (W W^H = I)."""
    return linalg.dft(n, scale="sqrtn")


def delay_phase_matrix(subcarriers: np.ndarray, n_subcarriers: int, n_taps: int) -> np.ndarray:
    """G restricted to the given rows: exp(-j 2 pi n (l - 1) / N), n 0-based."""
    n = np.asarray(subcarriers, dtype=float)[:, None]
    l = np.arange(n_taps, dtype=float)[None, :]
    return np.exp(-2j * np.pi * n * l / n_subcarriers)


def circulant_matrix(taps: np.ndarray, n: int) -> np.ndarray:
    column = np.zeros(n, dtype=complex)
    column[: len(taps)] = taps
    return linalg.circulant(column)


def circular_convolve(taps: np.ndarray, x: np.ndarray) -> np.ndarray:
    """H x for the circulant H built from ``taps``, via the FFT."""
    n = len(x)
    column = np.zeros(n, dtype=complex)
    column[: len(taps)] = taps
    return fft.ifft(fft.fft(column) * fft.fft(x))


# --- Sub-carrier allocation ---


def make_allocation(params: OfdmParams, n_bs: int, rng: np.random.Generator) -> list[list[int]]:
    """Per-BS sub-carrier sets for the configured scheme.

    BSs are split into ``reuse_groups`` groups (one per BS by default);
    members of a group share a set, groups get disjoint sets of N // groups.
    """
    groups = params.reuse_groups or n_bs
    groups = min(groups, n_bs)
    n = params.n_subcarriers
    size = n // groups
    if params.allocation_scheme == "disjoint-random":
        perm = rng.permutation(n)
        sets = [np.sort(perm[g * size : (g + 1) * size]) for g in range(groups)]
    elif params.allocation_scheme == "interleaved":
        sets = [np.arange(g, groups * size, groups) for g in range(groups)]
    else:
        sets = [np.arange(g * size, (g + 1) * size) for g in range(groups)]
    allocation = [sets[m % groups].tolist() for m in range(n_bs)]
    check_allocation(allocation, n)
    return allocation


def ensure_allocation(params: OfdmParams, n_bs: int, rng: np.random.Generator) -> OfdmParams:
    if params.allocation is not None:
        if len(params.allocation) != n_bs:
            raise ValueError(f"Allocation lists {len(params.allocation)} BSs, scenario has {n_bs}")
        return params
    return params.with_allocation(make_allocation(params, n_bs, rng))


def interference_set(params: OfdmParams, bs: int) -> list[int]:
    """Upsilon_m: other BSs transmitting on the same sub-carriers as ``bs``."""
    if params.allocation is None:
        return []
    own = set(params.allocation[bs])
    return [u for u, s in enumerate(params.allocation) if u != bs and own and set(s) == own]


# --- Transmission ---


def make_symbol(params: OfdmParams, bs: int, rng: np.random.Generator) -> OfdmSymbol:
    """QPSK on the BS's sub-carriers, zero elsewhere; time symbol scaled by sqrt(p)."""
    if params.allocation is None:
        raise ValueError("make_symbol needs an allocation; call ensure_allocation first")
    sub = np.asarray(params.allocation[bs], dtype=int)
    s = np.zeros(params.n_subcarriers, dtype=complex)
    if len(sub):
        s[sub] = _QPSK[rng.integers(0, 4, size=len(sub))]
    chi = np.sqrt(params.tx_power) * fft.ifft(s, norm="ortho")
    return OfdmSymbol(bs=bs, subcarriers=sub, freq_symbol=s, time_symbol=chi)


def complex_noise(n: int, variance: float, rng: np.random.Generator) -> np.ndarray:
    """CN(0, variance) samples: E|z|^2 = variance."""
    if variance <= 0:
        return np.zeros(n, dtype=complex)
    scale = np.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(n) + 1j * rng.standard_normal(n))


def transmit_through_channel(
    symbols: Sequence[OfdmSymbol],
    channel: Union[ChannelTaps, Sequence[TapVector]],
    params: OfdmParams,
    rng: np.random.Generator,
    noiseless: bool = False,
) -> list[np.ndarray]:
    """Received time-domain vector at every BS: y_m = sum_u H_{u,m} chi_u + z_m."""
    n_bs = len(symbols)
    if not isinstance(channel, ChannelTaps):
        channel = ChannelTaps(n_bs=n_bs, taps={(m, m): tv for m, tv in enumerate(channel)})

    received = []
    for m in range(n_bs):
        y = np.zeros(params.n_subcarriers, dtype=complex)
        for u in range(n_bs):
            tv = channel.get(u, m)
            if tv is None or not np.any(tv.taps):
                continue
            y += circular_convolve(tv.taps, symbols[u].time_symbol)
        if not noiseless:
            y += complex_noise(params.n_subcarriers, params.effective_noise_power, rng)
        received.append(y)
    return received


def demodulate(y: np.ndarray, symbol: OfdmSymbol, params: OfdmParams) -> Observation:
    """DFT, keep the BS's own rows, and pair them with the known sensing matrix."""
    if len(y) != params.n_subcarriers:
        raise ValueError(f"Expected {params.n_subcarriers} samples, got {len(y)}")
    sub = symbol.subcarriers
    y_tilde = fft.fft(y, norm="ortho")[sub]
    g = delay_phase_matrix(sub, params.n_subcarriers, params.max_paths)
    a = np.sqrt(params.tx_power) * symbol.freq_symbol[sub][:, None] * g
    return Observation(
        bs=symbol.bs,
        subcarriers=sub,
        y_tilde=y_tilde,
        sensing_matrix=a,
        noise_power=params.effective_noise_power,
    )


def observe_all(
    channel: Union[ChannelTaps, Sequence[TapVector]],
    params: OfdmParams,
    rng: np.random.Generator,
    noiseless: bool = False,
    n_bs: Optional[int] = None,
) -> list[Observation]:
    """One symbol per BS through the channel, demodulated at every BS."""
    if n_bs is None:
        n_bs = channel.n_bs if isinstance(channel, ChannelTaps) else len(channel)
    params = ensure_allocation(params, n_bs, rng)
    symbols = [make_symbol(params, m, rng) for m in range(n_bs)]
    received = transmit_through_channel(symbols, channel, params, rng, noiseless=noiseless)
    return [demodulate(y, s, params) for y, s in zip(received, symbols)]


# --- Explicit cyclic prefix path ---


def insert_cp(x: np.ndarray, cp_length: int) -> np.ndarray:
    return np.concatenate([x[-cp_length:], x])


def remove_cp(x: np.ndarray, cp_length: int, n: int) -> np.ndarray:
    return x[cp_length : cp_length + n]


def transmit_linear_with_cp(symbol: OfdmSymbol, taps: TapVector, params: OfdmParams) -> np.ndarray:
    """Noiseless linear convolution of the CP-extended symbol, CP stripped."""
    n, q = params.n_subcarriers, params.cp_length
    if taps.length > q:
        raise ValueError(f"Channel length {taps.length} exceeds CP length {q}")
    extended = insert_cp(symbol.time_symbol, q)
    rx = np.convolve(extended, taps.taps)[: n + q]
    return remove_cp(rx, q, n)


def observation_to_frame(obs: Observation) -> pd.DataFrame:
    """Debug view of an observation: sub-carrier index, real, imaginary."""
    return pd.DataFrame({"index": obs.subcarriers, "re": obs.y_tilde.real, "im": obs.y_tilde.imag})
