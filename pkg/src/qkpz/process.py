"""Configurations, jump rates and a reference event-driven sampler.

Lattice sites are ``x in {-L, ..., L}`` stored at array index ``x + L``; bond
``x`` joins sites ``x`` and ``x + 1`` (``x in {-L, ..., L-1}``).  The segment
is closed: nothing crosses its ends.

Occupations are kept as non-negative integers ``n(x)``; the centered
variable ``eta(x) = n(x) - j`` (ASEP) or ``n(x) + k`` (ASIP) is derived.

The sampler here is the reference implementation: a single exponential clock
of total rate ``R`` plus weighted bond selection through a Fenwick tree.  It
handles both models.  :mod:`qkpz.engine` holds the compiled ASEP sampler used
for large ensembles.
"""
from __future__ import annotations

import enum
import math
import struct
import time as _time
from dataclasses import dataclass, field

import numpy as np

from .qcore import Model, QParameters, q_number

__all__ = [
    "AbsorbingStateError",
    "OccupancyCapError",
    "JumpBudgetError",
    "Configuration",
    "RngStream",
    "RNG_ALGORITHM",
    "JumpEvent",
    "BondRateIndex",
    "Trajectory",
    "InitialCondition",
    "rates_asep",
    "rates_asip",
    "rates_signed",
    "bond_rates",
    "rate_table",
    "build_rate_index",
    "step",
    "simulate_until",
    "initial_condition",
    "write_csv",
    "write_binary",
    "read_binary",
    "BINARY_MAGIC",
]

RNG_ALGORITHM = "PCG64 (numpy), seeded by SeedSequence(seed, spawn_key=(stream_id,))"

DEFAULT_ETA_MAX = 64


class AbsorbingStateError(RuntimeError):
    """Raised by :func:`step` when the total jump rate is zero."""


class OccupancyCapError(RuntimeError):
    """ASIP occupation exceeded the configured cap."""


class JumpBudgetError(RuntimeError):
    """A run needed more jumps than its configured budget."""


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream identified by ``(seed, stream_id)``."""

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.PCG64(ss))


@dataclass
class Configuration:
    """Occupations on ``{-L, ..., L}`` plus the flow counter ``h_t(0)``."""

    sites: np.ndarray
    flow_counter: int = 0
    time: float = 0.0

    def __post_init__(self) -> None:
        self.sites = np.asarray(self.sites, dtype=np.int64).copy()
        if self.sites.ndim != 1 or self.sites.size % 2 != 1:
            raise ValueError("sites must be a 1-D array of odd length 2L+1")
        if np.any(self.sites < 0):
            raise ValueError("occupations must be non-negative")

    @property
    def L(self) -> int:
        return (self.sites.size - 1) // 2

    @property
    def xs(self) -> np.ndarray:
        return np.arange(-self.L, self.L + 1)

    def index(self, x: int) -> int:
        i = int(x) + self.L
        if not 0 <= i < self.sites.size:
            raise IndexError(f"site {x} outside [-{self.L}, {self.L}]")
        return i

    def bond_index(self, x: int) -> int:
        i = int(x) + self.L
        if not 0 <= i < self.sites.size - 1:
            raise IndexError(f"bond {x} outside [-{self.L}, {self.L - 1}]")
        return i

    def eta(self, params: QParameters) -> np.ndarray:
        return params.centered(self.sites.astype(float))

    def copy(self) -> "Configuration":
        return Configuration(self.sites.copy(), self.flow_counter, self.time)


def rates_signed(n_left, n_right, s: float, q: float):
    """Rates on one bond written with a signed spin ``s``.

    ``s = j`` gives the ASEP(q, j) rates and ``s = -k`` gives ASIP(q, k).
    Arguments are uncentered occupations; ``eta = n - s``.
    """
    eta_l = n_left - s
    eta_r = n_right - s
    pref = 1.0 / (2.0 * q_number(2 * s, q))
    cp = pref * q ** (eta_l - eta_r - (2 * s + 1)) * q_number(s + eta_l, q) * q_number(s - eta_r, q)
    cm = pref * q ** (eta_l - eta_r + (2 * s + 1)) * q_number(s - eta_l, q) * q_number(s + eta_r, q)
    return cp, cm


def _asep_pair_rates(a: int, c: int, two_j: int, q: float):
    # a, c: uncentered occupations; every exponent is an integer
    pref = 1.0 / (2.0 * q_number(two_j, q))
    cp = pref * q ** (a - c - (two_j + 1)) * q_number(a, q) * q_number(two_j - c, q)
    cm = pref * q ** (a - c + (two_j + 1)) * q_number(two_j - a, q) * q_number(c, q)
    return max(cp, 0.0), max(cm, 0.0)


def _asip_pair_rates(a: int, c: int, k: float, q: float):
    # centered eta = n + k, so [eta(x) - k] = [n(x)] and [eta(x+1) + k] = [n(x+1) + 2k]
    pref = 1.0 / (2.0 * q_number(2 * k, q))
    cp = pref * q ** (a - c + (2 * k - 1)) * q_number(a, q) * q_number(c + 2 * k, q)
    cm = pref * q ** (a - c - (2 * k - 1)) * q_number(a + 2 * k, q) * q_number(c, q)
    return cp, cm


def rates_asep(config: Configuration, x: int, params: QParameters):
    """Return ``(c_plus, c_minus)`` for bond ``x`` of an ASEP configuration."""
    if params.model is not Model.ASEP:
        raise ValueError("rates_asep requires ASEP parameters")
    i = config.bond_index(x)
    return _asep_pair_rates(int(config.sites[i]), int(config.sites[i + 1]), params.two_j, params.q)


def rates_asip(config: Configuration, x: int, params: QParameters):
    """Return ``(c_plus, c_minus)`` for bond ``x`` of an ASIP configuration."""
    if params.model is not Model.ASIP:
        raise ValueError("rates_asip requires ASIP parameters")
    i = config.bond_index(x)
    return _asip_pair_rates(int(config.sites[i]), int(config.sites[i + 1]), float(params.spin), params.q)


def bond_rates(config: Configuration, x: int, params: QParameters):
    if params.model is Model.ASEP:
        return rates_asep(config, x, params)
    return rates_asip(config, x, params)


def rate_table(params: QParameters, n_max: int | None = None):
    """Tabulate ``(c_plus, c_minus)`` over pairs of occupations.

    Returns two arrays of shape ``(n_max + 1, n_max + 1)``; entry ``[a, c]``
    is the rate when the left site holds ``a`` and the right ``c``
    particles.  For ASEP ``n_max`` defaults to ``2j``.
    """
    if params.model is Model.ASEP:
        n_max = params.two_j if n_max is None else n_max
        f = lambda a, c: _asep_pair_rates(a, c, params.two_j, params.q)  # noqa: E731
    else:
        if n_max is None:
            raise ValueError("n_max is required for ASIP tables")
        f = lambda a, c: _asip_pair_rates(a, c, float(params.spin), params.q)  # noqa: E731
    cp = np.zeros((n_max + 1, n_max + 1))
    cm = np.zeros((n_max + 1, n_max + 1))
    for a in range(n_max + 1):
        for c in range(n_max + 1):
            cp[a, c], cm[a, c] = f(a, c)
    return cp, cm


class BondRateIndex:
    """Per-bond rates with a Fenwick tree over ``c_plus + c_minus``.

    Supports O(log n) point updates and weighted bond selection.  The cached
    total is rebuilt from scratch every ``rebuild_every`` updates.
    """

    def __init__(self, c_plus, c_minus, rebuild_every: int = 4096):
        self.c_plus = np.asarray(c_plus, dtype=float).copy()
        self.c_minus = np.asarray(c_minus, dtype=float).copy()
        if np.any(self.c_plus < 0) or np.any(self.c_minus < 0):
            raise ValueError("rates must be non-negative")
        if not (np.all(np.isfinite(self.c_plus)) and np.all(np.isfinite(self.c_minus))):
            raise OverflowError("non-finite jump rate")
        self.n = self.c_plus.size
        self.rebuild_every = rebuild_every
        self._top = 1 << (self.n.bit_length() - 1) if self.n else 0
        self.rebuild()

    def rebuild(self) -> None:
        w = self.c_plus + self.c_minus
        tree = np.zeros(self.n + 1)
        tree[1:] = w
        for i in range(1, self.n + 1):
            p = i + (i & -i)
            if p <= self.n:
                tree[p] += tree[i]
        self._tree = tree
        self.total = math.fsum(w)
        self._updates = 0

    def weight(self, b: int) -> float:
        return self.c_plus[b] + self.c_minus[b]

    def update(self, b: int, c_plus: float, c_minus: float) -> None:
        if c_plus < 0 or c_minus < 0 or not (math.isfinite(c_plus) and math.isfinite(c_minus)):
            raise OverflowError(f"invalid rate on bond index {b}: {c_plus}, {c_minus}")
        delta = (c_plus + c_minus) - (self.c_plus[b] + self.c_minus[b])
        self.c_plus[b] = c_plus
        self.c_minus[b] = c_minus
        if delta != 0.0:
            i = b + 1
            tree = self._tree
            while i <= self.n:
                tree[i] += delta
                i += i & -i
            self.total += delta
        self._updates += 1
        if self._updates >= self.rebuild_every:
            self.rebuild()

    def prefix(self, b: int) -> float:
        """Sum of the weights of bonds ``0 .. b-1``."""
        s, i = 0.0, b
        while i > 0:
            s += self._tree[i]
            i -= i & -i
        return s

    def find(self, u: float):
        """Bond ``b`` with ``prefix(b) <= u < prefix(b + 1)`` and the remainder."""
        pos, step_ = 0, self._top
        tree = self._tree
        while step_:
            nxt = pos + step_
            if nxt <= self.n and tree[nxt] <= u:
                pos = nxt
                u -= tree[nxt]
            step_ >>= 1
        # guard against round-off pushing past the last positive bond
        while pos >= self.n or self.weight(pos) == 0.0:
            pos -= 1
            u = self.weight(pos) * 0.5
        return pos, u


def build_rate_index(config: Configuration, params: QParameters) -> BondRateIndex:
    n_bonds = config.sites.size - 1
    cp = np.empty(n_bonds)
    cm = np.empty(n_bonds)
    for b in range(n_bonds):
        cp[b], cm[b] = bond_rates(config, b - config.L, params)
    return BondRateIndex(cp, cm)


@dataclass(frozen=True)
class JumpEvent:
    time_increment: float
    bond: int
    direction: int  # +1: particle moved x -> x+1, -1: x+1 -> x


def step(config: Configuration, index: BondRateIndex, rng: np.random.Generator,
         params: QParameters, eta_max: int = DEFAULT_ETA_MAX) -> JumpEvent:
    """Advance ``config`` by one jump and return the event.

    The configuration, its clock and flow counter, and the rate index are
    updated in place; only bonds ``x-1, x, x+1`` are recomputed.
    """
    R = index.total
    if not R > 0.0:
        raise AbsorbingStateError("total jump rate is zero")
    return _jump(config, index, rng, params, rng.standard_exponential() / R, eta_max)


def _jump(config, index, rng, params, dt, eta_max):
    b, rem = index.find(rng.random() * index.total)
    direction = 1 if rem < index.c_plus[b] else -1
    s = config.sites
    src, dst = (b, b + 1) if direction == 1 else (b + 1, b)
    s[src] -= 1
    s[dst] += 1
    x = b - config.L
    if x == 0:
        # left-going particles count as positive
        config.flow_counter -= direction
    config.time += dt
    if params.model is Model.ASEP:
        if s[src] < 0 or s[dst] > params.two_j:
            raise AssertionError("occupation left {0, ..., 2j}")
    elif s[dst] > eta_max:
        raise OccupancyCapError(f"ASIP occupation {s[dst]} at site {dst - config.L} exceeds cap {eta_max}")
    for bb in (b - 1, b, b + 1):
        if 0 <= bb < index.n:
            index.update(bb, *bond_rates(config, bb - config.L, params))
    return JumpEvent(dt, x, direction)


@dataclass
class Trajectory:
    """Snapshots of a run at the requested sampling times.

    Only raw state is stored; height and transformed fields are derived with
    :mod:`qkpz.transform`.
    """

    params: QParameters
    L: int
    times: np.ndarray
    occupations: np.ndarray  # (n_times, 2L+1) uncentered
    flow_counters: np.ndarray  # (n_times,)
    jump_count: int = 0
    wall_time: float = 0.0
    meta: dict = field(default_factory=dict)

    def configuration(self, k: int) -> Configuration:
        return Configuration(self.occupations[k], int(self.flow_counters[k]), float(self.times[k]))

    def eta(self) -> np.ndarray:
        return self.params.centered(self.occupations.astype(float))

    def heights(self) -> np.ndarray:
        from .transform import height_from_config
        return np.array([height_from_config(self.configuration(k), self.params).values
                         for k in range(len(self.times))])

    def gartner(self) -> np.ndarray:
        from .transform import gartner, height_from_config
        return np.array([gartner(height_from_config(self.configuration(k), self.params), self.times[k], self.params).values
                         for k in range(len(self.times))])


def simulate_until(config: Configuration, params: QParameters, t_end: float, sample_times,
                   rng: np.random.Generator, max_jumps: int = 10**8,
                   eta_max: int = DEFAULT_ETA_MAX) -> Trajectory:
    """Run the reference sampler from ``config.time`` to ``t_end``.

    ``config`` is advanced in place.  The state recorded at a sampling time
    ``t`` is the state after the last jump at or before ``t``.
    """
    sample_times = np.asarray(sample_times, dtype=float)
    if sample_times.size and (np.any(np.diff(sample_times) < 0) or sample_times[-1] > t_end):
        raise ValueError("sample_times must be sorted and not exceed t_end")
    if sample_times.size and sample_times[0] < config.time:
        raise ValueError("sample_times precede the configuration time")
    index = build_rate_index(config, params)
    occ = np.empty((sample_times.size, config.sites.size), dtype=np.int64)
    flows = np.empty(sample_times.size, dtype=np.int64)
    k = 0
    jumps = 0
    wall = _time.perf_counter()
    while True:
        R = index.total
        dt = rng.standard_exponential() / R if R > 0.0 else math.inf
        t_next = config.time + dt
        while k < sample_times.size and sample_times[k] < t_next:
            occ[k] = config.sites
            flows[k] = config.flow_counter
            k += 1
        if t_next > t_end:
            break
        if jumps >= max_jumps:
            raise JumpBudgetError(f"jump budget {max_jumps} exhausted at t={config.time}")
        _jump(config, index, rng, params, dt, eta_max)
        jumps += 1
    config.time = float(t_end)
    return Trajectory(params, config.L, sample_times.copy(), occ, flows, jumps,
                      _time.perf_counter() - wall)


class InitialCondition(enum.Enum):
    STEP = "step"
    FLAT_PAIRING = "flat_pairing"
    BERNOULLI_PRODUCT = "bernoulli_product"
    CUSTOM = "custom"


def initial_condition(kind, L: int, params: QParameters, rng: np.random.Generator | None = None,
                      custom=None, density: int = 1) -> Configuration:
    """Build an initial configuration on ``{-L, ..., L}``.

    ``step``: ``eta = j`` for ``x <= 0`` and ``-j`` for ``x > 0``.
    ``flat_pairing``: ``eta = 0`` for integer ``j``; for half-odd ``j`` the
    profile ``eta(x) = (-1)^x / 2``, so ``h_0`` only takes the values 0 and
    -1/2.  For ASIP every site holds ``density`` particles.
    ``bernoulli_product``: i.i.d. uniform occupations in ``{0, ..., 2j}``.
    ``custom``: the uncentered occupations in ``custom``.
    """
    kind = InitialCondition(kind)
    if not (isinstance(L, (int, np.integer)) and L >= 1):
        raise ValueError(f"L must be a positive integer, got {L!r}")
    xs = np.arange(-L, L + 1)
    if kind is InitialCondition.CUSTOM:
        if custom is None:
            raise ValueError("custom initial condition needs occupations")
        sites = np.asarray(custom, dtype=np.int64)
        if sites.size != 2 * L + 1:
            raise ValueError("custom occupations must have length 2L+1")
        if params.model is Model.ASEP and (sites.min() < 0 or sites.max() > params.two_j):
            raise ValueError("custom occupations outside {0, ..., 2j}")
        return Configuration(sites)
    if params.model is Model.ASIP:
        if kind is not InitialCondition.FLAT_PAIRING:
            raise ValueError(f"{kind.value} initial condition is only defined for ASEP")
        return Configuration(np.full(xs.size, int(density)))
    two_j = params.two_j
    if kind is InitialCondition.STEP:
        sites = np.where(xs <= 0, two_j, 0)
    elif kind is InitialCondition.FLAT_PAIRING:
        if two_j % 2 == 0:
            sites = np.full(xs.size, two_j // 2)
        else:
            sites = np.where(xs % 2 == 0, (two_j + 1) // 2, (two_j - 1) // 2)
    else:
        if rng is None:
            raise ValueError("bernoulli_product needs a random generator")
        sites = rng.integers(0, two_j + 1, size=xs.size)
    return Configuration(sites)


# -- serialization ----------------------------------------------------------------

BINARY_MAGIC = b"QKPZ1"
_MODEL_CODES = {Model.ASEP: 0, Model.ASIP: 1}
_HEADER = struct.Struct("<5sBdddqI")
_FRAME_HEAD = struct.Struct("<dq")


def write_csv(trajectory: Trajectory, path) -> None:
    """One row per (time, site): ``time,x,eta,h,Z``.

    ``eta`` and ``h`` are written exactly (they are multiples of 1/2 for
    ASEP, and of the spin fraction for ASIP); ``Z`` with 17 significant
    digits.
    """
    eta = trajectory.eta()
    h = trajectory.heights()
    Z = trajectory.gartner()
    xs = np.arange(-trajectory.L, trajectory.L + 1)
    with open(path, "w", newline="\n") as fh:
        fh.write("time,x,eta,h,Z\n")
        for k, t in enumerate(trajectory.times):
            for i, x in enumerate(xs):
                fh.write(f"{float(t)!r},{x},{float(eta[k, i])!r},{float(h[k, i])!r},{Z[k, i]:.17g}\n")


def write_binary(trajectory: Trajectory, path) -> None:
    """Compact little-endian frame format.

    Header: magic ``QKPZ1``, ``uint8`` model (0 ASEP, 1 ASIP), ``f64`` q,
    ``f64`` spin, ``f64`` nu, ``i64`` L, ``u32`` frame count.  Each frame:
    ``f64`` time, ``i64`` flow counter, ``2L+1`` ``i64`` occupations.
    """
    p = trajectory.params
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BINARY_MAGIC, _MODEL_CODES[p.model], p.q, float(p.spin), p.nu,
                              trajectory.L, len(trajectory.times)))
        for k, t in enumerate(trajectory.times):
            fh.write(_FRAME_HEAD.pack(float(t), int(trajectory.flow_counters[k])))
            fh.write(np.ascontiguousarray(trajectory.occupations[k], dtype="<i8").tobytes())


def read_binary(path) -> Trajectory:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, code, q, spin, _nu, L, n_frames = _HEADER.unpack_from(data, 0)
    if magic != BINARY_MAGIC:
        raise ValueError(f"not a QKPZ1 file: magic {magic!r}")
    model = {v: k for k, v in _MODEL_CODES.items()}[code]
    params = QParameters(q, spin, model)
    n = 2 * L + 1
    off = _HEADER.size
    times = np.empty(n_frames)
    flows = np.empty(n_frames, dtype=np.int64)
    occ = np.empty((n_frames, n), dtype=np.int64)
    for k in range(n_frames):
        times[k], flows[k] = _FRAME_HEAD.unpack_from(data, off)
        off += _FRAME_HEAD.size
        occ[k] = np.frombuffer(data, dtype="<i8", count=n, offset=off)
        off += 8 * n
    if off != len(data):
        raise ValueError("trailing bytes after the last frame")
    return Trajectory(params, int(L), times, occ, flows)
