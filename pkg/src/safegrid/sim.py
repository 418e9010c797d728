"""Seeded synthetic grid-traffic environment.

A rows x cols lattice of intersection tiles, each subdivided into sensor
cells.  Vehicle queues follow exact integer bookkeeping (Poisson arrivals,
service proportional to the green split, binomial spillover to neighbors), so
arrivals - served == total queue holds exactly at every step.  Cell
observations are a deterministic trend + seasonal rate profile scaled by any
active anomaly and corrupted by Gaussian sensor noise; the per-subsystem RNG
streams make the observation panel independent of the control actions.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from safegrid.topology import grid_topology

ANOMALY_KINDS = ("demand_surge", "capacity_drop")


@dataclass(frozen=True)
class SimConfig:
    grid_rows: int = 4
    grid_cols: int = 4
    cells_per_side: int = 2          # cells per intersection tile side
    tile_km: float = 1.0
    tick_seconds: float = 15.0
    steps_per_day: int = 5760        # 24h of 15s ticks
    base_arrival_rate: float = 4.0   # vehicles / step / intersection
    daily_amplitude: float = 0.4
    weekly_amplitude: float = 0.1
    service_rate: float = 16.0       # vehicles / step at full green
    route_fraction: float = 0.25     # served vehicles continuing to a neighbor
    sensor_noise_sd: float = 0.5
    anomaly_rate: float = 0.05       # target fraction of anomalous cell-times
    anomaly_magnitude: float = 3.0
    anomaly_duration: int = 10
    anomaly_kinds: tuple = ANOMALY_KINDS
    seed: int = 0

    def __post_init__(self):
        if min(self.grid_rows, self.grid_cols, self.cells_per_side) < 1:
            raise ValueError("grid layout dimensions must be positive")
        if min(self.service_rate, self.tick_seconds, self.tile_km) <= 0:
            raise ValueError("rates must be positive")
        if self.base_arrival_rate < 0:
            raise ValueError("base_arrival_rate must be nonnegative")
        if not 0 <= self.anomaly_rate <= 0.2:
            raise ValueError("anomaly_rate must lie in [0, 0.2]")
        if not 0 <= self.route_fraction <= 1:
            raise ValueError("route_fraction must lie in [0, 1]")
        if not (0 <= self.daily_amplitude < 1 and 0 <= self.weekly_amplitude < 1):
            raise ValueError("seasonal amplitudes must lie in [0, 1)")
        for kind in self.anomaly_kinds:
            if kind not in ANOMALY_KINDS:
                raise ValueError(f"unknown anomaly kind {kind!r}")

    @property
    def n_intersections(self):
        return self.grid_rows * self.grid_cols

    @property
    def n_cells(self):
        return self.n_intersections * self.cells_per_side**2


@dataclass
class ActiveAnomaly:
    kind: str
    intersection: int
    magnitude: float
    remaining: int


@dataclass
class SimState:
    queues: np.ndarray = field(repr=False)       # int64 vehicles
    waits: np.ndarray = field(repr=False)        # seconds
    throughput: np.ndarray = field(repr=False)   # vehicles served last step
    observations: np.ndarray = field(repr=False)
    active: list = field(default_factory=list)
    clock: int = 0
    arrived_total: int = 0
    served_total: int = 0


class TrafficSim:
    """Grid traffic environment; construct via ``init_grid``."""

    def __init__(self, config):
        self.config = config
        n_int = config.n_intersections
        root = np.random.SeedSequence(config.seed)
        # named subsystem streams; observation noise never depends on actions
        arr_ss, tr_ss, sens_ss, anom_ss, layout_ss = root.spawn(5)
        self._rng_arrivals = np.random.default_rng(arr_ss)
        self._rng_transfer = np.random.default_rng(tr_ss)
        self._rng_sensor = np.random.default_rng(sens_ss)
        self._rng_anomaly = np.random.default_rng(anom_ss)
        rng_layout = np.random.default_rng(layout_ss)

        self.intersection_topology = grid_topology(config.grid_rows, config.grid_cols,
                                                   spacing_km=config.tile_km)
        cps = config.cells_per_side
        self.cell_topology = grid_topology(config.grid_rows * cps,
                                           config.grid_cols * cps,
                                           spacing_km=config.tile_km / cps)
        self.intersection_of_cell = np.array([
            (r // cps) * config.grid_cols + (c // cps)
            for r in range(config.grid_rows * cps)
            for c in range(config.grid_cols * cps)
        ])
        self._phases = rng_layout.uniform(0.0, 2.0 * math.pi, size=n_int)
        self._cell_gain = rng_layout.uniform(0.7, 1.3, size=config.n_cells)
        self._affected_cells = self._build_affected_cells()
        # anomaly_rate targets the long-run fraction of anomalous cell-times;
        # convert to a per-step start probability via the mean footprint size
        mean_footprint = float(np.mean([c.size for c in self._affected_cells]))
        self._start_prob = min(1.0, config.anomaly_rate * config.n_cells
                               / (config.anomaly_duration * mean_footprint))
        self.state = SimState(
            queues=np.zeros(n_int, dtype=np.int64),
            waits=np.zeros(n_int),
            throughput=np.zeros(n_int, dtype=np.int64),
            observations=np.zeros(config.n_cells),
        )

    def _build_affected_cells(self):
        # per intersection: its own cells plus the cells of 1-hop neighbors
        out = []
        for j in range(self.config.n_intersections):
            nbrs = self.intersection_topology.neighborhoods[j]
            cells = np.nonzero(np.isin(self.intersection_of_cell, nbrs))[0]
            out.append(cells)
        return out

    # ------------------------------------------------------------------ rates

    def arrival_rates(self, t):
        """Deterministic per-intersection arrival rates at step t (no anomalies)."""
        c = self.config
        daily = 1.0 + c.daily_amplitude * np.sin(
            2.0 * math.pi * t / c.steps_per_day + self._phases)
        weekly = 1.0 + c.weekly_amplitude * math.sin(
            2.0 * math.pi * t / (c.steps_per_day * 7))
        return c.base_arrival_rate * daily * weekly

    def _anomaly_multipliers(self):
        n_int = self.config.n_intersections
        demand = np.ones(n_int)
        capacity = np.ones(n_int)
        obs = np.ones(self.config.n_cells)
        for a in self.state.active:
            if a.kind == "demand_surge":
                demand[a.intersection] *= a.magnitude
            else:
                capacity[a.intersection] /= a.magnitude
            obs[self._affected_cells[a.intersection]] *= a.magnitude
        return demand, capacity, obs

    def expected_flow(self, t, obs_multiplier=None):
        """Noise-free cell observations at step t (the seasonal oracle)."""
        c = self.config
        rates = self.arrival_rates(t)
        per_cell = rates[self.intersection_of_cell] / c.cells_per_side**2
        flow = per_cell * self._cell_gain
        if obs_multiplier is not None:
            flow = flow * obs_multiplier
        return flow

    # ------------------------------------------------------------- anomalies

    def inject_anomaly(self, kind, magnitude, duration, intersection):
        """Start an anomaly now; its footprint is recorded for ground truth."""
        if magnitude <= 0:
            raise ValueError("magnitude must be positive")
        if duration < 1:
            raise ValueError("duration must be at least one step")
        if kind not in ANOMALY_KINDS:
            raise ValueError(f"unknown anomaly kind {kind!r}")
        self.state.active.append(ActiveAnomaly(kind=kind, intersection=int(intersection),
                                               magnitude=float(magnitude),
                                               remaining=int(duration)))

    def _schedule_anomalies(self):
        c = self.config
        if c.anomaly_rate <= 0:
            return
        if self._rng_anomaly.uniform() < self._start_prob:
            kind = c.anomaly_kinds[self._rng_anomaly.integers(len(c.anomaly_kinds))]
            where = int(self._rng_anomaly.integers(c.n_intersections))
            self.inject_anomaly(kind, c.anomaly_magnitude, c.anomaly_duration, where)

    def ground_truth_mask(self):
        """Boolean cell mask of every currently active anomaly footprint."""
        mask = np.zeros(self.config.n_cells, dtype=bool)
        for a in self.state.active:
            mask[self._affected_cells[a.intersection]] = True
        return mask

    # ------------------------------------------------------------------ step

    def step(self, action):
        """Advance one tick under per-intersection green splits in [0, 1].

        Order: schedule anomalies, emit observations, then queue dynamics.
        Returns (observations, ground-truth mask) for the step just taken.
        """
        c = self.config
        action = np.asarray(action, dtype=np.float64).ravel()
        if action.shape[0] != c.n_intersections:
            raise ValueError("action must provide one green split per intersection")
        if np.any((action < 0) | (action > 1)):
            raise ValueError("green splits must lie in [0, 1]")
        st = self.state

        self._schedule_anomalies()
        demand_mult, capacity_mult, obs_mult = self._anomaly_multipliers()
        mask = self.ground_truth_mask()

        flow = self.expected_flow(st.clock, obs_mult)
        noise = (self._rng_sensor.standard_normal(c.n_cells) * c.sensor_noise_sd
                 if c.sensor_noise_sd > 0 else 0.0)
        st.observations = flow + noise

        arrivals = self._rng_arrivals.poisson(self.arrival_rates(st.clock) * demand_mult)
        st.queues += arrivals
        st.arrived_total += int(arrivals.sum())

        capacity = np.floor(action * c.service_rate * capacity_mult + 1e-9).astype(np.int64)
        served = np.minimum(st.queues, capacity)
        st.queues -= served
        st.served_total += int(served.sum())
        st.throughput = served

        if c.route_fraction > 0:
            moved = self._rng_transfer.binomial(served, c.route_fraction)
            for i in np.nonzero(moved)[0]:
                nbrs = self.intersection_topology.neighborhoods[i]
                nbrs = nbrs[nbrs != i]
                if nbrs.size == 0:
                    continue
                split = self._rng_transfer.multinomial(moved[i],
                                                       np.full(nbrs.size, 1.0 / nbrs.size))
                st.queues[nbrs] += split
                st.arrived_total += int(moved[i])

        st.waits = st.queues * c.tick_seconds / np.maximum(capacity, 1)
        for a in st.active:
            a.remaining -= 1
        st.active = [a for a in st.active if a.remaining > 0]
        st.clock += 1
        return st.observations.copy(), mask

    def conservation_residual(self):
        """arrivals - served - queued; exactly zero by construction."""
        return self.state.arrived_total - self.state.served_total - int(
            self.state.queues.sum())

    def metrics(self):
        """(mean queue, max wait, mean throughput) of the current state."""
        st = self.state
        return (float(st.queues.mean()), float(st.waits.max()),
                float(st.throughput.mean()))


def init_grid(config):
    """Fresh simulator: empty queues, clock 0, per-subsystem seeded streams."""
    return TrafficSim(config)


def intersection_rects(config):
    """Axis-aligned tile rectangles (km) per intersection, row-major."""
    out = []
    for r in range(config.grid_rows):
        for c in range(config.grid_cols):
            out.append((c * config.tile_km, r * config.tile_km,
                        (c + 1) * config.tile_km, (r + 1) * config.tile_km))
    return tuple(out)


def cell_rects(config):
    """Axis-aligned cell rectangles (km), row-major over the fine grid."""
    side = config.tile_km / config.cells_per_side
    rows = config.grid_rows * config.cells_per_side
    cols = config.grid_cols * config.cells_per_side
    out = []
    for r in range(rows):
        for c in range(cols):
            out.append((c * side, r * side, (c + 1) * side, (r + 1) * side))
    return tuple(out)


@dataclass(frozen=True)
class Dataset:
    """Observation panel with anomaly ground truth and the three split slices."""

    panel: np.ndarray = field(repr=False)   # (T, n_cells)
    masks: np.ndarray = field(repr=False)   # (T, n_cells) bool
    train: slice
    calibration: slice
    test: slice
    gap_steps: int
    config: SimConfig = field(repr=False, default=None)


def generate_dataset(config, n_steps, fractions=(0.5, 0.25, 0.25), gap_steps=24,
                     hold_action=0.5):
    """Roll the simulator forward and split the panel train/cal/gap/test.

    The calibration and test windows are separated by ``gap_steps`` withheld
    steps.  Deterministic given ``config.seed``.
    """
    if abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) <= 0:
        raise ValueError("fractions must be positive and sum to 1")
    usable = n_steps - gap_steps
    n_train = int(round(fractions[0] * usable))
    n_cal = int(round(fractions[1] * usable))
    n_test = usable - n_train - n_cal
    if min(n_train, n_cal, n_test) < 1:
        raise ValueError(
            f"{n_steps} steps cannot host train/cal/test splits plus a "
            f"{gap_steps}-step gap")
    sim = init_grid(config)
    action = np.full(config.n_intersections, hold_action)
    panel = np.empty((n_steps, config.n_cells))
    masks = np.empty((n_steps, config.n_cells), dtype=bool)
    for t in range(n_steps):
        panel[t], masks[t] = sim.step(action)
    return Dataset(
        panel=panel, masks=masks,
        train=slice(0, n_train),
        calibration=slice(n_train, n_train + n_cal),
        test=slice(n_train + n_cal + gap_steps, n_steps),
        gap_steps=gap_steps, config=config,
    )
