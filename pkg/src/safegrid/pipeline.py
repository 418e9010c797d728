"""End-to-end wiring: fit the forecasting/calibration/scoring/world-model
components from simulator data, then run the closed control loop

    observe -> residual p-values -> FDR flags -> forecast -> intervals ->
    aggregate -> state assembly -> policy (+ exploration) -> safety filter ->
    env step -> reward

with per-episode safety accounting.
"""

import dataclasses
from dataclasses import dataclass, field, replace

import numpy as np

from safegrid import aggregation, anomaly, conformal, sim
from safegrid.certify import iterative_certificate
from safegrid.het import fit_heteroscedastic
from safegrid.policies import GreedyPressurePolicy, RandomPolicy, SafetyFilter
from safegrid.safety import (ConstraintSpec, ExplorationParams, LyapunovParams,
                             RewardWeights, anomaly_reward, lipschitz_bounds,
                             lyapunov_value)
from safegrid.worldmodel import ensemble_predict, fit_world_ensemble, model_error

EPISODE_STEPS = 240  # one simulated hour of 15-second ticks


@dataclass(frozen=True)
class PipelineConfig:
    window: int = 12
    alpha: float = 0.1
    fdr_alpha: float = 0.05
    trim_fraction: float = 0.02
    k_clusters: int = 15
    aci_step: float = 0.05
    gap_steps: int = 24
    scorer_kind: str = "gaussian_nll"
    covariance_kind: str = "distance_kernel"
    length_scale_km: float = 2.0
    cutoff_km: float = 10.0
    pvalue_rule: str = "min"
    kappa: float = 0.5
    delta_slack: float = 0.3  # on the normalized queue-energy scale (boundary ~ 1)
    min_green: float = 0.1    # operational floor applied by policies, not the env
    n_members: int = 5
    het_iterations: int = 300
    het_step: float = 0.05
    world_model_steps: int = 800
    exploration: str = "sigmoid_gate"  # None | sigmoid_gate | scaled_noise
    reward: RewardWeights = field(default_factory=RewardWeights)


def sliding_windows(panel, window, t_start=None, steps_per_day=None):
    """Per-node lagged windows: X[(t, n)] = panel[t-window:t, n], y = panel[t, n].

    With ``t_start``/``steps_per_day`` given, each row also carries the cyclic
    clock encoding of its absolute target time, letting the affine forecaster
    track the seasonal phase instead of extrapolating it from the window.
    """
    t_total, n_nodes = panel.shape
    if t_total <= window:
        raise ValueError("panel shorter than the forecast window")
    views = np.lib.stride_tricks.sliding_window_view(panel, window, axis=0)
    x = views[:-1].reshape((t_total - window) * n_nodes, window)  # (t, node) major
    y = panel[window:].reshape(-1)
    if t_start is not None:
        times = t_start + np.arange(window, t_total)
        clock = np.stack([aggregation.cyclic_clock(t, steps_per_day)
                          for t in times])
        x = np.hstack([x, np.repeat(clock, n_nodes, axis=0)])
    return x, y


def _predict_panel(predictor, panel, window, t_start=None, steps_per_day=None):
    """Forecasts aligned with panel[window:]: returns (mu, sigma) panels."""
    t_total, n_nodes = panel.shape
    x, _ = sliding_windows(panel, window, t_start, steps_per_day)
    mu, sigma = predictor.predict(x)
    shape = (t_total - window, n_nodes)
    return mu[:, 0].reshape(shape), sigma[:, 0].reshape(shape)


@dataclass
class PipelineComponents:
    config: PipelineConfig
    sim_config: sim.SimConfig
    predictor: object
    ledger: conformal.CalibrationLedger
    scorer: object
    trimmed: anomaly.TrimmedCalibration
    coverage_map: aggregation.CoverageMap
    cov_model: aggregation.CovarianceModel
    cell_coords: np.ndarray
    ensemble: object
    epsilon_model: float
    lyapunov: LyapunovParams
    constraints: ConstraintSpec
    l_bar: float
    j_bar: float

    @property
    def n_intersections(self):
        return self.sim_config.n_intersections

    def local_block(self, queues, waits, throughput):
        """Constraint-normalized local state: O(1) components, boundary at 1."""
        c = self.constraints
        return np.column_stack([
            np.asarray(queues, dtype=np.float64) / c.queue_max,
            np.asarray(waits, dtype=np.float64) / c.wait_max,
            np.asarray(throughput, dtype=np.float64) / c.baseline_throughput,
        ])

    def violation_from_state(self, state_vector):
        """d_C from the (normalized) local block of an assembled state vector."""
        n = self.n_intersections
        c = self.constraints
        local = np.asarray(state_vector)[: 3 * n].reshape(n, 3)
        queues = local[:, 0] * c.queue_max
        waits = local[:, 1] * c.wait_max
        throughput = local[:, 2] * c.baseline_throughput
        return self.constraints.violation(float(queues.mean()), float(waits.max()),
                                          float(throughput.mean()))


def _fit_forecaster(cfg, dataset):
    panel = dataset.panel
    spd = dataset.config.steps_per_day
    train = panel[dataset.train]
    x_train, y_train = sliding_windows(train, cfg.window, dataset.train.start, spd)
    predictor, _ = fit_heteroscedastic(
        x_train, y_train, step_size=cfg.het_step, iterations=cfg.het_iterations)
    return predictor


def _fit_ledger(cfg, dataset, predictor, seed):
    panel = dataset.panel
    spd = dataset.config.steps_per_day
    train = panel[dataset.train]
    mu_tr, sigma_tr = _predict_panel(predictor, train, cfg.window,
                                     dataset.train.start, spd)
    stats = conformal.error_statistics(train[cfg.window:] - mu_tr)
    k = min(cfg.k_clusters, stats.shape[0])
    clusters = conformal.cluster_nodes(stats, k, seed=seed)

    cal = panel[dataset.calibration]
    mu_cal, sigma_cal = _predict_panel(predictor, cal, cfg.window,
                                       dataset.calibration.start, spd)
    ledger = conformal.CalibrationLedger.from_calibration(
        clusters, cal[cfg.window:], mu_cal, sigma_cal,
        target_alpha=cfg.alpha, aci_step=cfg.aci_step, gap_steps=cfg.gap_steps)

    z_train = anomaly.normalize_residuals(train[cfg.window:], mu_tr, sigma_tr)
    scorer = anomaly.fit_scorer(z_train.ravel(), kind=cfg.scorer_kind)
    z_cal = anomaly.normalize_residuals(cal[cfg.window:], mu_cal, sigma_cal)
    trimmed = anomaly.trim_calibration(scorer.score(z_cal.ravel()),
                                       cfg.trim_fraction)
    return ledger, scorer, trimmed


def _lyapunov_for(sim_config, state_dim):
    # mean squared queue utilization over the normalized local block: L ~ 1 at
    # the constraint boundary, so the unit-scale delta_slack is meaningful.
    # Waits are a derived ratio the affine world model cannot track; they get
    # a negligible weight.
    n = sim_config.n_intersections
    queue_weight = 1.0 / n
    weights = np.full(state_dim, queue_weight * 1e-4)
    local = np.arange(3 * n).reshape(n, 3)
    weights[local[:, 0]] = queue_weight
    return LyapunovParams(feature_map=np.zeros((1, state_dim)), eta=1.0,
                          q_matrix=np.diag(weights), s_safe=np.zeros(state_dim))


def fit_pipeline(sim_config, cfg=None, seed=0, dataset=None):
    """Fit every component on a generated dataset; deterministic given seed."""
    cfg = cfg or PipelineConfig()
    if dataset is None:
        dataset = sim.generate_dataset(sim_config, n_steps=1600,
                                       gap_steps=cfg.gap_steps)
    predictor = _fit_forecaster(cfg, dataset)
    ledger, scorer, trimmed = _fit_ledger(cfg, dataset, predictor, seed)

    cmap = aggregation.coverage_weights(sim.cell_rects(sim_config),
                                        sim.intersection_rects(sim_config))
    cell_coords = sim.init_grid(sim_config).cell_topology.coordinates
    if cfg.covariance_kind == "empirical":
        train = dataset.panel[dataset.train]
        mu_tr, _ = _predict_panel(predictor, train, cfg.window,
                                  dataset.train.start,
                                  sim_config.steps_per_day)
        matrix = aggregation.empirical_residual_cov(
            train[cfg.window:] - mu_tr, cell_coords, cutoff=cfg.cutoff_km)
        cov_model = aggregation.CovarianceModel(kind="empirical", matrix=matrix,
                                                cutoff=cfg.cutoff_km)
    else:
        cov_model = aggregation.CovarianceModel(kind=cfg.covariance_kind,
                                                length_scale=cfg.length_scale_km,
                                                cutoff=cfg.cutoff_km)

    # baseline throughput is the seasonal trough arrival rate: a policy that
    # serves what arrives satisfies the floor at every phase of the day
    trough = (sim_config.base_arrival_rate
              * (1.0 - sim_config.daily_amplitude)
              * (1.0 - sim_config.weekly_amplitude))
    constraints = ConstraintSpec(baseline_throughput=max(trough, 1e-6))

    state_dim = 7 * sim_config.n_intersections + 4
    partial = PipelineComponents(
        config=cfg, sim_config=sim_config, predictor=predictor, ledger=ledger,
        scorer=scorer, trimmed=trimmed, coverage_map=cmap, cov_model=cov_model,
        cell_coords=cell_coords, ensemble=None, epsilon_model=float("nan"),
        lyapunov=_lyapunov_for(sim_config, state_dim), constraints=constraints,
        l_bar=float("nan"), j_bar=float("nan"))

    states, actions, next_states = collect_transitions(
        sim_config, partial, n_steps=cfg.world_model_steps, seed=seed + 1)
    n_fit = int(0.75 * states.shape[0])
    ensemble = fit_world_ensemble(states[:n_fit], actions[:n_fit],
                                  next_states[:n_fit], n_members=cfg.n_members,
                                  seed=seed + 2)
    eps_model = model_error(ensemble, states[n_fit:], actions[n_fit:],
                            next_states[n_fit:])
    radius = float(np.linalg.norm(states, axis=1).max()) * 1.5 + 1.0
    l_bar, j_bar = lipschitz_bounds(partial.lyapunov, ensemble.state_jacobians(),
                                    radius)

    partial.ensemble = ensemble
    partial.epsilon_model = eps_model
    partial.l_bar = l_bar
    partial.j_bar = j_bar
    return partial, dataset


@dataclass
class SimTrajectory:
    """Closed-loop record: per-step state summaries, actions, rewards, d_C, L."""

    queues: np.ndarray = field(repr=False)
    waits: np.ndarray = field(repr=False)
    throughput: np.ndarray = field(repr=False)
    actions: np.ndarray = field(repr=False)
    rewards: np.ndarray = field(repr=False)
    violations: np.ndarray = field(repr=False)
    lyapunov: np.ndarray = field(repr=False)
    states: np.ndarray = field(repr=False)
    mu_int: np.ndarray = field(repr=False, default=None)
    sigma_int: np.ndarray = field(repr=False, default=None)
    p_int: np.ndarray = field(repr=False, default=None)
    flags: np.ndarray = field(repr=False, default=None)


def replace_ledger(components):
    """Shallow component copy with an independent ledger (per-run ACI state)."""
    clone = dataclasses.replace(components) if dataclasses.is_dataclass(
        components) else components
    clone.ledger = components.ledger.clone()
    return clone


def make_policy(name, sim_config, seed=0):
    n = sim_config.n_intersections
    if name == "greedy":
        return GreedyPressurePolicy(n, queue_ref=sim_config.service_rate)
    if name == "random":
        return RandomPolicy(n)
    raise ValueError(f"unknown policy {name!r}")


class LoopRunner:
    """Stateful per-tick execution of the full per-step pipeline."""

    def __init__(self, components, policy, use_filter, seed,
                 exploration_params=None):
        comp = replace_ledger(components)
        self.comp = comp
        cfg = comp.config
        self.sim = sim.init_grid(replace(comp.sim_config, seed=seed))
        self.rng = np.random.default_rng(np.random.SeedSequence((seed, 7)))
        self.filter = SafetyFilter(
            policy, comp.ensemble, comp.lyapunov, comp.violation_from_state,
            bounds=(np.full(comp.n_intersections, cfg.min_green),
                    np.ones(comp.n_intersections)),
            kappa=cfg.kappa, delta_slack=cfg.delta_slack, enabled=use_filter,
            exploration=cfg.exploration,
            exploration_params=exploration_params or ExplorationParams(
                weights=np.array([0.5, -0.5, 0.5]), bias=-3.0))
        self.history = []
        self.prev_mu = None
        self.prev_sigma = None
        self.prev_intervals = None
        self.prev_p_bar = 1.0
        self.sigma_model_bar = 0.0
        self.action = np.full(comp.n_intersections, 0.5)
        self.last_flags = np.zeros(comp.n_intersections, dtype=np.int64)
        self._warmup(cfg.window)

    def _warmup(self, n_steps):
        for _ in range(n_steps):
            obs, _ = self.sim.step(self.action)
            self.history.append(obs)

    def forecast(self):
        window = np.stack(self.history[-self.comp.config.window:], axis=0)
        mu, sigma = self.comp.predictor.predict(window.T)
        return mu[:, 0], sigma[:, 0]

    def tick(self):
        """One control tick; returns the per-step record dict."""
        comp, cfg = self.comp, self.comp.config

        obs, truth = self.sim.step(self.action)
        self.history.append(obs)

        # score the realized observation against the previous forecast
        if self.prev_mu is not None:
            z = anomaly.normalize_residuals(obs, self.prev_mu, self.prev_sigma)
            pvals = anomaly.conformal_pvalue(comp.trimmed, comp.scorer.score(z))
            step_field = anomaly.detect_step(pvals, cfg.fdr_alpha, procedure="by")
            miss = ((obs < self.prev_intervals.lower)
                    | (obs > self.prev_intervals.upper)).astype(float)
            labels = comp.ledger.clusters.labels
            errs = np.full(comp.ledger.clusters.k, np.nan)
            for k in range(comp.ledger.clusters.k):
                members = labels == k
                if members.any():
                    errs[k] = miss[members].mean()
            comp.ledger.record_errors(errs)
        else:
            pvals = np.ones(obs.shape[0])
            step_field = anomaly.detect_step(pvals, cfg.fdr_alpha, procedure="by")

        mu, sigma = self.forecast()
        bundle = conformal.ForecastBundle(mu=mu, sigma=sigma,
                                          clusters=comp.ledger.clusters.labels)
        intervals = conformal.build_intervals(bundle, comp.ledger)

        mu_int = aggregation.aggregate_mean(mu, comp.coverage_map)
        sigma_int = aggregation.aggregate_variance(
            sigma, comp.coverage_map, comp.cov_model, comp.cell_coords)
        p_int = aggregation.aggregate_pvalues(pvals, comp.coverage_map,
                                              rule=cfg.pvalue_rule)
        flags = (comp.coverage_map.weights @ step_field.reject > 0).astype(np.int64)

        st = self.sim.state
        local = comp.local_block(st.queues, st.waits, st.throughput)
        clock = aggregation.cyclic_clock(st.clock, comp.sim_config.steps_per_day)
        state = aggregation.assemble_state(local, mu_int, sigma_int, p_int,
                                           flags, clock)
        s_vec = state.vector

        d_c = comp.violation_from_state(s_vec)
        l_val = lyapunov_value(s_vec, comp.lyapunov)
        obs_dict = {
            "queues": st.queues, "waits": st.waits, "throughput": st.throughput,
            "sigma_forecast": float(sigma_int.mean()),
            "p_anomaly": float(p_int.mean()),
            "sigma_model": self.sigma_model_bar,
        }
        next_action, _ = self.filter.act(s_vec, obs_dict, self.rng)
        if comp.ensemble is not None:
            _, sig_w = ensemble_predict(comp.ensemble, s_vec, next_action)
            self.sigma_model_bar = float(sig_w.mean())

        p_bar = float(p_int.mean())
        r_traffic = (cfg.reward.throughput_gain * float(st.throughput.mean())
                     - cfg.reward.queue_cost * float(st.queues.mean())
                     - cfg.reward.wait_cost * float(st.waits.mean()))
        reward = anomaly_reward(r_traffic, self.prev_p_bar, p_bar,
                                float(sigma_int.mean()), d_c, cfg.reward)

        record = {
            "state": s_vec, "action": self.action.copy(), "reward": reward,
            "d_c": d_c, "lyapunov": l_val, "queues": st.queues.copy(),
            "waits": st.waits.copy(), "throughput": st.throughput.copy(),
            "pvalues": pvals, "reject": step_field.reject, "truth": truth,
            "mu_int": mu_int, "sigma_int": sigma_int, "p_int": p_int,
            "flags": flags, "intervals": intervals, "obs": obs,
        }
        self.prev_mu, self.prev_sigma = mu, sigma
        self.prev_intervals = intervals
        self.prev_p_bar = p_bar
        self.action = next_action
        return record


def run_closed_loop(components, policy_name="greedy", use_filter=True,
                    n_steps=EPISODE_STEPS, seed=0, episode_steps=EPISODE_STEPS):
    """Run the wired loop; returns (SimTrajectory, metrics dict)."""
    policy = make_policy(policy_name, components.sim_config, seed)
    runner = LoopRunner(components, policy, use_filter, seed)
    records = [runner.tick() for _ in range(n_steps)]

    traj = SimTrajectory(
        queues=np.stack([r["queues"] for r in records]),
        waits=np.stack([r["waits"] for r in records]),
        throughput=np.stack([r["throughput"] for r in records]),
        actions=np.stack([r["action"] for r in records]),
        rewards=np.array([r["reward"] for r in records]),
        violations=np.array([r["d_c"] for r in records]),
        lyapunov=np.array([r["lyapunov"] for r in records]),
        states=np.stack([r["state"] for r in records]),
        mu_int=np.stack([r["mu_int"] for r in records]),
        sigma_int=np.stack([r["sigma_int"] for r in records]),
        p_int=np.stack([r["p_int"] for r in records]),
        flags=np.stack([r["flags"] for r in records]),
    )
    metrics = trajectory_metrics(traj, episode_steps)
    return traj, metrics


def trajectory_metrics(traj, episode_steps=EPISODE_STEPS):
    """Safety-percentage, violations/episode, Lyapunov decrease rate, reward."""
    n_steps = traj.rewards.shape[0]
    n_episodes = max(n_steps // episode_steps, 1)
    violating = traj.violations > 0
    per_episode = [violating[e * episode_steps:(e + 1) * episode_steps].sum()
                   for e in range(n_episodes)]
    per_episode = np.asarray(per_episode, dtype=float)
    decrease = (float(np.mean(traj.lyapunov[1:] < traj.lyapunov[:-1]))
                if n_steps > 1 else 0.0)
    return {
        "steps": int(n_steps),
        "episodes": int(n_episodes),
        "mean_reward": float(traj.rewards.mean()),
        "violations_per_episode": float(per_episode.mean()),
        "violation_steps": int(violating.sum()),
        "safety_pct": float(100.0 * np.mean(per_episode == 0)),
        "rho_lyapunov": decrease,
        "mean_d_c": float(traj.violations.mean()),
    }


def collect_transitions(sim_config, components, n_steps, seed):
    """Random-policy rollout through the wiring, recording (s, a, s') triples."""
    policy = make_policy("random", sim_config, seed)
    runner = LoopRunner(components, policy, use_filter=False, seed=seed)
    records = [runner.tick() for _ in range(n_steps + 1)]
    states = np.stack([r["state"] for r in records])
    # action stored at step t is the one that produced state t from state t-1
    actions = np.stack([r["action"] for r in records])
    return states[:-1], actions[1:], states[1:]


def certify_pipeline(components, policy_name="greedy", rollout_steps=EPISODE_STEPS,
                     max_rounds=3, seed=0):
    """Iterative certificate for the wired pipeline under the filtered policy."""

    def rollout(round_index):
        traj, _ = run_closed_loop(components, policy_name=policy_name,
                                  use_filter=True, n_steps=rollout_steps,
                                  seed=seed + round_index)
        mean_norm = float(np.linalg.norm(traj.states, axis=1).mean())
        return float(traj.violations.mean()), mean_norm

    cfg = components.config
    return iterative_certificate(
        rollout, components.epsilon_model, components.l_bar, components.j_bar,
        cfg.delta_slack, cfg.kappa, max_rounds=max_rounds)
