"""Closed-loop systems, trajectory planning, safe sets and episode rollout.

Two built-in desk-scale systems are provided, each as a discrete-time
closed-loop plant (tracking controller baked into the step rule):

* ``point-mass`` — planar double integrator (state ``[px, py, vx, vy]``,
  output = position) with a PD tracking controller.
* ``cart-pole``  — classic cart-pole (state ``[x, xdot, theta, thetadot]``,
  output = cart position) with an LQR tracking controller designed on the
  nominal plant.

The ``real`` variant of a system differs from ``nominal`` by a configured
reality gap: heavier body/link mass, added velocity friction, and additive
observation noise on the state the controller measures. All three effects
scale linearly with the ``gap`` parameter, so ``gap=0`` reproduces the
nominal plant exactly.

Disturbance vectors passed to the step rule concatenate a random impulse
(applied to velocities) with the per-step observation noise, so a step is
a pure function of (state, desired point, disturbance).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace, asdict
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from . import jsonio

Array = np.ndarray


class UnknownSystemError(ValueError):
    pass


@dataclass(frozen=True)
class SafeSet:
    """Axis-aligned bounds on a subset of state entries (inclusive)."""

    indices: tuple[int, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        if not (len(self.indices) == len(self.lower) == len(self.upper)):
            raise ValueError("SafeSet fields must have equal length")
        if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("SafeSet requires lower <= upper componentwise")

    def to_dict(self) -> dict:
        return {"indices": list(self.indices), "lower": list(self.lower),
                "upper": list(self.upper)}

    @staticmethod
    def from_dict(d: dict) -> "SafeSet":
        return SafeSet(tuple(d["indices"]), tuple(d["lower"]), tuple(d["upper"]))


def is_safe(state: Array, safe_set: SafeSet) -> bool:
    """True iff every monitored state entry lies within its bounds.

    Boundary values count as safe; non-finite entries count as unsafe.
    """
    vals = np.asarray(state, dtype=float)[list(safe_set.indices)]
    lo = np.asarray(safe_set.lower)
    hi = np.asarray(safe_set.upper)
    return bool(np.all(np.isfinite(vals)) and np.all(vals >= lo) and np.all(vals <= hi))


def plan_trajectory(start: Array, goal: Array, T: int) -> Array:
    """Linear interpolation from start to goal with T equally spaced points."""
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    if not (np.all(np.isfinite(start)) and np.all(np.isfinite(goal))):
        raise ValueError("plan_trajectory requires finite start and goal")
    if T < 1:
        raise ValueError("planning horizon T must be >= 1")
    if T == 1:
        return start[None, :].copy()
    alphas = np.arange(T, dtype=float) / (T - 1)
    return start[None, :] + alphas[:, None] * (goal - start)[None, :]


# ---------------------------------------------------------------------------
# systems


@dataclass(frozen=True)
class DisturbanceModel:
    """Per-step impulse generator: with probability ``prob`` draw a uniform
    impulse of magnitude <= ``mag`` per component, else zero."""

    prob: float = 0.0
    mag: float = 0.0


@dataclass(frozen=True)
class PointMassParams:
    dt: float = 0.02
    mass: float = 1.0
    kp: float = 8.0
    kd: float = 4.0
    u_max: float = 10.0
    gap: float = 1.0               # scales the reality-gap effects (real variant)
    gap_mass_factor: float = 0.25  # real mass = mass * (1 + factor*gap)
    gap_friction: float = 0.8      # viscous velocity friction coefficient at gap=1
    gap_obs_noise: float = 0.02    # controller-measurement noise std at gap=1
    disturbance: DisturbanceModel = field(default_factory=DisturbanceModel)
    init_offset: bool = False
    init_pos_range: float = 0.4
    init_vel_range: float = 0.5
    goal_range: float = 0.75
    safe_pos: float = 1.0


@dataclass(frozen=True)
class CartPoleParams:
    dt: float = 0.02
    m_cart: float = 1.0
    m_pole: float = 0.1
    length: float = 0.5            # half-length of the pole
    gravity: float = 9.81
    u_max: float = 12.0
    lqr_q: tuple[float, float, float, float] = (6.0, 1.0, 60.0, 6.0)
    lqr_r: float = 1.0
    gap: float = 1.0
    gap_mass_factor: float = 0.25  # real pole mass = m_pole * (1 + factor*gap)
    gap_cart_friction: float = 0.6
    gap_pole_friction: float = 0.004
    gap_obs_noise: float = 0.004
    disturbance: DisturbanceModel = field(default_factory=DisturbanceModel)
    init_offset: bool = False
    init_offset_scale: tuple[float, float, float, float] = (0.2, 0.2, 0.03, 0.2)
    goal_range: float = 1.4
    safe_x: float = 2.0
    safe_angle: float = 0.25


class ClosedLoopSystem:
    """A steppable closed-loop plant. Immutable after construction; safe to
    share read-only between concurrent rollouts."""

    name: str
    variant: str
    n_s: int
    n_z: int
    n_imp: int  # impulse components of the disturbance vector

    @property
    def n_w(self) -> int:
        return self.n_imp + self.n_s

    @property
    def dt(self) -> float:
        return self.params.dt

    def _gap(self) -> float:
        return self.params.gap if self.variant == "real" else 0.0

    def output(self, state: Array) -> Array:
        raise NotImplementedError

    def step(self, state: Array, desired: Array, disturbance: Array) -> Array:
        raise NotImplementedError

    def sample_disturbance(self, rng: np.random.Generator) -> Array:
        """Impulse + observation-noise vector. Always consumes the same
        number of draws so nominal/real streams stay aligned."""
        d = self.params.disturbance
        u = rng.random()
        imp = rng.uniform(-d.mag, d.mag, self.n_imp)
        if u >= d.prob:
            imp[:] = 0.0
        noise = rng.standard_normal(self.n_s) * (self._gap() * self._obs_noise())
        return np.concatenate([imp, noise])

    def _obs_noise(self) -> float:
        raise NotImplementedError

    def sample_initial_state(self, rng: np.random.Generator) -> Array:
        raise NotImplementedError

    def sample_goal(self, rng: np.random.Generator) -> Array:
        raise NotImplementedError

    def default_safe_set(self) -> SafeSet:
        raise NotImplementedError

    def _check_step_args(self, state: Array, desired: Array, disturbance: Array):
        if len(state) != self.n_s:
            raise ValueError(f"state dimension {len(state)} != n_s={self.n_s}")
        if len(desired) != self.n_z:
            raise ValueError(f"desired dimension {len(desired)} != n_z={self.n_z}")
        if len(disturbance) != self.n_w:
            raise ValueError(f"disturbance dimension {len(disturbance)} != n_w={self.n_w}")

    def config_dict(self) -> dict:
        d = asdict(self.params)
        d["disturbance"] = asdict(self.params.disturbance)
        return {"name": self.name, "variant": self.variant, "params": d}


class PointMass(ClosedLoopSystem):
    name = "point-mass"
    n_s = 4
    n_z = 2
    n_imp = 2

    def __init__(self, variant: str = "nominal", params: Optional[PointMassParams] = None):
        if variant not in ("nominal", "real"):
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.params = params or PointMassParams()

    def _obs_noise(self) -> float:
        return self.params.gap_obs_noise

    def output(self, state: Array) -> Array:
        return np.asarray(state, dtype=float)[:2].copy()

    def step(self, state, desired, disturbance):
        self._check_step_args(state, desired, disturbance)
        p = self.params
        g = self._gap()
        state = np.asarray(state, dtype=float)
        imp = np.asarray(disturbance, dtype=float)[:2]
        noise = np.asarray(disturbance, dtype=float)[2:]
        meas = state + noise  # controller measures a noisy state
        force = p.kp * (np.asarray(desired, dtype=float) - meas[:2]) - p.kd * meas[2:]
        force = np.clip(force, -p.u_max, p.u_max)
        mass = p.mass * (1.0 + p.gap_mass_factor * g)
        acc = force / mass - (p.gap_friction * g) * state[2:]
        pos = state[:2] + p.dt * state[2:]
        vel = state[2:] + p.dt * acc + imp
        return np.concatenate([pos, vel])

    def sample_initial_state(self, rng):
        p = self.params
        s = np.zeros(4)
        if p.init_offset:
            s[:2] = rng.uniform(-p.init_pos_range, p.init_pos_range, 2)
            s[2:] = rng.uniform(-p.init_vel_range, p.init_vel_range, 2)
        return s

    def sample_goal(self, rng):
        return rng.uniform(-self.params.goal_range, self.params.goal_range, 2)

    def default_safe_set(self) -> SafeSet:
        b = self.params.safe_pos
        return SafeSet((0, 1), (-b, -b), (b, b))


class CartPole(ClosedLoopSystem):
    name = "cart-pole"
    n_s = 4
    n_z = 1
    n_imp = 1  # impulse on pole angular velocity

    def __init__(self, variant: str = "nominal", params: Optional[CartPoleParams] = None):
        if variant not in ("nominal", "real"):
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.params = params or CartPoleParams()
        self._K = self._design_lqr()

    def _obs_noise(self) -> float:
        return self.params.gap_obs_noise

    def _accelerations(self, state: Array, u: float, gap: float) -> tuple[float, float]:
        p = self.params
        x, xd, th, thd = state
        m_p = p.m_pole * (1.0 + p.gap_mass_factor * gap)
        m_total = p.m_cart + m_p
        mu_c = p.gap_cart_friction * gap
        mu_p = p.gap_pole_friction * gap
        sin, cos = math.sin(th), math.cos(th)
        temp = (u + m_p * p.length * thd * thd * sin - mu_c * xd) / m_total
        th_acc = (p.gravity * sin - cos * temp - mu_p * thd / (m_p * p.length)) / (
            p.length * (4.0 / 3.0 - m_p * cos * cos / m_total))
        x_acc = temp - m_p * p.length * th_acc * cos / m_total
        return x_acc, th_acc

    def _design_lqr(self) -> Array:
        # gains always come from the nominal plant: the same controller is
        # deployed on both variants, which is what creates the reality gap
        def f(state, u):
            x_acc, th_acc = self._accelerations(state, u, gap=0.0)
            return np.array([state[1], x_acc, state[3], th_acc])

        eps = 1e-6
        s0 = np.zeros(4)
        A = np.zeros((4, 4))
        for j in range(4):
            dp = np.zeros(4)
            dp[j] = eps
            A[:, j] = (f(s0 + dp, 0.0) - f(s0 - dp, 0.0)) / (2 * eps)
        B = ((f(s0, eps) - f(s0, -eps)) / (2 * eps)).reshape(4, 1)
        Q = np.diag(self.params.lqr_q)
        R = np.array([[self.params.lqr_r]])
        P = scipy.linalg.solve_continuous_are(A, B, Q, R)
        return (np.linalg.solve(R, B.T @ P)).ravel()

    def output(self, state: Array) -> Array:
        return np.asarray(state, dtype=float)[:1].copy()

    def step(self, state, desired, disturbance):
        self._check_step_args(state, desired, disturbance)
        p = self.params
        g = self._gap()
        state = np.asarray(state, dtype=float)
        imp = float(np.asarray(disturbance, dtype=float)[0])
        noise = np.asarray(disturbance, dtype=float)[1:]
        meas = state + noise
        err = meas - np.array([float(desired[0]), 0.0, 0.0, 0.0])
        u = float(np.clip(-self._K @ err, -p.u_max, p.u_max))
        x_acc, th_acc = self._accelerations(state, u, g)
        x = state[0] + p.dt * state[1]
        xd = state[1] + p.dt * x_acc
        th = state[2] + p.dt * state[3]
        thd = state[3] + p.dt * th_acc + imp
        return np.array([x, xd, th, thd])

    def sample_initial_state(self, rng):
        p = self.params
        s = np.zeros(4)
        if p.init_offset:
            s = rng.uniform(-1.0, 1.0, 4) * np.asarray(p.init_offset_scale)
        return s

    def sample_goal(self, rng):
        return rng.uniform(-self.params.goal_range, self.params.goal_range, 1)

    def default_safe_set(self) -> SafeSet:
        p = self.params
        return SafeSet((0, 2), (-p.safe_x, -p.safe_angle), (p.safe_x, p.safe_angle))


_SYSTEMS = {"point-mass": (PointMass, PointMassParams),
            "cart-pole": (CartPole, CartPoleParams)}


def make_system(name: str, variant: str = "nominal", **overrides) -> ClosedLoopSystem:
    """Construct a built-in system. ``overrides`` replace parameter fields;
    ``disturbance`` may be given as a dict with ``prob``/``mag``."""
    if name not in _SYSTEMS:
        raise UnknownSystemError(
            f"unknown system {name!r}; available: {sorted(_SYSTEMS)}")
    cls, params_cls = _SYSTEMS[name]
    dist = overrides.pop("disturbance", None)
    params = params_cls(**{k: (tuple(v) if isinstance(v, list) else v)
                           for k, v in overrides.items()})
    if dist is not None:
        if isinstance(dist, dict):
            dist = DisturbanceModel(**dist)
        params = replace(params, disturbance=dist)
    return cls(variant=variant, params=params)


def system_from_config(cfg: dict, variant: Optional[str] = None) -> ClosedLoopSystem:
    """Rebuild a system from a ``config_dict()``-shaped mapping."""
    return make_system(cfg["name"], variant or cfg["variant"], **cfg["params"])


def step_closed_loop(system: ClosedLoopSystem, state: Array, desired: Array,
                     disturbance: Array) -> Array:
    """One deterministic step of the closed-loop dynamics."""
    return system.step(state, desired, disturbance)


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    """A single rollout. ``states`` holds s_0..s_{T'}, ``outputs`` the
    corresponding measured outputs; ``termination_index`` T' is the index of
    the first unsafe state, or T when the episode ran to completion."""

    system: str
    variant: str
    seed: tuple[int, int]
    initial_state: Array
    goal: Array
    desired: Array          # (T, n_z)
    states: Array           # (T'+1, n_s)
    outputs: Array          # (T'+1, n_z)
    termination_index: int
    safe: bool
    disturbances: Array     # (T', n_w)
    blowup_step: Optional[int] = None

    @property
    def T(self) -> int:
        return len(self.desired)

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "variant": self.variant,
            "seed": list(self.seed),
            "initial_state": self.initial_state,
            "goal": self.goal,
            "desired": self.desired,
            "states": self.states,
            "outputs": self.outputs,
            "termination_index": self.termination_index,
            "safe": self.safe,
            "disturbances": self.disturbances,
            "blowup_step": self.blowup_step,
        }

    @staticmethod
    def from_dict(d: dict) -> "Episode":
        return Episode(
            system=d["system"], variant=d["variant"], seed=tuple(d["seed"]),
            initial_state=np.asarray(d["initial_state"], dtype=float),
            goal=np.asarray(d["goal"], dtype=float),
            desired=np.asarray(d["desired"], dtype=float),
            states=np.asarray(d["states"], dtype=float),
            outputs=np.asarray(d["outputs"], dtype=float),
            termination_index=int(d["termination_index"]),
            safe=bool(d["safe"]),
            disturbances=np.asarray(d["disturbances"], dtype=float).reshape(
                len(d["disturbances"]), -1),
            blowup_step=d.get("blowup_step"),
        )


def rollout_episode(system: ClosedLoopSystem, safe_set: SafeSet, T: int,
                    seed, *, goal_sampler: Optional[Callable] = None,
                    initial_state: Optional[Array] = None,
                    desired: Optional[Array] = None,
                    disturbance_override: Optional[Array] = None) -> Episode:
    """Roll one episode: sample initial state and goal, plan, then step until
    the safe set is left or T steps complete.

    ``seed`` may be an int or a (base, index) pair. The optional overrides
    pin the initial state / desired trajectory / disturbance sequence, which
    is how nominal replays of real episodes are produced.
    """
    if T < 1:
        raise ValueError("episode length T must be >= 1")
    seed_pair = tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed), 0)
    rng = np.random.default_rng(np.random.SeedSequence(seed_pair))

    s0 = system.sample_initial_state(rng)
    goal = system.sample_goal(rng) if goal_sampler is None else np.asarray(
        goal_sampler(rng), dtype=float)
    if initial_state is not None:
        s0 = np.asarray(initial_state, dtype=float).copy()
    if desired is not None:
        plan = np.asarray(desired, dtype=float).copy()
        if len(plan) != T:
            raise ValueError("provided desired trajectory length != T")
        goal = plan[-1].copy()
    else:
        plan = plan_trajectory(system.output(s0), goal, T)

    states = [s0]
    outputs = [system.output(s0)]
    dists: list[Array] = []
    blowup: Optional[int] = None

    safe = is_safe(s0, safe_set)
    t_term = 0
    if safe:
        t_term = T
        for k in range(T):
            if disturbance_override is not None:
                w = np.asarray(disturbance_override[k], dtype=float)
                system.sample_disturbance(rng)  # keep the stream aligned
            else:
                w = system.sample_disturbance(rng)
            s_next = system.step(states[-1], plan[k], w)
            dists.append(w)
            states.append(s_next)
            outputs.append(system.output(s_next))
            if not np.all(np.isfinite(s_next)):
                blowup = k + 1
                safe = False
                t_term = k + 1
                break
            if not is_safe(s_next, safe_set):
                safe = False
                t_term = k + 1
                break

    return Episode(
        system=system.name, variant=system.variant, seed=seed_pair,
        initial_state=s0, goal=goal, desired=plan,
        states=np.asarray(states), outputs=np.asarray(outputs),
        termination_index=t_term, safe=safe,
        disturbances=np.asarray(dists).reshape(len(dists), -1),
        blowup_step=blowup)


def rollout_batch(system: ClosedLoopSystem, safe_set: SafeSet, T: int,
                  n_episodes: int, base_seed: int,
                  goal_sampler: Optional[Callable] = None) -> list[Episode]:
    """Independent episodes with per-episode derived seeds (order-free)."""
    return [rollout_episode(system, safe_set, T, (base_seed, i),
                            goal_sampler=goal_sampler)
            for i in range(n_episodes)]


def save_episodes(episodes: Sequence[Episode], system: ClosedLoopSystem,
                  T: int, base_seed: int, path) -> None:
    doc = {
        "config": {
            "system": system.name,
            "variant": system.variant,
            "T": T,
            "dt": system.dt,
            "seed": base_seed,
            "episodes": len(episodes),
            "system_config": system.config_dict(),
            "safe_set": system.default_safe_set().to_dict(),
        },
        "episodes": [ep.to_dict() for ep in episodes],
    }
    jsonio.dump_file(doc, path)


def load_episodes(path) -> tuple[dict, list[Episode]]:
    doc = jsonio.load_file(path)
    if "episodes" not in doc or "config" not in doc:
        raise ValueError("episode file missing 'config'/'episodes' fields")
    return doc["config"], [Episode.from_dict(d) for d in doc["episodes"]]
