"""Deterministic toy continuous-control environments.

Two environments are provided, both as pure functions of ``(state, action)``:

``pendulum``
    Inverted pendulum with state ``(cos θ, sin θ, θ̇)`` and a single torque
    action. ``θ = 0`` is the upright equilibrium. The angle is integrated
    with explicit Euler (``θ' = θ + dt·θ̇``, ``θ̇' = θ̇ + dt·(g/l·sin θ + u)``),
    the angular velocity is clipped to ``±max_speed``. Reward is
    ``-(θ² + 0.1·θ̇² + 0.001·u²)`` with ``θ`` wrapped to ``(-π, π]``.

``hopper_lite``
    A point "hopper" with state ``(z, ẋ, ż)`` and a two-dimensional thrust
    ``(vertical, forward)``. Height follows a damped spring around
    ``z_rest`` plus vertical thrust; forward thrust accelerates ``ẋ`` and
    costs height (``-sink·a_x²``). Reward is ``ẋ - 0.1·‖a‖² + 1{z healthy}``
    evaluated on the current state; the episode terminates when the next
    height leaves the closed healthy band.

Initial states are drawn uniformly in a small box around the rest state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ENV_IDS = ("pendulum", "hopper_lite")


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    horizon: int
    gamma: float
    action_low: tuple[float, ...]
    action_high: tuple[float, ...]
    dt: float
    constants: dict = field(default_factory=dict)
    state_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.state_dim < 2:
            raise ValueError("state_dim must be >= 2")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
            raise ValueError("action bounds must match action_dim")
        if any(lo >= hi for lo, hi in zip(self.action_low, self.action_high)):
            raise ValueError("action_low must be < action_high")

    @property
    def low(self) -> np.ndarray:
        return np.asarray(self.action_low, dtype=np.float64)

    @property
    def high(self) -> np.ndarray:
        return np.asarray(self.action_high, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "horizon": self.horizon,
            "gamma": self.gamma,
            "action_low": list(self.action_low),
            "action_high": list(self.action_high),
            "dt": self.dt,
            "constants": dict(self.constants),
            "state_names": list(self.state_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        return cls(
            name=d["name"],
            state_dim=int(d["state_dim"]),
            action_dim=int(d["action_dim"]),
            horizon=int(d["horizon"]),
            gamma=float(d["gamma"]),
            action_low=tuple(float(v) for v in d["action_low"]),
            action_high=tuple(float(v) for v in d["action_high"]),
            dt=float(d["dt"]),
            constants=dict(d.get("constants", {})),
            state_names=tuple(d.get("state_names", ())),
        )


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    reward: float
    done: bool


PENDULUM = EnvSpec(
    name="pendulum",
    state_dim=3,
    action_dim=1,
    horizon=200,
    gamma=0.99,
    action_low=(-2.0,),
    action_high=(2.0,),
    dt=0.05,
    constants={"g_over_l": 10.0, "max_speed": 8.0, "init_angle": 0.1, "init_speed": 0.1},
    state_names=("cos_theta", "sin_theta", "theta_dot"),
)

HOPPER_LITE = EnvSpec(
    name="hopper_lite",
    state_dim=3,
    action_dim=2,
    horizon=400,
    gamma=0.99,
    action_low=(-1.0, -1.0),
    action_high=(1.0, 1.0),
    dt=0.05,
    constants={
        "z_rest": 1.2,
        "spring": 4.0,
        "damping": 0.4,
        "thrust_z": 3.0,
        "thrust_x": 2.0,
        "drag": 0.5,
        "sink": 2.0,
        "healthy_low": 0.8,
        "healthy_high": 1.6,
        "init_noise": 0.005,
    },
    state_names=("z", "x_dot", "z_dot"),
)

_SPECS = {"pendulum": PENDULUM, "hopper_lite": HOPPER_LITE}


def get_spec(env_id: str) -> EnvSpec:
    try:
        return _SPECS[env_id]
    except KeyError:
        raise ValueError(f"unknown env_id {env_id!r}; expected one of {ENV_IDS}") from None


def pendulum_state(theta, theta_dot) -> np.ndarray:
    """Build pendulum observations from angles and angular velocities."""
    theta = np.asarray(theta, dtype=np.float64)
    theta_dot = np.asarray(theta_dot, dtype=np.float64)
    return np.stack([np.cos(theta), np.sin(theta), theta_dot], axis=-1)


def reset(env_id: str, seed: int) -> np.ndarray:
    """Draw an initial state from the documented ``μ0`` of ``env_id``."""
    spec = get_spec(env_id)
    rng = np.random.default_rng(seed)
    c = spec.constants
    if env_id == "pendulum":
        theta = rng.uniform(-c["init_angle"], c["init_angle"])
        theta_dot = rng.uniform(-c["init_speed"], c["init_speed"])
        return pendulum_state(theta, theta_dot)
    noise = rng.uniform(-c["init_noise"], c["init_noise"], size=3)
    return np.array([c["z_rest"], 0.0, 0.0]) + noise


def _check_finite(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite {name}")


def _pendulum_step(spec: EnvSpec, s: np.ndarray, a: np.ndarray):
    c = spec.constants
    theta = np.arctan2(s[..., 1], s[..., 0])
    theta_dot = s[..., 2]
    u = a[..., 0]
    reward = -(theta**2 + 0.1 * theta_dot**2 + 0.001 * u**2)
    new_theta = theta + spec.dt * theta_dot
    new_theta_dot = theta_dot + spec.dt * (c["g_over_l"] * np.sin(theta) + u)
    new_theta_dot = np.clip(new_theta_dot, -c["max_speed"], c["max_speed"])
    s_next = pendulum_state(new_theta, new_theta_dot)
    done = np.zeros(s_next.shape[:-1], dtype=bool)
    return s_next, reward, done


def _hopper_healthy(spec: EnvSpec, z: np.ndarray) -> np.ndarray:
    c = spec.constants
    return (z >= c["healthy_low"]) & (z <= c["healthy_high"])


def _hopper_step(spec: EnvSpec, s: np.ndarray, a: np.ndarray):
    c = spec.constants
    z, x_dot, z_dot = s[..., 0], s[..., 1], s[..., 2]
    a_z, a_x = a[..., 0], a[..., 1]
    reward = x_dot - 0.1 * np.sum(a**2, axis=-1) + _hopper_healthy(spec, z).astype(np.float64)
    z_acc = c["spring"] * (c["z_rest"] - z) - c["damping"] * z_dot + c["thrust_z"] * a_z - c["sink"] * a_x**2
    x_acc = c["thrust_x"] * a_x - c["drag"] * x_dot
    s_next = np.stack(
        [z + spec.dt * z_dot, x_dot + spec.dt * x_acc, z_dot + spec.dt * z_acc], axis=-1
    )
    done = ~_hopper_healthy(spec, s_next[..., 0])
    return s_next, reward, done


def step_batch(env_id: str, states: np.ndarray, actions: np.ndarray):
    """Vectorised transition over leading axes.

    Returns ``(next_states, rewards, dones)``. Actions are clipped to the
    action bounds before use.
    """
    spec = get_spec(env_id)
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    _check_finite("state", states)
    _check_finite("action", actions)
    if states.shape[-1] != spec.state_dim:
        raise ValueError(f"state has {states.shape[-1]} dims, expected {spec.state_dim}")
    if actions.shape[-1] != spec.action_dim:
        raise ValueError(f"action has {actions.shape[-1]} dims, expected {spec.action_dim}")
    actions = np.clip(actions, spec.low, spec.high)
    if env_id == "pendulum":
        return _pendulum_step(spec, states, actions)
    return _hopper_step(spec, states, actions)


def step(env_id: str, state, action) -> StepResult:
    s = np.asarray(state, dtype=np.float64).reshape(-1)
    a = np.atleast_1d(np.asarray(action, dtype=np.float64)).reshape(-1)
    s_next, r, d = step_batch(env_id, s, a)
    return StepResult(next_state=s_next, reward=float(r), done=bool(d))


def termination_batch(env_id: str, states: np.ndarray) -> np.ndarray:
    spec = get_spec(env_id)
    states = np.asarray(states, dtype=np.float64)
    if env_id == "pendulum":
        return np.zeros(states.shape[:-1], dtype=bool)
    return ~_hopper_healthy(spec, states[..., 0])


def termination_fn(env_id: str, state) -> bool:
    """True when ``state`` is terminal. The hopper healthy band is closed."""
    return bool(termination_batch(env_id, np.asarray(state, dtype=np.float64)))


def random_policy(env_id: str):
    """Uniform random policy ``(state, rng) -> action`` over the action box."""
    spec = get_spec(env_id)
    low, high = spec.low, spec.high

    def policy(state, rng):
        shape = np.shape(state)[:-1] + (spec.action_dim,)
        return rng.uniform(low, high, size=shape)

    return policy


def batch_rollout_returns(
    env_id: str, policy, n_episodes: int, seed: int, horizon: int | None = None, start_states=None
):
    """Undiscounted returns of ``policy`` over ``n_episodes`` run in lockstep.

    ``start_states`` (one row per episode) replaces the seeded resets.
    """
    spec = get_spec(env_id)
    horizon = spec.horizon if horizon is None else horizon
    seeds = np.random.SeedSequence(seed).spawn(n_episodes + 1)
    if start_states is None:
        states = np.stack([reset(env_id, int(ss.generate_state(1)[0])) for ss in seeds[:-1]])
    else:
        states = np.array(start_states, dtype=np.float64).reshape(n_episodes, spec.state_dim)
    rng = np.random.default_rng(seeds[-1])
    returns = np.zeros(n_episodes)
    alive = np.ones(n_episodes, dtype=bool)
    for _ in range(horizon):
        actions = policy(states, rng)
        s_next, r, d = step_batch(env_id, states, actions)
        returns += np.where(alive, r, 0.0)
        alive &= ~d
        states = s_next
        if not alive.any():
            break
    return returns


def wrap_angle(theta):
    return (np.asarray(theta) + math.pi) % (2 * math.pi) - math.pi
