"""Synthetic ICU cohort: a partially observed linear-Gaussian patient model.

Each patient carries a latent severity vector ``x`` (``n_latent`` dims,
signed deviations from a healthy state). A prescription ``a`` in {0,1}^K
moves it by ``-dose * a @ effects`` before the patient deteriorates:

    x_{t+1} = growth_i * (x_t - dose * a_t @ effects) + process_noise * xi_t

with ``growth_i`` rising with age. Clinicians see only noisy linear
read-outs of ``x`` (vitals/labs), static demographics and a diagnosis
multi-hot derived from the admission state. The patient survives iff the
RMS severity after the last day is below ``survival_threshold``; the final
day's reward is +15 on survival and -15 on death, every other reward is 0.

All randomness for episode ``i`` comes from a stream keyed on
``(seed, i)`` and is drawn up front, so different treatment policies are
compared on identical patients and identical noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .etl import DEATH_REWARD, SURVIVAL_REWARD, Trajectory
from .tensor import make_rng

STATIC_NAMES = ("age", "gender", "weight", "height", "religion", "language", "marital_status", "ethnicity")

# (i, j, sign_i, sign_j): each medication pushes two latent dims. Pairwise
# cosines are in {-1, -0.5, 0, 0.5}, so a state equal to one effect vector
# is best treated by that medication alone.
_EFFECT_PAIRS = (
    [(0, 1, si, sj) for si in (1, -1) for sj in (1, -1)]
    + [(2, 3, si, sj) for si in (1, -1) for sj in (1, -1)]
    + [(4, 5, si, sj) for si in (1, -1) for sj in (1, -1)]
    + [(1, 2, 1, 1), (1, 2, -1, -1), (3, 4, 1, 1), (3, 4, -1, -1),
       (5, 0, 1, 1), (5, 0, -1, -1), (0, 3, 1, -1), (0, 3, -1, 1)]
)


def default_effects(n_latent: int = 6, n_meds: int = 20) -> np.ndarray:
    if n_latent == 6 and n_meds <= len(_EFFECT_PAIRS):
        E = np.zeros((n_meds, n_latent))
        for k, (i, j, si, sj) in enumerate(_EFFECT_PAIRS[:n_meds]):
            E[k, i] = si / np.sqrt(2.0)
            E[k, j] = sj / np.sqrt(2.0)
        return E
    rng = make_rng(12345, n_latent, n_meds)
    E = rng.normal(size=(n_meds, n_latent))
    return E / np.linalg.norm(E, axis=1, keepdims=True)


@dataclass
class PatientModel:
    n_latent: int = 6
    n_meds: int = 20
    n_ts: int = 11
    n_diseases: int = 12
    min_steps: int = 3
    max_steps: int = 10
    init_scale: float = 1.0
    growth: float = 1.15
    age_growth: float = 0.08
    dose: float = 0.5
    process_noise: float = 0.1
    obs_noise: float = 0.3
    disease_cutoff: float = 0.75
    survival_threshold: float = 0.868   # calibrate_threshold(target=0.8), rounded
    model_seed: int = 0
    effects: Optional[np.ndarray] = None
    obs_matrix: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.effects is None:
            self.effects = default_effects(self.n_latent, self.n_meds)
        self.effects = np.asarray(self.effects, dtype=np.float64)
        if self.obs_matrix is None:
            rng = make_rng(self.model_seed, 7)
            self.obs_matrix = rng.normal(size=(self.n_ts, self.n_latent)) / np.sqrt(self.n_latent)
        self.obs_matrix = np.asarray(self.obs_matrix, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        if self.effects.shape != (self.n_meds, self.n_latent):
            raise ValueError(f"effects must have shape {(self.n_meds, self.n_latent)}")
        if self.obs_matrix.shape != (self.n_ts, self.n_latent):
            raise ValueError(f"obs_matrix must have shape {(self.n_ts, self.n_latent)}")
        if not 1 <= self.min_steps <= self.max_steps:
            raise ValueError("need 1 <= min_steps <= max_steps")
        if self.n_diseases < 2 * self.n_latent:
            raise ValueError("n_diseases must cover two codes per latent dimension")
        for name in ("init_scale", "growth", "dose", "survival_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("process_noise", "obs_noise", "age_growth"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def severity(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(x, axis=-1) / np.sqrt(self.n_latent)

    def growth_rate(self, age: np.ndarray) -> np.ndarray:
        return self.growth + self.age_growth * (np.asarray(age) - 60.0) / 15.0

    def step(self, x: np.ndarray, actions: np.ndarray, growth: np.ndarray, noise: np.ndarray) -> np.ndarray:
        treated = x - self.dose * actions @ self.effects
        return growth[:, None] * treated + self.process_noise * noise

    def observe(self, x: np.ndarray, noise: np.ndarray) -> np.ndarray:
        return x @ self.obs_matrix.T + self.obs_noise * noise

    def diagnose(self, x0: np.ndarray) -> List[List[int]]:
        codes = []
        for row in x0:
            c = [2 * i for i in range(self.n_latent) if row[i] > self.disease_cutoff]
            c += [2 * i + 1 for i in range(self.n_latent) if row[i] < -self.disease_cutoff]
            codes.append(sorted(c))
        return codes


def oracle_action(model: PatientModel, latent: np.ndarray) -> np.ndarray:
    """Greedy severity-minimising prescription for each row of ``latent``.

    Medications are added one at a time, always the one whose effect most
    reduces the remaining severity, until none reduces it further.
    """
    x = np.atleast_2d(np.asarray(latent, dtype=np.float64))
    E = model.dose * model.effects
    sq = np.sum(E * E, axis=1)
    chosen = np.zeros((len(x), model.n_meds))
    residual = x.copy()
    active = np.ones(len(x), dtype=bool)
    for _ in range(model.n_meds):
        benefit = 2.0 * residual @ E.T - sq
        benefit[chosen > 0] = -np.inf
        best = np.argmax(benefit, axis=1)
        gain = benefit[np.arange(len(x)), best]
        active &= gain > 1e-12
        if not active.any():
            break
        rows = np.nonzero(active)[0]
        chosen[rows, best[rows]] = 1.0
        residual[rows] -= E[best[rows]]
    return chosen if np.ndim(latent) > 1 else chosen[0]


@dataclass
class DoctorPolicy:
    """The oracle rule with per-medication corruption.

    Medication ``k``'s bit is replaced, with probability
    ``1 - (1 - p_noise) ** exponent[k]``, by a Bernoulli(``habit[k]``) draw.
    Every bit is exact at ``p_noise = 0`` and fully resampled at 1. A few
    medications are systematically under-used (large exponent, small
    habit); the rest are flipped at random. The default exponents corrupt
    the neglected medications 75% and the others 15% of the time at
    ``p_noise = 0.3``, a mean corruption of 0.3.
    """

    p_noise: float = 0.3
    n_meds: int = 20
    neglected: tuple = (2, 6, 9, 14, 17)
    neglect_exponent: float = 3.887     # log(0.25) / log(0.7)
    base_exponent: float = 0.4557       # log(0.85) / log(0.7)
    neglect_habit: float = 0.05
    exponent: Optional[np.ndarray] = None
    habit: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0.0 <= self.p_noise <= 1.0:
            raise ValueError(f"p_noise must lie in [0, 1], got {self.p_noise}")
        neglected = [k for k in self.neglected if k < self.n_meds]
        if self.exponent is None:
            exponent = np.full(self.n_meds, self.base_exponent)
            exponent[neglected] = self.neglect_exponent
            self.exponent = exponent
        if self.habit is None:
            habit = np.full(self.n_meds, 0.5)
            habit[neglected] = self.neglect_habit
            self.habit = habit
        self.exponent = np.asarray(self.exponent, dtype=np.float64)
        self.habit = np.asarray(self.habit, dtype=np.float64)
        if self.exponent.shape != (self.n_meds,) or self.habit.shape != (self.n_meds,):
            raise ValueError(f"exponent and habit need one entry per medication ({self.n_meds})")
        if np.any(self.exponent <= 0) or np.any((self.habit < 0) | (self.habit > 1)):
            raise ValueError("exponent must be positive and habit within [0, 1]")

    @property
    def corruption(self) -> np.ndarray:
        return 1.0 - (1.0 - self.p_noise) ** self.exponent

    def act(self, oracle: np.ndarray, u_corrupt: np.ndarray, u_habit: np.ndarray) -> np.ndarray:
        resampled = (u_habit < self.habit).astype(np.float64)
        return np.where(u_corrupt < self.corruption, resampled, oracle)


@dataclass
class PolicyView:
    """What a treating policy may look at on day ``t`` (0-based) of every episode.

    Learned policies should use only ``obs``/``static``/``diseases``;
    ``latent`` exists for the oracle and the simulated doctor.
    """

    t: int
    obs: np.ndarray          # (n, t + 1, n_ts)
    static: np.ndarray       # (n, n_static)
    diseases: np.ndarray     # (n, n_diseases) multi-hot
    latent: np.ndarray       # (n, n_latent)
    uniforms: np.ndarray     # (n, K, 2) in [0, 1), policy-private randomness


Policy = Callable[[PolicyView], np.ndarray]


@dataclass
class _Draws:
    x0: np.ndarray
    lengths: np.ndarray
    static: np.ndarray
    process: np.ndarray
    obs: np.ndarray
    uniforms: np.ndarray


def _draw(model: PatientModel, n: int, seed: int) -> _Draws:
    d, T, K = model.n_latent, model.max_steps, model.n_meds
    x0 = np.empty((n, d))
    lengths = np.empty(n, dtype=int)
    static = np.empty((n, len(STATIC_NAMES)))
    process = np.empty((n, T, d))
    obs = np.empty((n, T, model.n_ts))
    uniforms = np.empty((n, T, K, 2))
    for i in range(n):
        rng = make_rng(seed, i)
        x0[i] = model.init_scale * rng.normal(size=d)
        lengths[i] = rng.integers(model.min_steps, model.max_steps + 1)
        gender = float(rng.integers(0, 2))
        static[i] = [
            float(np.clip(rng.normal(62.0, 15.0), 18.0, 95.0)),
            gender,
            float(rng.normal(80.0 - 12.0 * (1 - gender), 14.0)),
            float(rng.normal(176.0 - 13.0 * (1 - gender), 8.0)),
            float(rng.integers(0, 5)),
            float(rng.integers(0, 4)),
            float(rng.integers(0, 4)),
            float(rng.integers(0, 5)),
        ]
        process[i] = rng.normal(size=(T, d))
        obs[i] = rng.normal(size=(T, model.n_ts))
        uniforms[i] = rng.random(size=(T, K, 2))
    return _Draws(x0, lengths, static, process, obs, uniforms)


@dataclass
class Rollout:
    observations: np.ndarray   # (n, T_max, n_ts)
    actions: np.ndarray        # (n, T_max, K)
    latent: np.ndarray         # (n, T_max + 1, n_latent)
    lengths: np.ndarray
    static: np.ndarray
    diseases: List[List[int]]
    survived: np.ndarray
    final_severity: np.ndarray


def rollout(model: PatientModel, policy, n: int, seed: int) -> Rollout:
    """Simulate ``n`` admissions treated by ``policy`` (a :class:`DoctorPolicy` or a ``Policy`` callable)."""
    if n < 1:
        raise ValueError("need at least one episode")
    dr = _draw(model, n, seed)
    T, K = model.max_steps, model.n_meds
    diseases = model.diagnose(dr.x0)
    multihot = np.zeros((n, model.n_diseases))
    for i, codes in enumerate(diseases):
        multihot[i, codes] = 1.0
    growth = model.growth_rate(dr.static[:, 0])
    latent = np.zeros((n, T + 1, model.n_latent))
    observations = np.zeros((n, T, model.n_ts))
    actions = np.zeros((n, T, K))
    x = dr.x0.copy()
    latent[:, 0] = x
    for t in range(T):
        active = t < dr.lengths
        observations[:, t] = model.observe(x, dr.obs[:, t])
        if isinstance(policy, DoctorPolicy):
            a = policy.act(oracle_action(model, x), dr.uniforms[:, t, :, 0], dr.uniforms[:, t, :, 1])
        else:
            view = PolicyView(t, observations[:, :t + 1], dr.static, multihot, x.copy(), dr.uniforms[:, t])
            a = np.asarray(policy(view), dtype=np.float64)
            if a.shape != (n, K):
                raise ValueError(f"policy returned shape {a.shape}, expected {(n, K)}")
        a = np.where(active[:, None], a, 0.0)
        actions[:, t] = a
        x_next = model.step(x, a, growth, dr.process[:, t])
        x = np.where(active[:, None], x_next, x)
        latent[:, t + 1] = x
    survived = model.severity(x) < model.survival_threshold
    final = x
    observations[~(np.arange(T)[None, :] < dr.lengths[:, None])] = 0.0
    return Rollout(observations, actions, latent, dr.lengths, dr.static, diseases, survived, model.severity(final))


def sample_cohort(model: PatientModel, doctor: DoctorPolicy, n: int, seed: int, id_prefix: str = "sim") -> List[Trajectory]:
    """Admissions treated by the simulated doctor, as :class:`~srlrnn.etl.Trajectory` records."""
    if doctor.n_meds != model.n_meds:
        raise ValueError(f"doctor has {doctor.n_meds} medications, model has {model.n_meds}")
    ro = rollout(model, doctor, n, seed)
    out = []
    for i in range(n):
        L = int(ro.lengths[i])
        rewards = np.zeros(L)
        rewards[-1] = SURVIVAL_REWARD if ro.survived[i] else DEATH_REWARD
        out.append(Trajectory(
            id=f"{id_prefix}-{i:06d}",
            static=dict(zip(STATIC_NAMES, ro.static[i].tolist())),
            diseases=ro.diseases[i],
            obs=ro.observations[i, :L],
            meds=[np.flatnonzero(ro.actions[i, t]).tolist() for t in range(L)],
            rewards=rewards,
            survived=bool(ro.survived[i]),
        ))
    return out


def evaluate_policy_true_survival(model: PatientModel, policy, episodes: int, seed: int) -> float:
    """Monte-Carlo survival rate when ``policy`` treats fresh simulated patients."""
    return float(rollout(model, policy, episodes, seed).survived.mean())


def calibrate_threshold(model: PatientModel, doctor: DoctorPolicy, target: float = 0.8,
                        episodes: int = 10_000, seed: int = 2024) -> float:
    """Survival threshold at which ``doctor`` keeps a ``target`` fraction of patients alive.

    The final severity does not depend on the threshold, so this is the
    ``target`` quantile of the doctor's final severities.
    """
    if not 0.0 < target < 1.0:
        raise ValueError("target must lie in (0, 1)")
    return float(np.quantile(rollout(model, doctor, episodes, seed).final_severity, target))


def oracle_policy(model: PatientModel) -> Policy:
    return lambda view: oracle_action(model, view.latent)


def random_policy(rate: float = 0.5) -> Policy:
    return lambda view: (view.uniforms[:, :, 0] < rate).astype(np.float64)
