"""End-to-end workflows shared by the command line and the acceptance suite.

Training data is standardized with statistics from the training split; the
fitted :class:`~srlrnn.etl.Standardizer` and the cohort dimensions travel
inside every checkpoint so evaluation reproduces the exact inputs.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from .cohort import DoctorPolicy, PatientModel, evaluate_policy_true_survival, sample_cohort
from .etl import CohortInfo, Standardizer, Trajectory, to_batch
from .metrics import (DifferenceCurve, MortalityCurve, difference_curve, expected_return, mean_jaccard,
                      mortality_curve)
from .nets import Batch, Networks, load_networks, params_from_json, params_to_json, save_networks
from .srl import (Optimizers, ReplayBuffer, TrainConfig, TrainedPolicy, policy_q_values, q_values,
                  train_epochs)


def split_cohort(trajectories: Sequence[Trajectory], train: float = 0.8, validation: float = 0.1):
    """Contiguous train / validation / test split (cohorts are already in random order)."""
    n = len(trajectories)
    a = int(round(n * train))
    b = a + int(round(n * validation))
    if a == 0:
        raise ValueError("training split is empty")
    return list(trajectories[:a]), list(trajectories[a:b]), list(trajectories[b:])


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------


@dataclass
class TrainingState:
    nets: Networks
    config: TrainConfig
    info: CohortInfo
    scaler: Standardizer
    trace: List[dict] = field(default_factory=list)
    epochs_done: int = 0
    optimizer_state: dict = field(default_factory=dict)

    def policy(self, threshold: Optional[float] = None) -> TrainedPolicy:
        thr = self.config.threshold if threshold is None else threshold
        return TrainedPolicy(self.nets.dims, self.nets.actor, thr, self.scaler)


def _adam_to_json(state: dict) -> dict:
    return {net: {"t": s["t"], "m": params_to_json(s["m"]), "v": params_to_json(s["v"])}
            for net, s in state.items()}


def _adam_from_json(doc: dict) -> dict:
    return {net: {"t": s["t"], "m": params_from_json(s["m"]), "v": params_from_json(s["v"])}
            for net, s in doc.items()}


def save_state(state: TrainingState, path) -> None:
    info = asdict(state.info)
    info["static_names"] = list(info["static_names"])
    save_networks(state.nets, path, extra={
        "config": state.config.to_dict(),
        "info": info,
        "scaler": state.scaler.to_dict(),
        "trace": state.trace,
        "epochs_done": state.epochs_done,
        "optimizer": _adam_to_json(state.optimizer_state),
    })


def load_state(path) -> TrainingState:
    nets, extra = load_networks(path)
    try:
        info = dict(extra["info"])
        info["static_names"] = tuple(info["static_names"])
        return TrainingState(
            nets=nets,
            config=TrainConfig.from_dict(extra["config"]),
            info=CohortInfo(**info),
            scaler=Standardizer.from_dict(extra["scaler"]),
            trace=list(extra.get("trace", [])),
            epochs_done=int(extra.get("epochs_done", 0)),
            optimizer_state=_adam_from_json(extra.get("optimizer", {})),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: checkpoint lacks {exc}") from exc


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------


def prepare(train: Sequence[Trajectory], info: Optional[CohortInfo] = None):
    """Cohort dimensions, fitted standardizer and the standardized training batch."""
    info = info or CohortInfo.infer(train)
    raw = to_batch(train, info)
    scaler = Standardizer.fit(raw)
    return info, scaler, scaler.transform(raw)


def train_policy(config: TrainConfig, train: Sequence[Trajectory], validation: Sequence[Trajectory] = (),
                 info: Optional[CohortInfo] = None, resume: Optional[TrainingState] = None,
                 on_epoch: Optional[Callable[[TrainingState], None]] = None) -> TrainingState:
    """Fit the actor and critic on logged admissions.

    With ``resume`` the run continues from its ``epochs_done``; networks,
    optimizer moments and trace are restored, so the result matches an
    uninterrupted run. ``on_epoch`` receives the state after every epoch
    (for checkpointing).
    """
    if resume is not None:
        info, scaler = resume.info, resume.scaler
        tb = scaler.transform(to_batch(train, info))
        nets, trace, start = resume.nets, list(resume.trace), resume.epochs_done
    else:
        info, scaler, tb = prepare(train, info)
        dims = config.net_dims(info.n_ts, len(info.static_names), info.n_diseases, info.n_meds)
        nets, trace, start = Networks.initialize(dims, config.seed), [], 0
        nets.meta["reward_scale"] = config.reward_scale
    vb = scaler.transform(to_batch(validation, info)) if len(validation) else None
    opt = Optimizers(config)
    if resume is not None:
        opt.load_state(resume.optimizer_state)
    state = TrainingState(nets, config, info, scaler, trace, start, opt.state())

    def hook(epoch, nets, trace, opt):
        state.nets, state.trace, state.epochs_done, state.optimizer_state = nets, trace, epoch + 1, opt.state()
        if on_epoch is not None:
            on_epoch(state)

    nets, trace = train_epochs(config, ReplayBuffer(tb, config.capacity), nets, vb, start_epoch=start,
                               trace=trace, on_epoch=hook, optimizers=opt)
    state.nets, state.trace = nets, trace
    state.epochs_done = max(start, config.epochs)
    state.optimizer_state = opt.state()
    return state


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------


@dataclass
class Evaluation:
    jaccard: float
    per_patient_jaccard: np.ndarray
    patient_ids: List[str]
    mortality: MortalityCurve
    estimated_mortality: float
    policy_expected_q: float
    difference: DifferenceCurve
    observed_return: float
    policy_start_q: float
    doctor_start_q: float
    observed_mortality: float

    def summary(self) -> Dict[str, float]:
        return {
            "jaccard": self.jaccard,
            "estimated_mortality": self.estimated_mortality,
            "observed_mortality": self.observed_mortality,
            "policy_expected_q": self.policy_expected_q,
            "observed_return": self.observed_return,
        }


def check_compatible(state: TrainingState, trajectories: Sequence[Trajectory]) -> CohortInfo:
    """Raise ``ValueError`` when admissions do not fit the checkpoint's dimensions."""
    info = state.info
    probe = CohortInfo.infer(trajectories)
    if probe.n_ts != info.n_ts:
        raise ValueError(f"data has {probe.n_ts} time-series variables, checkpoint expects {info.n_ts}")
    if probe.static_names != info.static_names:
        raise ValueError(f"data static fields {probe.static_names} != checkpoint {info.static_names}")
    if probe.n_meds > info.n_meds:
        raise ValueError(f"data uses medication id {probe.n_meds - 1}, checkpoint has K={info.n_meds}")
    if probe.n_diseases > info.n_diseases:
        raise ValueError(f"data uses disease id {probe.n_diseases - 1}, checkpoint has {info.n_diseases}")
    return info


def evaluate(state: TrainingState, trajectories: Sequence[Trajectory], bins: int = 50,
             threshold: Optional[float] = None, doctor: bool = False) -> Evaluation:
    """Offline metrics of the trained policy against logged admissions.

    With ``doctor=True`` the logged prescriptions stand in for the policy's
    recommendations (a sanity baseline: Jaccard 1, all differences 0).
    """
    info = check_compatible(state, trajectories)
    raw = to_batch(trajectories, info)
    batch = state.scaler.transform(raw)
    rec = batch.actions if doctor else state.policy(threshold).recommend_all(batch)
    lengths = batch.lengths
    rec_list = [rec[i, :L] for i, L in enumerate(lengths)]
    doc_list = [batch.actions[i, :L] for i, L in enumerate(lengths)]
    jac = mean_jaccard(rec_list, doc_list)

    died = np.array([not t.survived for t in trajectories], dtype=np.float64)
    died_steps = np.broadcast_to(died[:, None], batch.mask.shape)[batch.mask]
    q_doc = q_values(state.nets, batch, batch.actions)
    q_pol = q_doc if doctor else policy_q_values(state.nets, batch)
    curve = mortality_curve(q_doc[batch.mask], died_steps, bins)
    expected_q = float(q_pol[batch.mask].mean())
    diff = difference_curve(rec[batch.mask], batch.actions[batch.mask], died_steps)
    return Evaluation(
        jaccard=jac.mean,
        per_patient_jaccard=jac.per_patient,
        patient_ids=[t.id for t in trajectories],
        mortality=curve,
        estimated_mortality=curve.rate_at(expected_q),
        policy_expected_q=expected_q,
        difference=diff,
        observed_return=expected_return([t.rewards for t in trajectories], state.config.gamma),
        policy_start_q=float(q_pol[:, 0].mean()),
        doctor_start_q=float(q_doc[:, 0].mean()),
        observed_mortality=float(died.mean()),
    )


def q_mortality_spearman(curve: MortalityCurve, min_support: int = 30) -> float:
    """Rank correlation between bin centre and death rate over well-supported bins (NaN if < 3 bins)."""
    keep = curve.support >= min_support
    if keep.sum() < 3:
        return float("nan")
    rho = spearmanr(curve.centers[keep], curve.rates[keep]).statistic
    return float(rho)


# ----------------------------------------------------------------------------
# epsilon sweep on the simulator
# ----------------------------------------------------------------------------


@dataclass
class SweepSettings:
    n_admissions: int = 5000
    p_noise: float = 0.3
    survival_episodes: int = 2000
    bins: int = 50


SWEEP_FIELDS = ("epsilon", "seed", "true_survival", "jaccard", "estimated_mortality", "q_mortality_spearman",
                "final_td_error", "seconds")


def sweep_cell(epsilon: float, seed: int, base: TrainConfig, settings: SweepSettings,
               model: Optional[PatientModel] = None) -> dict:
    """Train one policy on a simulated cohort and score it.

    The cohort, the network initialization and batch sampling are keyed on
    ``seed``; the ground-truth survival episodes on a seed derived from ``seed`` so every
    epsilon is scored on the same simulated patients.
    """
    t0 = time.perf_counter()
    model = model or PatientModel()
    doctor = DoctorPolicy(settings.p_noise, model.n_meds)
    cohort = sample_cohort(model, doctor, settings.n_admissions, seed)
    train, val, test = split_cohort(cohort)
    info = CohortInfo.infer(cohort, n_meds=model.n_meds, n_diseases=model.n_diseases)
    config = TrainConfig.from_dict({**base.to_dict(), "epsilon": epsilon, "seed": seed})
    state = train_policy(config, train, val, info)
    ev = evaluate(state, test, settings.bins)
    survival = evaluate_policy_true_survival(model, state.policy(), settings.survival_episodes,
                                             seed=1_000_003 * (seed + 1))
    return {
        "epsilon": epsilon,
        "seed": seed,
        "true_survival": survival,
        "jaccard": ev.jaccard,
        "estimated_mortality": ev.estimated_mortality,
        "q_mortality_spearman": q_mortality_spearman(ev.mortality),
        "final_td_error": state.trace[-1]["mean_td_error"] if state.trace else float("nan"),
        "seconds": time.perf_counter() - t0,
    }


def summarize_sweep(rows: Sequence[dict]) -> List[dict]:
    """Mean and standard deviation per epsilon."""
    out = []
    for eps in sorted({r["epsilon"] for r in rows}):
        group = [r for r in rows if r["epsilon"] == eps]
        surv = np.array([r["true_survival"] for r in group])
        jac = np.array([r["jaccard"] for r in group])
        mort = np.array([r["estimated_mortality"] for r in group])
        out.append({
            "epsilon": eps,
            "runs": len(group),
            "true_survival_mean": float(surv.mean()),
            "true_survival_sd": float(surv.std(ddof=1)) if len(group) > 1 else 0.0,
            "jaccard_mean": float(jac.mean()),
            "jaccard_sd": float(jac.std(ddof=1)) if len(group) > 1 else 0.0,
            "estimated_mortality_mean": float(mort.mean()),
        })
    return out
