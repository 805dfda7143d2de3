"""
Simulate a cohort, train a policy, look at what it recommends
=============================================================

Walks through the library end to end on a small synthetic cohort.
Run with ``python3 notebooks/01_simulate_and_train.py`` (about a minute and a half).
"""

# %%
# A cohort of admissions from the simulator. The logged "doctor" sees the
# hidden patient state but prescribes with noise (p_noise=0.3).
import numpy as np

from srlrnn.cohort import DoctorPolicy, PatientModel, evaluate_policy_true_survival, sample_cohort
from srlrnn.etl import to_batch
from srlrnn.pipeline import evaluate, split_cohort, train_policy
from srlrnn.srl import TrainConfig

model = PatientModel()
cohort = sample_cohort(model, DoctorPolicy(0.3, model.n_meds), 5000, seed=0)
train, val, test = split_cohort(cohort)
print(len(train), "train /", len(val), "validation /", len(test), "test admissions")
print("logged survival", np.mean([t.survived for t in cohort]))

first = cohort[0]
print("first admission:", first.length, "days, meds on day 1:", first.meds[0])

# %%
# Train with the default settings (epsilon=0.5 mixes imitation and reinforcement).
config = TrainConfig(epsilon=0.5, seed=0)
state = train_policy(config, train, val)
for row in state.trace:
    print(f"epoch {row['epoch']}: td {row['mean_td_error']:.4f}  val jaccard {row['jaccard']:.3f}")

# %%
# Offline metrics on held-out admissions, then the simulator's ground truth:
# run the trained policy on fresh simulated patients.
ev = evaluate(state, test)
print(ev.summary())
print("true survival under the policy", evaluate_policy_true_survival(model, state.policy(), 1000, seed=99))
print("true survival under the doctor ", evaluate_policy_true_survival(model, DoctorPolicy(0.3, model.n_meds), 1000, seed=99))

# %%
# Recommendations for one admission, day by day, next to the logged ones.
policy = state.policy()
batch = state.scaler.transform(to_batch(test[:1], state.info))
rec = policy.recommend_all(batch)[0]
for t in range(test[0].length):
    print(f"day {t}: policy {np.flatnonzero(rec[t]).tolist()}  doctor {test[0].meds[t]}")
