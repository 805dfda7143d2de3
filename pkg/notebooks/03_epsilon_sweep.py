"""
The imitation / reinforcement trade-off
=======================================

Trains policies across epsilon on one seed and prints ground-truth survival
next to agreement with the logged prescriptions. The full five-seed version
is ``srlrnn sweep-epsilon`` (15-25 minutes); this one takes about 3 minutes.
"""

# %%
from srlrnn.pipeline import SweepSettings, sweep_cell
from srlrnn.srl import TrainConfig

settings = SweepSettings(n_admissions=5000, survival_episodes=1000)
rows = [sweep_cell(eps, 0, TrainConfig(), settings) for eps in (0.0, 0.25, 0.5, 0.75, 1.0)]

# %%
# Pure reinforcement (epsilon=0) drifts far from the doctors and, trained
# offline, overtreats; pure imitation copies the doctors' mistakes too.
print("epsilon  survival  jaccard  spearman(Q, mortality)")
for r in rows:
    print(f"{r['epsilon']:7.2f}  {r['true_survival']:8.3f}  {r['jaccard']:7.3f}  {r['q_mortality_spearman']:8.3f}")
