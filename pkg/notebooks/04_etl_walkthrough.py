"""
From a raw extract to trajectories
==================================

Builds a tiny four-file extract, then bins, filters, imputes and codes it.
"""

# %%
import tempfile
from pathlib import Path

from srlrnn.etl import PreprocessSettings, bin_to_units, preprocess_records, read_extract

d = Path(tempfile.mkdtemp())
(d / "admissions.csv").write_text("admission_id,died,length_hours,age\n"
                                  "a,0,48,61\nb,1,72,45\nteen,0,24,16\n")
(d / "measurements.csv").write_text("admission_id,hours,variable,value\n"
                                    "a,1,glucose,100\na,5,glucose,120\na,30,hr,88\n"
                                    "b,2,glucose,140\nb,26,hr,101\nb,50,hr,97\nteen,3,hr,80\n")
(d / "medications.csv").write_text("admission_id,hours,code\na,2,insulin\nb,3,insulin\nb,27,heparin\n")
(d / "diagnoses.csv").write_text("admission_id,code\na,250\nb,428\nb,250\n")

records = read_extract(d)

# %%
# One unit per 24 hours; readings in a unit are averaged (100 and 120 -> 110).
units = bin_to_units(records[0])
print(units.variables)
print(units.values)

# %%
# The 16-year-old is excluded, gaps are filled from the nearest neighbours,
# and medication / disease codes become integer ids.
trajs, vocab, variables, report = preprocess_records(records, PreprocessSettings(knn=1))
print(report.excluded, "retained", report.retained)
print(vocab.medications, vocab.diseases)
for t in trajs:
    print(t.id, t.obs.tolist(), t.meds, t.rewards.tolist())
