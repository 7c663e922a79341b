"""Drop the most harmful pretraining examples and compare with dropping random ones.

Run with ``python demos/03_cleansing.py``.
"""

# %% setup
import warnings

from msif.config import RunConfig
from msif.validation import run_scenario

warnings.simplefilter("ignore", UserWarning)

# %% one seed of the cleansing study on the tanh MLP preset
cfg = RunConfig.preset("mlp").override(scenario={"seeds": "0", "top_fraction": "0.1"})
report = run_scenario("cleansing", cfg)
row = report.rows()[0]

# %% removing high positive scores should help the finetuned model more than random removal
m = cfg.dataset.pretrain_per_class * len(cfg.pretrain_classes)
print(f"removed {row['removed']} of {m} examples")
for label in ("baseline", "influence", "random"):
    print(f"{label:>9}: test loss {row[f'{label}_loss']:.3f}, accuracy {row[f'{label}_acc']:.3f}")
