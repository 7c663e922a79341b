"""Full second-order scores versus the identity-Hessian shortcut on a tanh MLP.

Run with ``python demos/02_hessian_ablation.py``.
"""

# %% setup
import warnings

from msif.config import RunConfig
from msif.validation import correlation_study

warnings.simplefilter("ignore", UserWarning)

# %% a smaller tanh MLP so the leave-one-out sweep finishes quickly
cfg = RunConfig.preset("mlp").override(dataset={"pretrain_per_class": "20", "test_per_class": "10"},
                                       scenario={"per_pair": "false"})
full, identity = correlation_study(cfg, identities=(False, True))

# %% both reports share the same retraining ground truth
print(f"m = {len(full.pairs)} pretraining examples")
print(f"inverse-Hessian scores:   r = {full.pearson_r:.4f}")
print(f"identity-Hessian scores:  r = {identity.pearson_r:.4f}")
