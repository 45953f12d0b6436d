"""Choosing the penalty: ICL versus a fixed network density.

ICL trades the per-component ELBO against the number of nonzero precision
entries; density targeting bisects the penalty until each network keeps a
requested fraction of its possible edges.

Run with ``python demos/02_choosing_lambda.py``.
"""

# %%
import numpy as np

from mplnet import FitConfig, SimConfig, gen_dataset, select_lambda_density, select_lambda_icl
from mplnet.engine import edge_density

# %%
# A small random-graph scenario with a fixed number of discriminative features
# (skipping the mixing calibration keeps the demo quick).
sd = gen_dataset(SimConfig(n=600, p=15, graph_kind="random", p_d=15, seed=3))
data = sd.dataset
truth_density = [edge_density(t) for t in sd.true_precisions]
print("true densities:", np.round(truth_density, 3))

# %%
# With 600 samples and weak edges ICL is conservative: the log-weight cost of
# each extra entry can outweigh the ELBO gain, leaving some networks empty.
config = FitConfig(components=3, seed=3)
icl = select_lambda_icl(data, config)
print("ICL penalties:", np.round(icl.lam, 2))
print("ICL densities:", np.round([edge_density(t) for t in icl.fit.params.precisions], 3))

# %%
# Density targeting instead fixes how many edges each network keeps.
dens = select_lambda_density(data, config, 0.2)
print(f"density target 0.2 -> status {dens.status} after {dens.steps} fits")
print("penalties:", np.round(dens.lam, 2))
print("densities:", np.round(dens.densities, 3))
