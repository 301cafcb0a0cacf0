"""Each party keeps only its own split thresholds after vertical training.

Prediction needs every party: owners evaluate their splits locally and
send direction bits to the active party, which walks the trees.
"""

import numpy as np

from secure_fedxgb import TrainParams, make_synthetic, predict, run_vertical_histogram, split_vertical
from secure_fedxgb.inference import federated_predict, merge_partials

data = make_synthetic(400, 6, seed=4, positive_rate=0.3)
names = data.feature_names
shards = split_vertical(data, {0: names[:3], 1: names[3:]}, active_party=1)
res = run_vertical_histogram(shards, TrainParams(num_trees=2, max_depth=3, max_bin=16))

for pid, pm in sorted(res.partial_models.items()):
    nodes = [n for t in pm.trees for n in t.nodes if not n.is_leaf]
    hidden = sum(n.threshold is None for n in nodes)
    print(f"party{pid}: {len(nodes)} split nodes, {hidden} hidden, active={pm.is_active}")

p_fed = federated_predict(list(res.partial_models.values()), shards)
p_global = predict(res.forest, data)
print("federated == global predictions:", np.array_equal(p_fed, p_global))
print("merged partials == global forest:",
      merge_partials(list(res.partial_models.values())).dumps() == res.forest.dumps())
