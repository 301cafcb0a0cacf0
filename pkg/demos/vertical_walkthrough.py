"""Two banks share customers but not columns; only one of them has labels.

Train a vertical model under Paillier, then check that it is the same
model a single site would have trained on the joined table, and that the
passive bank never saw a usable gradient.
"""

import numpy as np

from secure_fedxgb import (
    SecurityConfig, TrainParams, make_synthetic, predict, run_vertical_histogram, split_vertical,
    train_centralized,
)
from secure_fedxgb.federation import label_probe
from secure_fedxgb.gbdt import log_loss

data = make_synthetic(600, 8, seed=1, positive_rate=0.3)
names = data.feature_names
shards = split_vertical(data, {0: names[:4], 1: names[4:]}, active_party=1)
params = TrainParams(num_trees=3, max_depth=3, max_bin=16)

security = SecurityConfig("paillier", key_bits=512, seed=5)
res = run_vertical_histogram(shards, params, security)
central = train_centralized(data, params)

print("trees:", len(res.forest.trees))
print("same model as centralized:", res.forest.dumps() == central.dumps())
print("encryptions per round:", [r["encryptions"] for r in res.round_counters])
print("decryptions total:", res.counters.decryptions)
print("timings:", {k: round(v, 3) for k, v in res.timings.items()})

guess = label_probe(res.transcript, "party0", data.n_rows)
print("passive party label guess accuracy: %.3f" % np.mean(guess == data.label))

plain = run_vertical_histogram(shards, params)
guess = label_probe(plain.transcript, "party0", data.n_rows)
print("same probe without encryption:      %.3f" % np.mean(guess == data.label))

p = predict(res.forest, data)
print("train log loss: %.4f" % log_loss(data.label, p))
