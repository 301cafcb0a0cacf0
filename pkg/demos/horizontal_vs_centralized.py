"""Three hospitals hold different patients with the same columns.

A key-less server adds their encrypted histograms. The result should match
a centralized model trained on the pooled rows with the same merged cuts.
"""

from secure_fedxgb import (
    SecurityConfig, TrainParams, make_synthetic, run_horizontal_histogram, split_horizontal,
    train_centralized,
)

data = make_synthetic(900, 5, seed=2, positive_rate=0.4)
shards = split_horizontal(data, 3)
params = TrainParams(num_trees=2, max_depth=3, max_bin=16)

plain = run_horizontal_histogram(shards, params)
secure = run_horizontal_histogram(shards, params, SecurityConfig("paillier", key_bits=512, seed=9))

print("rows per party:", [s.data.n_rows for s in shards])
print("secure == passthrough:", secure.forest.dumps() == plain.forest.dumps())
central = train_centralized(data, params, cuts=secure.cuts)
print("secure == centralized on merged cuts:", secure.forest.dumps() == central.dumps())
print("kinds the server received:", sorted({e.kind for e in secure.transcript.received_by("server")}))
print("vector encryptions:", secure.counters.vector_encryptions)
print("vector additions:  ", secure.counters.vector_additions)
print("seconds secure vs plain: %.2f vs %.2f" % (sum(secure.timings.values()), sum(plain.timings.values())))
