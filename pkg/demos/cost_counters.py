"""Where the encryption cost goes in each mode.

Cyclic and bagging exchange whole trees in the clear, so their HE counters stay at zero.
"""

from secure_fedxgb import (
    SecurityConfig, TrainParams, make_synthetic, run_bagging, run_cyclic,
    run_horizontal_histogram, run_vertical_histogram, split_horizontal, split_vertical,
)

data = make_synthetic(1000, 4, seed=7, positive_rate=0.3)
params = TrainParams(num_trees=1, max_depth=2, max_bin=8)
security = SecurityConfig("paillier", key_bits=512, seed=11)
names = data.feature_names

runs = {
    "vertical": run_vertical_histogram(
        split_vertical(data, {0: names[:2], 1: names[2:]}, 1), params, security),
    "horizontal": run_horizontal_histogram(split_horizontal(data, 2), params, security),
    "cyclic": run_cyclic(split_horizontal(data, 2), params),
    "bagging": run_bagging(split_horizontal(data, 2), params),
}

print("%-11s %8s %8s %8s %8s %8s" % ("mode", "enc", "adds", "dec", "vec_enc", "vec_add"))
for mode, r in runs.items():
    c = r.counters
    print("%-11s %8d %8d %8d %8d %8d" % (mode, c.encryptions, c.ciphertext_additions, c.decryptions,
                                         c.vector_encryptions, c.vector_additions))
