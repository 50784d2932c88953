"""Quick check of the compiled extension.

    pip install maturin
    maturin develop -m crates/python/Cargo.toml --release
    python python/smoke_test.py
"""

import math

import dynpo_py as dp

value, grad_pos, grad_neg = dp.loss("dmpo", 0.0, [0.0] * 5, [1.0] * 5)
assert abs(value - math.log(2)) < 1e-12
assert abs(grad_pos + 0.5) < 1e-12

assign, centroids, wcss = dp.kmeans_1d_exact([-9.0, -1.0, -5.2, -5.0, -1.1], 3)
print("kmeans", assign, centroids, wcss)
assert assign == [0, 2, 1, 1, 2]

print("selection", dp.select_boundary(-1.0, [-2.0, -2.2, -6.0, -9.5, -10.0]))
print("beta", dp.dynamic_beta(1.0, 5.0))

small = {"synthetic.users": "60", "synthetic.items": "40", "history_len": "5",
         "sft_epochs": "2", "po_epochs": "1", "k": "5"}
naive = dp.train(overrides={**small, "variant": "naive"})
dyn = dp.train(overrides={**small, "variant": "dynamicpo"})
for row in (naive, dyn):
    print(row["variant"], "HR@1", row["hit_ratio_at_1"], "win rate", row["reward_win_rate"])
assert dp.train(overrides={**small, "variant": "dynamicpo"}) == dyn

print("ok")
