"""Reduced run of the component-waterfall benchmark: trains the static
baseline (A0) and the full configuration (A6) on a small slice of the frozen
benchmark data and compares mask quality. One seed, ~5 minutes on one CPU
core; the official three-seed numbers are pinned in
tests/fixtures/benchmark_thresholds.json and reproduced by the test suite.
"""

from crispdec.benchmark import benchmark_train_config, make_benchmark_data, \
    run_level

train_data, eval_data = make_benchmark_data(train_n=200, eval_n=50)
print("200 train scenes / 50 eval scenes, one seed\n")

for level in ("A0", "A6"):
    scores = run_level(level, seed=0, train_data=train_data,
                       eval_data=eval_data)
    print("%s: mIoU %.4f   boundary F1 %.4f   ECE %.4f" % (
        level, scores["miou"], scores["boundary_f1"], scores["ece"]))
