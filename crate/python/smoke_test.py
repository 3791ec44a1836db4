"""Smoke test for the pycrossfuse extension module.

Build and run:

    cd crates/python && maturin develop --release
    python ../../python/smoke_test.py
"""

import math
import random
import sys
import tempfile

import pycrossfuse as xf

TINY = """
[run]
variant = "ssm-fusion"
iterations = 2
envs = 2
eval_every = 2
eval_runs = 2
eval_episodes = 1
[env]
horizon = 40
[ppo]
horizon = 40
samples_per_iter = 64
minibatch = 32
epochs = 2
"""


def check_env():
    env = xf.Env("thin-obstacle", seed=3)
    proprio_dim, frames, h, w, action_dim = env.shape
    proprio, depth = env.reset(1.0)
    assert len(proprio) == proprio_dim and len(depth) == frames * h * w
    total, done = 0.0, None
    while done is None:
        proprio, depth, reward, done = env.step([0.8, 0.0, 0.0])
        total += reward
    assert done in ("horizon", "goal", "fall", "collision", "out-of-bounds"), done
    print(f"env: episode ended by {done}, return {total:.2f}, distance {env.distance:.2f} m")


def check_gae():
    rng = random.Random(0)
    r = [rng.uniform(-1, 1) for _ in range(20)]
    v = [rng.uniform(-1, 1) for _ in range(20)]
    dones = [False] * 19 + [True]
    adv, ret = xf.gae(r, v, dones, 0.0, 0.99, 0.95)
    for t in range(20):
        expect = 0.0
        for k in range(t, 20):
            nxt = v[k + 1] if k + 1 < 20 else 0.0
            expect += (0.99 * 0.95) ** (k - t) * (r[k] + 0.99 * nxt - v[k])
        assert abs(adv[t] - expect) < 1e-10
        assert abs(ret[t] - adv[t] - v[t]) < 1e-12
    print("gae: matches the double sum")


def check_scan():
    rng = random.Random(1)
    n, d, h = 100, 3, 2
    u = [rng.uniform(-1, 1) for _ in range(n * d)]
    delta = [rng.uniform(0.01, 1) for _ in range(n * d)]
    a = [-rng.uniform(0.1, 2) for _ in range(d * h)]
    b = [rng.uniform(-1, 1) for _ in range(n * h)]
    c = [rng.uniform(-1, 1) for _ in range(n * h)]
    x0 = [0.0] * (d * h)
    ys, ls = xf.selective_scan(u, delta, a, b, c, x0, d, h)
    yp, lp = xf.selective_scan(u, delta, a, b, c, x0, d, h, parallel=True)
    assert max(abs(p - q) for p, q in zip(ys + ls, yp + lp)) < 1e-10
    print("scan: sequential and parallel agree")


def check_stats():
    final, slope, eff, auc = xf.efficiency_stats([2.0 * t + 1.0 for t in range(10)], 4)
    assert (final, slope, eff, auc) == (16.0, 2.0, 1.5, 10.0)
    cov_v, cov_a = xf.stability_stats([1.0, 3.0], [4.0, 4.0], 2)
    assert cov_v == 0.5 and cov_a == 0.0
    try:
        xf.stability_stats([1.0], [1.0], 2)
    except ValueError:
        pass
    else:
        raise AssertionError("short series accepted")
    print("stats: hand-computed values reproduced")


def check_gradcheck():
    ok, report = xf.gradcheck("mutation")
    assert ok and "mutated matmul adjoint" in report
    print("gradcheck: corrupted adjoint detected")


def check_train_and_agent():
    assert "ssm-fusion" in xf.VARIANTS and "rugged-terrain" in xf.SCENARIOS
    assert "[run]" in xf.config_toml("concat")
    with tempfile.TemporaryDirectory() as out:
        m = xf.train(TINY, 0, out)
        assert len(m["returns"]) in (0, 2) and math.isfinite(m["eval_return"])
        agent = xf.Agent.load(m["checkpoint"])
        assert agent.variant == "ssm-fusion" and agent.scenario == "thin-obstacle"
        env = xf.Env("dynamic-obstacle", seed=5)
        proprio, depth = env.reset()
        agent.reset()
        for _ in range(10):
            action, value = agent.act(proprio, depth)
            assert len(action) == 3 and math.isfinite(value)
            proprio, depth, _, done = env.step(action)
            if done:
                break
        rep = xf.evaluate(m["checkpoint"], "rugged-terrain", runs=2, episodes=1)
        assert rep["scenario"] == "rugged-terrain"
        print(f"train/eval: zero-shot rugged distance {rep['distance'][0]:.2f} m")


def main():
    check_env()
    check_gae()
    check_scan()
    check_stats()
    check_gradcheck()
    check_train_and_agent()
    print("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
