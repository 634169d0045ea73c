"""How often the echo pass actually runs.

The routing probability decays linearly from p_start to p_end. Each step draws
one Bernoulli; when it fails the step costs a single forward/backward.

    python demos/02_routing_schedule.py
"""

import numpy as np

from echo_lora import Router, RoutingSchedule

K = 1875  # 3 epochs of 625 steps
router = Router(RoutingSchedule(p_start=1.0, p_end=0.2, K=K, rng_seed=0))
draws = np.array([router.sample(k) for k in range(K)])
probs = np.array([router.prob(k) for k in range(K)])

print(f"p_0 = {probs[0]}, p_(K-1) = {probs[-1]}, mean p = {probs.mean():.4f}")
print(f"echo pass ran on {draws.sum()} of {K} steps ({draws.mean():.1%})")
for lo in range(0, K, 375):
    seg = slice(lo, lo + 375)
    bar = "#" * int(40 * draws[seg].mean())
    print(f"steps {lo:4d}-{min(lo + 374, K - 1):4d}  p~{probs[seg].mean():.2f}  {bar}")

# Relative compute, counting one forward+backward as a unit.
print(f"expected cost vs plain LoRA: {1 + draws.mean():.2f}x")
