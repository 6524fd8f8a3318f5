"""Merged H-LoRA versus the expert-by-expert MoELoRA loop.

Both compute the same function; the merged form just does it with one
pair of matrix products whatever the expert count.
"""

import numpy as np

from hlora_lab.adapters import (
    FrozenLinear,
    HLoraSubmodule,
    LoraAdapter,
    OpCounter,
    RouterLayer,
    hlora_forward,
    moelora_forward_reference,
)
from hlora_lab.autodiff import Tensor

rng = np.random.default_rng(0)
d_in, d_out, r, k = 16, 12, 4, 4

base = FrozenLinear.random(d_in, d_out, rng)
experts = [LoraAdapter(rng.normal(size=(d_in, r)), rng.normal(size=(r, d_out)), alpha=8.0) for _ in range(k)]
router = RouterLayer.init(d_in, k, rng, std=1.0)
x = Tensor(rng.normal(size=(5, d_in)))

# the loop: one pair of products, one expansion and one add per expert
loop_ops = OpCounter()
y_loop = moelora_forward_reference(x, base, experts, router, loop_ops)

# the same experts concatenated into A_merged (d_in x rk) and B_merged (rk x d_out)
sub = HLoraSubmodule.from_experts(experts, router)
merged_ops = OpCounter()
y_merged = hlora_forward(x, base, sub, merged_ops)

print("A_merged", sub.A_merged.shape, "B_merged", sub.B_merged.shape)
print("max |loop - merged| =", np.abs(y_loop.data - y_merged.data).max())

print("\nadapter-side operations for k =", k)
print("  loop  ", loop_ops.as_dict(), "total", loop_ops.total())
print("  merged", merged_ops.as_dict(), "total", merged_ops.total())

# the loop grows as 5k+1, the merged form stays at 6
for kk in (1, 2, 8, 32):
    ex = [LoraAdapter(rng.normal(size=(d_in, r)), rng.normal(size=(r, d_out)), 8.0) for _ in range(kk)]
    rt = RouterLayer.init(d_in, kk, rng)
    a, b = OpCounter(), OpCounter()
    moelora_forward_reference(x, base, ex, rt, a)
    hlora_forward(x, base, HLoraSubmodule.from_experts(ex, rt), b)
    print(f"  k={kk:2d}: loop {a.total():3d}  merged {b.total()}")

# splitting the merged factors gives back the original experts
back = sub.split_experts()
print("\nround trip exact:", all(np.array_equal(e.A.data, f.A.data) and np.array_equal(e.B.data, f.B.data) for e, f in zip(experts, back)))
