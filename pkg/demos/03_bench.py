"""Single-thread timing of LoRA, the MoELoRA loop and merged H-LoRA.

LoRA runs at rank r*k so every kind carries the same adapter parameters.
"""

from hlora_lab.bench import BenchSpec, format_table, run_bench

spec = BenchSpec(ks=(2, 4, 8, 32), repetitions=9)
results = run_bench(spec)
print(format_table(results))

med = {(r.kind, r.k): r.median_ns for r in results}
for k in spec.ks:
    print(f"k={k:2d}: loop is {med[('moelora', k)] / med[('hlora', k)]:.2f}x slower than merged")
