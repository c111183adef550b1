"""Approximate multipliers, product LUTs and error metrics.

Walks through the multiplier catalog: evaluates each unit functionally,
compiles it into an exhaustive 256x256 product table, and prints the error
and hardware characteristics side by side.
"""

import numpy as np

from axvit import (
    approx_product,
    approx_products,
    build_lut,
    builtin_catalog,
    error_metrics,
    lut_lookup,
    parse_multiplier_spec,
)

catalog = builtin_catalog()

# A truncating multiplier masks the low bits of each operand before the
# multiply, so 7 * -3 becomes 4 * -4 once two LSBs are dropped.
trunc2 = parse_multiplier_spec("trunc8k2")
print("exact  7 * -3 =", approx_product(catalog.get("mul8s_1KV6"), 7, -3))
print("trunc2 7 * -3 =", approx_product(trunc2, 7, -3))

# The LUT stores every operand pair; lookups match the functional form.
lut = build_lut(trunc2)
ops = np.arange(-128, 128)
table = approx_products(trunc2, ops[:, None], ops[None, :])
assert np.array_equal(lut.entries, table)
print("LUT agrees with functional evaluation on all", table.size, "pairs")
print("spot check via lut_lookup(5, 9):", lut_lookup(lut, 5, 9))

# Error metrics are exhaustive over all pairs, normalized by the largest
# exact product magnitude (2^14 for 8-bit operands).
print(f"\n{'name':<12} {'MAE%':>8} {'WCE%':>8} {'MRE%':>8} {'mW':>7} {'um2':>7}")
for m in catalog:
    em = error_metrics(m)
    print(f"{m.name:<12} {em.mae_pct:8.3f} {em.wce_pct:8.3f} "
          f"{em.mre_pct:8.2f} {m.power_mw:7.3f} {m.area_um2:7.1f}")
