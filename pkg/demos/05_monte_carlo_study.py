"""A small replication study: simulate, estimate and test repeatedly.

This is a desk-scale version of the bundled table6_nonergodic experiment
(full scale: 1000 replications at n=1000).  Outputs land in
demo_output/: mean/SD tables with theoretical comparisons, test-statistic
quartiles and rejection counts, figure data (histogram / QQ / ECDF
columns), and a manifest with every replication seed.
"""

import time

from diffusionfa import run, write_outputs
from diffusionfa.config import bundled_config_path, load_json
from diffusionfa.montecarlo import experiment_from_json

doc = load_json(bundled_config_path("table6_nonergodic"))
doc["replications"] = 50  # full run uses 1000
exp = experiment_from_json(doc)

start = time.perf_counter()
agg = run(exp, n_jobs=2)
print(f"{agg.replications} replications in {time.perf_counter() - start:.1f}s")

rows = {r.name: r for r in agg.rcov_rows + agg.theta_rows + agg.tstat_rows}
print(f"\n{'statistic':>10} {'mean':>9} {'true':>8} {'sd':>7} {'theory':>7}")
for name in ("rcov:1,1", "theta:1", "theta:15", "tstat:2"):
    r = rows[name]
    print(f"{r.name:>10} {r.sample_mean:>9.3f} {r.true_value:>8.3f} "
          f"{r.sample_sd:>7.3f} {r.theoretical_sd:>7.3f}")

for (k, alpha), count in sorted(agg.rejections.items()):
    print(f"H0 k={k}: {count}/{agg.replications} rejections at alpha={alpha}")

files = write_outputs(agg, "demo_output", exp)
print("\nwrote:")
for f in files:
    print(" ", f)
