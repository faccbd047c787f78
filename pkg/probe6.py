"""Full overfit probe at the stabilized recipe: lr0 2e-3, beta2 0.99 default."""
import sys

from probe_acceptance import probe_overfit, probe_rotation

if probe_overfit(0.002):
    probe_rotation(0.002)
    sys.exit(0)
print("recipe missed; inspect diagnostics above", flush=True)
