"""Re-probe after the low-prior output-bias change."""
import sys

from probe_acceptance import probe_ae, probe_overfit, probe_rotation

probe_ae()
for lr in (0.001, 0.0015):
    if probe_overfit(lr):
        probe_rotation(lr)
        sys.exit(0)
print("overfit still failing after bias change", flush=True)
