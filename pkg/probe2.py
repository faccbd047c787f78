"""Escalation driver: paper-default lr first, then mild bumps, else diagnose."""
import sys

from probe_acceptance import probe_overfit, probe_rotation
from probe_diag import joint_decay, seg_only

for lr in (0.001, 0.002):
    if probe_overfit(lr):
        probe_rotation(lr)
        sys.exit(0)
print("both flat lrs failed; diagnosing", flush=True)
seg_only()
joint_decay(0.002, 500)
