"""Run the whole pipeline through the CLI and read back its tables.

Same as ``ppguide pipeline --out-dir runs/demo`` with the default config,
which takes a few minutes on one core. Shrinking the policy budget makes
it faster, but an undertrained policy tends to yield failure labels that
guidance cannot use (try ``policy_epochs = 200`` in a config file).
"""

import subprocess
import sys
from pathlib import Path

from ppguide.harness import read_csv

out = Path("runs/demo")
subprocess.run([sys.executable, "-m", "ppguide", "pipeline", "--out-dir", str(out), "-v"], check=True)

rows = read_csv(out / "sweep_strength.csv")
print("alternating schedule, success by guidance strength")
for r in rows:
    if r["schedule"] == "alternating":
        rate = float(r["success_rate"])
        print(f"  w_fr={r['w_fr']:<5} {'#' * int(rate * 40)} {rate:.2f}")
