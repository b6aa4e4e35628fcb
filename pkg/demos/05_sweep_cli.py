"""
Running a sweep from Python
===========================

The ``subgfn`` command runs a (dim x horizon x loss x seed) grid of training
runs and writes CSV metrics, one SVG chart per grid size and a manifest.  The
same entry point can be called in-process; this writes to ``demo_runs/``.
Shell equivalent::

    subgfn --dim 2 --horizon 8 --loss tb subtb subgfn --steps 3000 --out demo_runs
"""

from pathlib import Path

from subgfn.cli import main, parse_metrics_csv

code = main(["--dim", "2", "--horizon", "8", "--loss", "tb", "subtb", "subgfn", "--steps", "3000",
             "--eval-every", "500", "--out", "demo_runs"])
print("exit code", code)
for path in sorted(Path("demo_runs").iterdir()):
    print(" ", path)
rows = parse_metrics_csv(Path("demo_runs/metrics.csv").read_text())
for (dim, horizon, loss, seed), row in rows[-3:]:
    print(loss, row.step, row.l1_exact)
