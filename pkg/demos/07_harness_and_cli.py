"""
Experiments from config files
=============================

The harness turns a flat key = value config into runs over several seeds,
with per-probe CSV rows and optional self-checks (ledger recount, replay,
accuracy, consistency).  The same machinery backs the command line:

    disttrack run configs/count_rr.cfg -o out.csv
    disttrack sweep configs/count_rr.cfg --axis k --values 4,16,64,256
    disttrack dump-messages configs/count_rr.cfg --seed 0
    disttrack calibrate -o constants.json
"""
import io
import sys
from pathlib import Path

from disttrack.harness import dump_messages, parse_config, run

config = """
tracker = count
k = 8
eps = 0.1
N = 50000
seeds = 0-2
copies = 3
workload.kind = one_way_hard
checks = ledger, replay, consistency, accuracy
"""
spec = parse_config(config)
result = run(spec)
print("all checks passed:", result.ok)
print("mean per-seed totals:", result.summary_means())

csv_text = result.to_csv()
lines = csv_text.splitlines()
print(f"\n{len(lines) - 1} CSV rows; header and first rows:")
print("\n".join(lines[:4]))

buf = io.StringIO()
dump_messages(parse_config(config.replace("copies = 3", "copies = 1")), buf, seed=0)
log = buf.getvalue().splitlines()
print(f"\nmessage log of seed 0: {len(log) - 1} messages")
print("\n".join(log[:6]))

# The shipped example config can be run the same way.
example = Path(__file__).resolve().parent.parent / "configs" / "count_rr.cfg"
if example.exists():
    from disttrack.cli import main

    print(f"\n$ disttrack run {example.name}  (first lines)")
    out = io.StringIO()
    saved, sys.stdout = sys.stdout, out
    try:
        code = main(["run", str(example)])
    finally:
        sys.stdout = saved
    print("\n".join(out.getvalue().splitlines()[:3]))
    print("exit code", code)
