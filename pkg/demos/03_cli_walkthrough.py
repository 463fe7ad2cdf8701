"""End to end through the command line: gen, run, eval, dump-bank.

Run: python demos/03_cli_walkthrough.py [workdir]

Everything is written under workdir (a temporary directory by default).
"""
import json
import subprocess
import sys
import tempfile
from pathlib import Path

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="adapgc_"))
work.mkdir(parents=True, exist_ok=True)


def adapgc(*args):
    cmd = [sys.executable, "-m", "adapgc.cli", *map(str, args)]
    print("$ adapgc", " ".join(map(str, args)))
    out = subprocess.run(cmd, capture_output=True, text=True)
    if out.stdout.strip():
        print(out.stdout.rstrip())
    if out.returncode:
        print(out.stderr.rstrip())
    return out.returncode


scenario = dict(num_classes=3, raw_dim=12, num_samples=800, separation=2.0, noise_scale=0.5, seed=2)
(work / "target.json").write_text(json.dumps(
    {"make_scenario": {**scenario, "corruption": {"target": "M1", "kind": "additive-gaussian", "severity": 30.0}}}
))
# same class structure, fresh samples for the source pre-fit
(work / "source.json").write_text(json.dumps({"make_scenario": scenario, "seed": 1002}))
(work / "full.json").write_text(json.dumps({"seed": 2}))
(work / "noadapt.json").write_text(json.dumps({"seed": 2, "lam": 0, "w_c": 0, "w_g": 0, "w_ra": 0, "w_bal": 0}))

adapgc("gen", work / "target.json", work / "target.bin")
adapgc("gen", work / "source.json", work / "source.bin")
for name in ("noadapt", "full"):
    adapgc("run", work / f"{name}.json", work / "target.bin", work / name, "--source", work / "source.bin", "--dump-cov")
adapgc("eval", work / "noadapt" / "report.json", work / "full" / "report.json")
adapgc("dump-bank", work / "full" / "bank_FUSED.bin")

print("\nfirst metrics records:")
for line in (work / "full" / "metrics.jsonl").read_text().splitlines()[1:3]:
    print(" ", line[:120], "...")

# a bad config is a usage error (exit 1), a truncated stream an I/O error (exit 2)
(work / "bad.json").write_text(json.dumps({"tau": -1}))
print("exit code, bad config:", adapgc("run", work / "bad.json", work / "target.bin", work / "bad", "--source", work / "source.bin"))
data = (work / "target.bin").read_bytes()
(work / "cut.bin").write_bytes(data[: len(data) - 7])
print("exit code, truncated stream:", adapgc("run", work / "full.json", work / "cut.bin", work / "cut", "--source", work / "source.bin"))
print("\nartifacts in", work)
