"""
Activation memory and the command line
======================================

The profiler counts bytes held between forward and backward. The reversible
backbone keeps the stored input plus the last output. The standard backbone
keeps every intermediate of every mixed node. The same sweep is also
available as ``revdarts memprofile``.
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

from revdarts.profiler import ProfileConfig, profile_memory, summarize

rows = profile_memory(ProfileConfig(d=[48], depths=[1, 2, 4], batch_size=2, seq_len=8))
for p in summarize(rows)["points"]:
    print(f"depth {p['depth']}: reversible {p['reversible_retained_bytes']:>8d}  "
          f"standard {p['standard_retained_bytes']:>9d}  ratio {p['ratio']:.4f}")

# the CLI writes a config snapshot next to every artifact
out = Path(tempfile.mkdtemp())
cmd = [sys.executable, "-m", "revdarts.cli", "memprofile", "--out", str(out / "mp"),
       "--set", "memprofile.d=[16]", "--set", "memprofile.depths=[1,2]",
       "--set", "memprofile.batch_size=2", "--set", "memprofile.seq_len=4"]
print("$", " ".join(cmd[2:]))
subprocess.run(cmd, check=True)
print((out / "mp" / "memprofile.csv").read_text())

# invalid settings fail before any work, naming the field
bad = subprocess.run([sys.executable, "-m", "revdarts.cli", "search", "--out", str(out / "bad"),
                      "--set", "search.dropout=2"], capture_output=True, text=True)
print("exit", bad.returncode, bad.stderr.strip())

# gradcheck reports each oracle comparison
gc = subprocess.run([sys.executable, "-m", "revdarts.cli", "gradcheck", "--out", str(out / "gc"),
                     "--set", "gradcheck.quick=true"], capture_output=True, text=True)
print("\n".join(gc.stdout.splitlines()[:2] + ["..."] + gc.stdout.splitlines()[-1:]))
print("snapshot keys:", sorted(json.loads((out / "gc" / "config.json").read_text())))
