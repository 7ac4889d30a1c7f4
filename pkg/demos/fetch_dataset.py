"""
Fetch the primary-school contact log
====================================

The SocioPatterns primary-school log is not shipped with this package.  A copy
travels inside the ``tnetwork`` 1.2 wheel on PyPI; this script downloads the
wheel without installing it and extracts the log to ``data/primaryschool.csv``.

Run from the repository root::

    python3 demos/fetch_dataset.py
"""
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

MEMBER = "tnetwork/dyn_graph/toy_data/Primary_School.csv"
TARGET = Path(__file__).resolve().parents[1] / "data" / "primaryschool.csv"

if TARGET.exists():
    print(f"{TARGET} already present")
    sys.exit(0)

with tempfile.TemporaryDirectory() as tmp:
    # wheel only: no dependencies, no build step
    subprocess.run([sys.executable, "-m", "pip", "download", "tnetwork==1.2", "--no-deps",
                    "--only-binary", ":all:", "-d", tmp, "-q"], check=True)
    wheel = next(Path(tmp).glob("tnetwork-1.2-*.whl"))
    with zipfile.ZipFile(wheel) as zf:
        data = zf.read(MEMBER)

TARGET.parent.mkdir(exist_ok=True)
TARGET.write_bytes(data)

# one line per 20 s contact: time, node, node, class, class
lines = data.decode().splitlines()
print(f"wrote {TARGET} ({len(lines)} contact records)")
print("first record:", lines[0])
