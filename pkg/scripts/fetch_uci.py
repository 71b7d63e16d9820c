"""Materialize the UCI "Multiple Features" digit views in their original text layout.

The six mfeat files are redistributed inside the mvlearn wheel as CSV with a
header row and a trailing label column. This script downloads the wheel with
pip, strips both, and writes whitespace-separated files named like the UCI
originals (mfeat-fou, mfeat-fac, ...), 2000 rows each, digits in blocks of 200.

Usage: python scripts/fetch_uci.py [out_dir]
"""

import csv
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

VIEWS = ("fou", "fac", "kar", "pix", "zer", "mor")


def main(out_dir="data/uci"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "mvlearn==0.5.0",
             "--no-deps", "-q", "-d", tmp],
            check=True,
        )
        wheel = next(Path(tmp).glob("mvlearn-*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            for view in VIEWS:
                name = f"mvlearn/datasets/UCImultifeature/mfeat-{view}.csv"
                text = zf.read(name).decode()
                rows = list(csv.reader(io.StringIO(text)))[1:]
                lines = [" ".join(row[:-1]) for row in rows if row]
                (out / f"mfeat-{view}").write_text("\n".join(lines) + "\n")
                print(f"wrote {out / f'mfeat-{view}'} ({len(lines)} rows)")


if __name__ == "__main__":
    main(*sys.argv[1:])
