"""Extract MovieLens-100K as `user<TAB>item<TAB>timestamp` from the RecBole wheel.

grouplens.org is not always reachable from CI sandboxes, but the RecBole
wheel on PyPI ships the 100K interaction file. Usage:

    python scripts/fetch_ml100k.py data/ml-100k.tsv
"""
import glob
import subprocess
import sys
import tempfile
import zipfile

MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def main(out_path):
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "recbole==1.2.1",
             "--no-deps", "-q", "-d", tmp],
            check=True,
        )
        wheel = glob.glob(f"{tmp}/recbole-*.whl")[0]
        raw = zipfile.ZipFile(wheel).read(MEMBER).decode()
    lines = raw.splitlines()[1:]  # header: user_id:token item_id:token rating:float timestamp:float
    with open(out_path, "w") as f:
        for line in lines:
            user, item, _rating, ts = line.split("\t")
            f.write(f"{user}\t{item}\t{int(float(ts))}\n")
    print(f"wrote {len(lines)} rows to {out_path}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/ml-100k.tsv")
