"""Build a public-domain byte corpus from the Gutenberg texts bundled in the
``shakespeare`` sdist on PyPI (Shakespeare plays and poems, Milton).

    python scripts/fetch_corpus.py --out data/corpus.txt
"""

import argparse
import hashlib
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data/corpus.txt")
    ap.add_argument("--sdist", help="use an already-downloaded shakespeare-0.6.tar.gz")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        sdist = args.sdist
        if sdist is None:
            subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "--no-binary", ":all:",
                            "shakespeare==0.6", "-d", tmp], check=True)
            sdist = next(Path(tmp).glob("shakespeare-*.tar.gz"))
        seen = set()
        parts = []
        with tarfile.open(sdist) as tar:
            members = sorted((m for m in tar.getmembers()
                              if m.isfile() and "/texts/" in m.name and m.name.endswith(".txt")),
                             key=lambda m: m.name)
            for m in members:
                data = tar.extractfile(m).read()
                digest = hashlib.sha256(data).hexdigest()
                if digest in seen:
                    continue
                seen.add(digest)
                parts.append(data.replace(b"\r\n", b"\n").strip() + b"\n\n")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(b"".join(parts))
    print(f"wrote {out} ({out.stat().st_size} bytes from {len(parts)} texts)")


if __name__ == "__main__":
    main()
