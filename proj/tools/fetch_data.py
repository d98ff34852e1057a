#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Prepare the two desk-scale corpora used by the long acceptance runs.

data/moby_dick.txt  First 1,000,000 characters of Moby-Dick (public domain),
                    chapters 1-135 in order, taken from the npm package
                    @stdlib/datasets-moby-dick.
data/mnist_5k.csv   5,000 MNIST digits shipped inside the mlxtend wheel,
                    rewritten as label followed by 784 pixels (0-255). The
                    source is sorted by class; rows are interleaved
                    round-robin over classes so that contiguous
                    train/valid/test splits stay class-balanced.

Both sources go through the configured npm registry and pip index, so the
script works behind a package mirror. Pass --cache DIR to reuse downloads.
"""
import argparse
import gzip
import io
import json
import subprocess
import sys
import tarfile
import urllib.request
import zipfile
from pathlib import Path

MOBY_PACKAGE = "@stdlib/datasets-moby-dick"
MOBY_VERSION = "0.2.3"
MLXTEND_VERSION = "0.24.0"
TEXT_CHARS = 1_000_000
CHAPTERS = 135


def npm_registry() -> str:
    try:
        out = subprocess.run(["npm", "config", "get", "registry"], capture_output=True,
                             text=True, check=True, timeout=60).stdout.strip()
        return out.rstrip("/") if out else "https://registry.npmjs.org"
    except (OSError, subprocess.SubprocessError):
        return "https://registry.npmjs.org"


def moby_tarball(cache: Path) -> Path:
    path = cache / f"datasets-moby-dick-{MOBY_VERSION}.tgz"
    if not path.exists():
        url = f"{npm_registry()}/{MOBY_PACKAGE}/-/datasets-moby-dick-{MOBY_VERSION}.tgz"
        print(f"downloading {url}", file=sys.stderr)
        with urllib.request.urlopen(url, timeout=300) as r:
            path.write_bytes(r.read())
    return path


def mlxtend_wheel(cache: Path) -> Path:
    found = sorted(cache.glob(f"mlxtend-{MLXTEND_VERSION}-*.whl"))
    if not found:
        subprocess.run([sys.executable, "-m", "pip", "download", f"mlxtend=={MLXTEND_VERSION}",
                        "--no-deps", "-d", str(cache)], check=True)
        found = sorted(cache.glob(f"mlxtend-{MLXTEND_VERSION}-*.whl"))
    if not found:
        sys.exit("mlxtend wheel not found after download")
    return found[0]


def build_text(tarball: Path, out: Path) -> None:
    parts = []
    with tarfile.open(tarball) as tar:
        for k in range(1, CHAPTERS + 1):
            member = tar.extractfile(f"package/data/chapter_{k}.json")
            if member is None:
                sys.exit(f"chapter {k} missing from {tarball}")
            parts.append(json.load(member)["text"].strip())
    text = "\n\n".join(parts)
    if len(text) < TEXT_CHARS:
        sys.exit(f"corpus has only {len(text)} characters")
    out.write_text(text[:TEXT_CHARS], encoding="utf-8")
    print(f"wrote {out} ({TEXT_CHARS} characters)", file=sys.stderr)


def build_mnist(wheel: Path, out: Path) -> None:
    with zipfile.ZipFile(wheel) as z:
        name = next((n for n in z.namelist() if n.endswith("mnist_5k.csv.gz")), None)
        if name is None:
            sys.exit(f"mnist_5k.csv.gz not in {wheel}")
        raw = gzip.decompress(z.read(name)).decode("ascii")
    by_class: dict[str, list[str]] = {}
    for k, line in enumerate(l for l in io.StringIO(raw) if l.strip()):
        fields = line.strip().split(",")
        if len(fields) != 785:
            sys.exit(f"row {k}: expected 785 fields, got {len(fields)}")
        # mlxtend stores the label in the last column
        by_class.setdefault(fields[-1], []).append(",".join([fields[-1]] + fields[:-1]))
    rows = []
    queues = [by_class[c] for c in sorted(by_class, key=int)]
    for k in range(max(len(q) for q in queues)):
        rows.extend(q[k] for q in queues if k < len(q))
    out.write_text("".join(r + "\n" for r in rows))
    print(f"wrote {out} ({len(rows)} images)", file=sys.stderr)


def main() -> None:
    root = Path(__file__).resolve().parent.parent
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=root / "data")
    ap.add_argument("--cache", type=Path, default=root / "data" / "downloads")
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    args.cache.mkdir(parents=True, exist_ok=True)
    build_text(moby_tarball(args.cache), args.out / "moby_dick.txt")
    build_mnist(mlxtend_wheel(args.cache), args.out / "mnist_5k.csv")


if __name__ == "__main__":
    main()
