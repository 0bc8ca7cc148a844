#!/usr/bin/env python3
"""Download the four MNIST IDX archives into <root>/mnist/.

Needs network access; nothing in the package or the test suite downloads
anything by itself. Archives are md5-verified against the canonical digests.
"""

import argparse
import hashlib
import os
import sys
import urllib.request

from anadis.data import DATA_ROOT_ENV, MNIST_GZ_MD5

MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
    "http://yann.lecun.com/exdb/mnist/",
)


def fetch(name, dest):
    for mirror in MIRRORS:
        url = mirror + name
        try:
            print(f"fetching {url}")
            with urllib.request.urlopen(url, timeout=60) as resp:
                blob = resp.read()
            digest = hashlib.md5(blob).hexdigest()
            if digest != MNIST_GZ_MD5[name]:
                print(f"  md5 mismatch from {mirror} ({digest}), trying next mirror")
                continue
            with open(dest, "wb") as f:
                f.write(blob)
            return True
        except OSError as exc:
            print(f"  failed: {exc}")
    return False


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", default=os.environ.get(DATA_ROOT_ENV, "data"),
                        help=f"dataset root (default: ${DATA_ROOT_ENV} or ./data)")
    args = parser.parse_args()
    out_dir = os.path.join(args.root, "mnist")
    os.makedirs(out_dir, exist_ok=True)
    ok = True
    for name in MNIST_GZ_MD5:
        dest = os.path.join(out_dir, name)
        if os.path.exists(dest):
            print(f"already present: {dest}")
            continue
        ok = fetch(name, dest) and ok
    if ok:
        print(f"done; point {DATA_ROOT_ENV} at {os.path.abspath(args.root)}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
