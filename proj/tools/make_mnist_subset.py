#!/usr/bin/env python3
"""Write a 5000-image MNIST subset as gzip-compressed IDX files.

The subset is the one bundled with the mlxtend wheel (500 images per digit,
28x28, 0-255 grey levels, label in the last CSV column). The wheel is
fetched with pip, so no dataset host needs to be reachable.

    python3 tools/make_mnist_subset.py data/mnist5k
"""
import argparse
import gzip
import pathlib
import struct
import subprocess
import sys
import tempfile
import zipfile

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def fetch_csv(workdir: pathlib.Path) -> list[list[int]]:
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "mlxtend==0.24.0", "--no-deps",
         "-d", str(workdir), "-q"],
        check=True,
    )
    wheel = next(workdir.glob("mlxtend-*.whl"))
    raw = gzip.decompress(zipfile.ZipFile(wheel).read(CSV_MEMBER)).decode()
    return [[int(v) for v in line.split(",")] for line in raw.splitlines() if line]


def write_idx(out: pathlib.Path, rows: list[list[int]]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    images = bytearray(struct.pack(">IIII", 0x00000803, len(rows), 28, 28))
    labels = bytearray(struct.pack(">II", 0x00000801, len(rows)))
    for row in rows:
        pixels, label = row[:-1], row[-1]
        assert len(pixels) == 784 and 0 <= label <= 9
        images.extend(bytes(pixels))
        labels.append(label)
    # mtime=0 keeps the archives byte-reproducible.
    with gzip.GzipFile(out / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(bytes(images))
    with gzip.GzipFile(out / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(bytes(labels))


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out", type=pathlib.Path)
    args = parser.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        rows = fetch_csv(pathlib.Path(tmp))
    write_idx(args.out, rows)
    print(f"wrote {len(rows)} samples to {args.out}")


if __name__ == "__main__":
    main()
