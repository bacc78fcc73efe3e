"""Write the 5000-image MNIST subset shipped inside the mlxtend wheel as IDX files.

Usage: python3 scripts/mnist_subset_to_idx.py <mlxtend wheel> <output dir>

The CSV rows are ``784 pixels, label``. Output files use the official names so
``saleak.data.find_mnist`` picks them up.
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main(wheel, out_dir):
    with zipfile.ZipFile(wheel) as zf:
        raw = gzip.decompress(zf.read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    labels = table[:, -1].astype(np.uint8)
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(out / "train-images-idx3-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x803, *images.shape) + images.tobytes())
    with gzip.GzipFile(out / "train-labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x801, len(labels)) + labels.tobytes())
    print(f"wrote {len(labels)} images to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
