"""Write the 5000-image MNIST subset bundled with mlxtend as IDX files.

    pip install --no-deps mlxtend
    python scripts/make_mnist_subset.py data/

The subset holds 500 images per digit, enough for 100-per-class rotated
domains. Any full MNIST IDX pair works equally well.
"""
import sys
from pathlib import Path

import numpy as np
from mlxtend.data import mnist_data

from hetfed.data import write_idx


def main(out_dir: str = "data") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    x, y = mnist_data()
    write_idx(x.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.uint8),
              out / "images-idx3-ubyte", out / "labels-idx1-ubyte")
    print(f"wrote {len(y)} images to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:])
