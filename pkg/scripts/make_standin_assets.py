#!/usr/bin/env python3
"""Build the synthetic stand-in shape/texture models used by tests and demos."""

import argparse
from pathlib import Path

from pinna.morphable import (
    build_standin_shape_model,
    build_standin_texture_model,
    save_shape_model,
    save_texture_model,
)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="assets", help="where to write the .npz containers")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shape = build_standin_shape_model(seed=args.seed)
    texture = build_standin_texture_model(seed=args.seed)
    save_shape_model(shape, out / "standin_shape.npz", provenance=f"procedural ellipsoid PCA, seed={args.seed}")
    save_texture_model(texture, out / "standin_texture.npz", provenance=f"procedural low-frequency basis, seed={args.seed}")
    print(f"wrote {out / 'standin_shape.npz'} ({shape.n_vertices} vertices, {shape.n_components} components)")
    print(f"wrote {out / 'standin_texture.npz'} ({texture.mean_texture.shape[0]}px, {texture.n_components} components)")


if __name__ == "__main__":
    main()
