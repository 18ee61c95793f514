#!/usr/bin/env python3
"""Generate a small synthetic image set for desk-scale training runs."""

import argparse

from bgvae.data import make_toy_dataset


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir")
    parser.add_argument("--count", type=int, default=100)
    parser.add_argument("--size", type=int, default=96)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    paths = make_toy_dataset(args.out_dir, args.count, args.size, args.seed)
    print(f"wrote {len(paths)} images to {args.out_dir}")


if __name__ == "__main__":
    main()
