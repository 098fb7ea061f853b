#!/usr/bin/env python
"""Generate a synthetic rectangle dataset in the standard layout."""

import argparse

from roomdet.toydata import make_toy_dataset


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("root", help="output directory")
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--size", type=int, default=320)
    p.add_argument("--max-boxes", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fmt", choices=("png", "npy"), default="png")
    p.add_argument("--no-val", action="store_true", help="skip the mirrored val split")
    args = p.parse_args()
    manifest = make_toy_dataset(
        args.root, num_images=args.images, num_classes=args.classes,
        image_size=args.size, max_boxes=args.max_boxes, seed=args.seed,
        val_mirror=not args.no_val, fmt=args.fmt)
    print(f"wrote {args.images} images per split; manifest at {manifest}")


if __name__ == "__main__":
    main()
