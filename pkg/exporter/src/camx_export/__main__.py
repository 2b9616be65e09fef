"""Command line front end: export a checkpoint bundle, or run the training
recipe that produces one."""

from __future__ import annotations

import argparse
import sys

from .export import UnsupportedLayerError, export


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="camx-export")
    sub = parser.add_subparsers(dest="command", required=True)

    p_export = sub.add_parser("export", help="convert a checkpoint bundle to manifest+blob+fixtures")
    p_export.add_argument("checkpoint")
    p_export.add_argument("out_dir")

    p_recipe = sub.add_parser("recipe", help="train the fixture classifier and write a checkpoint bundle")
    p_recipe.add_argument("out_dir")
    p_recipe.add_argument("--seed", type=int, default=7)
    p_recipe.add_argument("--epochs", type=int, default=8)
    p_recipe.add_argument("--train-per-class", type=int, default=1200)
    p_recipe.add_argument("--corpus-size", type=int, default=240)

    args = parser.parse_args(argv)
    if args.command == "export":
        try:
            result = export(args.checkpoint, args.out_dir)
        except (UnsupportedLayerError, ValueError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(f"wrote {result.manifest_path}")
        print(f"wrote {result.blob_path}")
        print(f"wrote {result.fixtures_path} ({len(result.fixture_image_paths)} images)")
        return 0

    from .recipe import train

    stats = train(args.out_dir, seed=args.seed, epochs=args.epochs,
                  train_per_class=args.train_per_class, corpus_size=args.corpus_size)
    print(f"val accuracy {stats['val_accuracy']:.4f} after {len(stats['epoch_loss'])} epochs")
    return 0


if __name__ == "__main__":
    sys.exit(main())
