"""Training CLI: fit the corpus and export weights plus a report."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .export import export_weights
from .shapes import default_corpus, outline_from_csv
from .training import TrainConfig, train


def _corpus_from_dir(path):
    shapes = []
    for name in sorted(os.listdir(path)):
        if name.endswith(".csv"):
            shapes.append(outline_from_csv(name[:-4],
                                           os.path.join(path, name)))
    if not shapes:
        raise SystemExit(f"no outline CSVs found in {path}")
    return shapes


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="sdfgen", description="train the 2D latent SDF corpus")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train")
    p.add_argument("--corpus", help="directory of outline CSVs "
                                    "(default: procedural corpus)")
    p.add_argument("--out", required=True, help="weight file to write")
    p.add_argument("--report", help="reconstruction report JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    args = parser.parse_args(argv)

    corpus = (_corpus_from_dir(args.corpus) if args.corpus
              else default_corpus())
    cfg = TrainConfig() if args.steps is None \
        else TrainConfig(steps=args.steps)
    result = train(corpus, cfg, seed=args.seed)
    export_weights(result, args.out)
    print(f"wrote {args.out}")
    doc = result.report(corpus)
    print(f"mean holdout MAE: {doc['mean_holdout_mae_m'] * 1000:.2f} mm")
    if args.report:
        with open(args.report, "w") as f:
            json.dump(doc, f, indent=2)
        print(f"wrote {args.report}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
