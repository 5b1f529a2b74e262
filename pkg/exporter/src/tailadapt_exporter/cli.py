"""CLI for the embedding exporter. Exit codes: 0 success, 2 validation error."""

import argparse
import sys

from tailadapt.errors import TailAdaptError

from .export import ExportSpec, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tailadapt-export",
        description="Embed a per-class image folder into a tailadapt TFAE dataset",
    )
    parser.add_argument("--images", required=True,
                        help="image root with one subdirectory per class")
    parser.add_argument("--encoder", default="clip",
                        help="encoder identifier: clip[:<hf-model-id>] or toy[:<dim>] "
                             "(default: clip)")
    parser.add_argument("--data-type", required=True,
                        help="noun inserted into the prompt template (e.g. fundus)")
    parser.add_argument("--out", required=True, help="output dataset directory")
    parser.add_argument("--test-ratio", type=float, default=0.2,
                        help="per-class test fraction (default: 0.2)")
    parser.add_argument("--unbalanced-test", action="store_true",
                        help="keep raw per-class test counts instead of truncating to the minimum")
    parser.add_argument("--seed", type=int, default=0, help="split seed (default: 0)")
    parser.add_argument("--many-min", type=int, default=100,
                        help="manifest subset threshold (default: 100)")
    parser.add_argument("--few-max", type=int, default=20,
                        help="manifest subset threshold (default: 20)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = ExportSpec(
        encoder=args.encoder,
        image_root=args.images,
        data_type=args.data_type,
        out_dir=args.out,
        test_ratio=args.test_ratio,
        balanced_test=not args.unbalanced_test,
        seed=args.seed,
        many_min=args.many_min,
        few_max=args.few_max,
    )
    try:
        manifest_path = export(spec)
    except (TailAdaptError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {manifest_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
