"""Write a synthetic stand-in for the CT dataset: PNG slices plus manifest.csv."""

import argparse

from ctaug.synthetic import write_synthetic_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", help="output directory")
    ap.add_argument("--patients", type=int, default=20)
    ap.add_argument("--slices-per-patient", type=int, default=10)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    manifest = write_synthetic_dataset(args.out, args.patients, args.slices_per_patient, args.dim, args.seed)
    print(manifest)


if __name__ == "__main__":
    main()
