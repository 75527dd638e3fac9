"""Build manifest.csv from a directory tree laid out as <root>/<label>/<patient>/<slice image>.

``label`` directory names are matched case-insensitively against the aliases
below; anything else is skipped with a warning.
"""

import argparse
import sys
from pathlib import Path

from ctaug.data_catalog import Label, SliceRecord, write_manifest

ALIASES = {"covid": Label.COVID, "covid-19": Label.COVID, "covid19": Label.COVID,
           "normal": Label.NORMAL, "non-covid": Label.NORMAL}
EXTENSIONS = {".png", ".jpg", ".jpeg", ".tif", ".tiff"}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("root")
    ap.add_argument("--out", default=None, help="defaults to <root>/manifest.csv")
    args = ap.parse_args()
    root = Path(args.root)
    records = []
    for label_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        label = ALIASES.get(label_dir.name.lower())
        if label is None:
            print(f"skipping {label_dir}: unknown label directory", file=sys.stderr)
            continue
        for patient_dir in sorted(p for p in label_dir.iterdir() if p.is_dir()):
            for img in sorted(patient_dir.iterdir()):
                if img.suffix.lower() in EXTENSIONS:
                    # patient ids are prefixed so covid and normal folders cannot collide
                    records.append(SliceRecord(f"{label.value}-{patient_dir.name}",
                                               str(img.relative_to(root)), label))
    out = Path(args.out) if args.out else root / "manifest.csv"
    write_manifest(records, out)
    n_covid = sum(r.label is Label.COVID for r in records)
    print(f"{out}: {len(records)} slices (covid {n_covid}, normal {len(records) - n_covid})")


if __name__ == "__main__":
    main()
