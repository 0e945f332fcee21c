"""Regenerate the frozen feature-matrix golden file used by the test suite.

The golden file pins the layout v1 feature values for a fixed set of
synthetic recordings (two seeds per impact profile). It only needs to be
rebuilt if the layout itself is revised, which also means bumping the
layout version and fingerprint.
"""

from pathlib import Path

from headstrain.features import extract_feature_matrix
from headstrain.oracle import generate_impact, load_profiles
from headstrain.storage import write_feature_matrix

OUT = Path(__file__).resolve().parent.parent / "tests" / "data" / "golden_features_v1.bin"


def golden_recordings():
    recs = []
    for name, prof in sorted(load_profiles().items()):
        for seed in (0, 1):
            recs.append(generate_impact(prof, seed))
    return recs


def main():
    X = extract_feature_matrix(golden_recordings())
    OUT.parent.mkdir(parents=True, exist_ok=True)
    write_feature_matrix(OUT, X)
    print(f"wrote {OUT} shape={X.shape}")


if __name__ == "__main__":
    main()
