"""End-to-end demo on a small synthetic corpus.

Builds a simulated basis dataset and a domain-shifted on-field dataset,
pretrains a basis model, adapts it by fine-tuning, and emits prediction
plot tables. Everything lands in ./demo_workspace. Runs in about a
minute on one core.
"""

import sys
from pathlib import Path

from headstrain.cli import main

ROOT = Path("demo_workspace")


def run(*args):
    argv = [str(a) for a in args]
    print(f"$ headstrain {' '.join(argv)}", flush=True)
    rc = main(argv)
    if rc != 0:
        sys.exit(rc)


def main_demo():
    ROOT.mkdir(exist_ok=True)
    basis = ROOT / "basis_ds"
    onfield = ROOT / "onfield_ds"
    if not basis.exists():
        run("generate", "--profile", "hm_like", "--n", 200, "--elements", 64,
            "--seed", 11, "--brain-seed", 7, "--out", basis)
    if not onfield.exists():
        run("generate", "--profile", "mma_like", "--n", 60, "--elements", 64,
            "--seed", 12, "--brain-seed", 7, "--freq-scale", 1.25,
            "--damping-scale", 1.2, "--gain-scale", 0.8, "--out", onfield)

    basis_bundle = ROOT / "basis_mps.bundle"
    run("pretrain", "--dataset", basis, "--quantity", "mps",
        "--epochs", 200, "--seed", 0, "--out", basis_bundle)

    adapted = ROOT / "transfer_mps.bundle"
    run("adapt", "--mode", "transfer", "--train-data", onfield,
        "--quantity", "mps", "--basis-bundle", basis_bundle,
        "--basis-data", basis, "--epoch-grid", "100,300", "--seed", 1,
        "--out", adapted)

    run("predict", "--bundle", adapted, "--dataset", onfield,
        "--out", ROOT / "onfield_pred_mps.bin")
    run("export-plots", "--bundle", adapted, "--dataset", onfield,
        "--out-dir", ROOT / "plots")
    print(f"done; see {ROOT}/", flush=True)


if __name__ == "__main__":
    main_demo()
