"""File formats: feature matrices, label matrices, dataset folders, plans.

Binary matrix containers open with one ASCII header line (magic token,
format version, then key=value fields) followed by the row-major 64-bit
little-endian payload, so a file is self-describing without being parsed
past the first newline. Dataset folders pair a JSON manifest with one
recording CSV per impact and one label matrix per quantity. Experiment
plans and the workspace configuration are versioned JSON documents.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    FileFormatError,
    InvalidDataError,
    InvalidParameterError,
    TruncatedFileError,
    VersionError,
)
from .evaluation import DatasetSpec, ExperimentPlan
from .oracle import Dataset
from .signals import read_recording_csv, write_recording_csv
from .strategies import StrategySpec, canonical_quantity
from .nn import TrainConfig

FEATMAT_MAGIC = "headstrain-featmat"
LABELMAT_MAGIC = "headstrain-labelmat"
MATRIX_VERSION = 1
DATASET_MANIFEST_VERSION = 1
PLAN_VERSION = 1
WORKSPACE_VERSION = 1

WORKSPACE_ENV_VAR = "HEADSTRAIN_WORKSPACE"


# ---------------------------------------------------------------------------
# binary matrix containers


def _format_header(magic, fields) -> bytes:
    parts = [magic, str(MATRIX_VERSION)]
    parts += [f"{k}={v}" for k, v in fields.items()]
    return (" ".join(parts) + "\n").encode("ascii")


def _parse_header(raw: bytes, magic: str, origin: str):
    end = raw.find(b"\n")
    if end < 0:
        raise TruncatedFileError(f"{origin}: no header line")
    try:
        tokens = raw[:end].decode("ascii").split(" ")
    except UnicodeDecodeError:
        raise FileFormatError(f"{origin}: header is not ASCII")
    if not tokens or tokens[0] != magic:
        raise FileFormatError(f"{origin}: expected a {magic} file")
    if len(tokens) < 2 or not tokens[1].isdigit():
        raise FileFormatError(f"{origin}: missing format version")
    version = int(tokens[1])
    if version != MATRIX_VERSION:
        raise VersionError(f"{origin}: unsupported format version {version}")
    fields = {}
    for tok in tokens[2:]:
        if "=" not in tok:
            raise FileFormatError(f"{origin}: malformed header field {tok!r}")
        k, v = tok.split("=", 1)
        fields[k] = v
    return fields, raw[end + 1:]


def _payload_matrix(body, rows, cols, origin):
    expected = rows * cols * 8
    if len(body) < expected:
        raise TruncatedFileError(
            f"{origin}: payload holds {len(body)} bytes, expected {expected}"
        )
    if len(body) > expected:
        raise FileFormatError(f"{origin}: {len(body) - expected} trailing bytes")
    mat = np.frombuffer(body, dtype="<f8").reshape(rows, cols)
    if not np.all(np.isfinite(mat)):
        raise InvalidDataError(f"{origin}: payload contains non-finite values")
    return np.ascontiguousarray(mat)


def _int_field(fields, key, origin) -> int:
    if key not in fields:
        raise FileFormatError(f"{origin}: header misses field {key!r}")
    try:
        return int(fields[key])
    except ValueError:
        raise FileFormatError(f"{origin}: field {key!r} is not an integer")


def write_feature_matrix(path, features, layout_version: str = "v1") -> None:
    """Write an (impacts, 510) feature block with its layout version."""
    X = np.ascontiguousarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidDataError(f"feature matrix must be 2-d, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InvalidDataError("refusing to write non-finite features")
    header = _format_header(FEATMAT_MAGIC, {
        "layout": layout_version, "rows": X.shape[0], "cols": X.shape[1],
    })
    with open(path, "wb") as fh:
        fh.write(header + X.astype("<f8").tobytes())


def read_feature_matrix(path):
    """Read a feature matrix; returns (features, layout_version)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, body = _parse_header(raw, FEATMAT_MAGIC, str(path))
    rows = _int_field(fields, "rows", str(path))
    cols = _int_field(fields, "cols", str(path))
    if "layout" not in fields:
        raise FileFormatError(f"{path}: header misses field 'layout'")
    return _payload_matrix(body, rows, cols, str(path)), fields["layout"]


def write_feature_table(path, features) -> None:
    """Debugging export: one text row per impact, comma-separated floats."""
    X = np.asarray(features, dtype=np.float64)
    with open(path, "w", encoding="ascii") as fh:
        for row in np.atleast_2d(X):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def write_label_matrix(path, labels, quantity: str, fingerprint: str = "") -> None:
    """Write an (impacts, elements) label block for one quantity."""
    Y = np.ascontiguousarray(labels, dtype=np.float64)
    if Y.ndim != 2:
        raise InvalidDataError(f"label matrix must be 2-d, got shape {Y.shape}")
    if not np.all(np.isfinite(Y)):
        raise InvalidDataError("refusing to write non-finite labels")
    q = canonical_quantity(quantity).upper()
    header = _format_header(LABELMAT_MAGIC, {
        "quantity": q, "impacts": Y.shape[0], "elements": Y.shape[1],
        "fingerprint": fingerprint,
    })
    with open(path, "wb") as fh:
        fh.write(header + Y.astype("<f8").tobytes())


def read_label_matrix(path):
    """Read a label matrix; returns (labels, quantity, fingerprint)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, body = _parse_header(raw, LABELMAT_MAGIC, str(path))
    rows = _int_field(fields, "impacts", str(path))
    cols = _int_field(fields, "elements", str(path))
    if fields.get("quantity") not in ("MPS", "MPSR"):
        raise FileFormatError(f"{path}: quantity must be MPS or MPSR")
    labels = _payload_matrix(body, rows, cols, str(path))
    return labels, fields["quantity"].lower(), fields.get("fingerprint", "")


# ---------------------------------------------------------------------------
# dataset folders


def save_dataset(ds: Dataset, root) -> None:
    """Write a dataset folder: manifest.json, recordings/*.csv, label files."""
    os.makedirs(os.path.join(root, "recordings"), exist_ok=True)
    entries = []
    for i, rec in enumerate(ds.recordings):
        rel = os.path.join("recordings", f"{i:05d}.csv")
        write_recording_csv(rec, os.path.join(root, rel))
        entries.append({"id": rec.id, "source_tag": rec.source_tag, "file": rel})
    fp = ds.manifest.get("config_fingerprint", "")
    write_label_matrix(os.path.join(root, "labels_mps.bin"), ds.mps, "mps", fp)
    write_label_matrix(os.path.join(root, "labels_mpsr.bin"), ds.mpsr, "mpsr", fp)
    doc = {
        "kind": "headstrain-dataset",
        "format_version": DATASET_MANIFEST_VERSION,
        "manifest": dict(ds.manifest),
        "recordings": entries,
        "labels": {"mps": "labels_mps.bin", "mpsr": "labels_mpsr.bin"},
    }
    with open(os.path.join(root, "manifest.json"), "w", encoding="ascii") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_dataset(root) -> Dataset:
    """Read a dataset folder back; recordings round-trip bitwise."""
    path = os.path.join(root, "manifest.json")
    try:
        with open(path, "r", encoding="ascii") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise FileFormatError(f"{path}: not a JSON manifest")
    if not isinstance(doc, dict) or doc.get("kind") != "headstrain-dataset":
        raise FileFormatError(f"{path}: not a dataset manifest")
    if doc.get("format_version") != DATASET_MANIFEST_VERSION:
        raise VersionError(f"{path}: unsupported manifest version "
                           f"{doc.get('format_version')!r}")
    recs = []
    for entry in doc["recordings"]:
        recs.append(read_recording_csv(os.path.join(root, entry["file"]),
                                       entry["id"], entry["source_tag"]))
    fp = doc["manifest"].get("config_fingerprint", "")
    mps, q1, fp1 = read_label_matrix(os.path.join(root, doc["labels"]["mps"]))
    mpsr, q2, fp2 = read_label_matrix(os.path.join(root, doc["labels"]["mpsr"]))
    if q1 != "mps" or q2 != "mpsr":
        raise FileFormatError(f"{path}: label files carry the wrong quantities")
    if fp and (fp1 != fp or fp2 != fp):
        raise FileFormatError(f"{path}: label fingerprints disagree with the manifest")
    if len(recs) != mps.shape[0] or mps.shape != mpsr.shape:
        raise FileFormatError(
            f"{path}: {len(recs)} recordings against label blocks "
            f"{mps.shape} and {mpsr.shape}"
        )
    return Dataset(recordings=tuple(recs), mps=mps, mpsr=mpsr,
                   manifest=dict(doc["manifest"]))


# ---------------------------------------------------------------------------
# experiment plan files


def plan_from_dict(doc: dict) -> ExperimentPlan:
    """Build an ExperimentPlan from its dictionary form (see plan files)."""
    if not isinstance(doc, dict):
        raise FileFormatError("plan document must be a JSON object")
    try:
        basis = DatasetSpec(**doc["basis"])
        onfield = DatasetSpec(**doc["onfield"])
        strategies = []
        for s in doc["strategies"]:
            train = s.get("train")
            if train is not None:
                train = TrainConfig(learning_rate=train["learning_rate"],
                                    epochs=train["epochs"],
                                    batch_size=train.get("batch_size", 128),
                                    l2_lambda=train.get("l2_lambda", 0.0))
            strategies.append(StrategySpec(
                name=s["name"],
                train=train,
                freeze_grid=tuple(s.get("freeze_grid", (0, 1, 2))),
                lr_grid=None if s.get("lr_grid") is None else tuple(s["lr_grid"]),
                epoch_grid=tuple(s.get("epoch_grid", (100, 300, 1000))),
            ))
        return ExperimentPlan(
            basis=basis,
            onfield=onfield,
            quantity=doc["quantity"],
            strategies=tuple(strategies),
            n_elements=doc["n_elements"],
            brain_seed=doc.get("brain_seed", 0),
            ratios=tuple(doc.get("ratios", (0.70, 0.15, 0.15))),
            sweep=None if doc.get("sweep") is None else tuple(doc["sweep"]),
            n_runs=doc.get("n_runs", 20),
            base_seed=doc.get("base_seed", 0),
            epochs=doc.get("epochs", 500),
            name=doc.get("name", "experiment"),
        )
    except (KeyError, TypeError) as exc:
        raise FileFormatError(f"plan document is malformed: {exc}")


def save_plan(plan: ExperimentPlan, path) -> None:
    doc = {"kind": "headstrain-plan", "format_version": PLAN_VERSION}
    doc.update(plan.to_dict())
    with open(path, "w", encoding="ascii") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_plan(path) -> ExperimentPlan:
    try:
        with open(path, "r", encoding="ascii") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise FileFormatError(f"{path}: not a JSON plan")
    if not isinstance(doc, dict) or doc.get("kind") != "headstrain-plan":
        raise FileFormatError(f"{path}: not an experiment plan")
    if doc.get("format_version") != PLAN_VERSION:
        raise VersionError(f"{path}: unsupported plan version "
                           f"{doc.get('format_version')!r}")
    return plan_from_dict(doc)


def shipped_plan_path(name: str) -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    return os.path.join(here, "data", "plans", f"{name}.json")


def list_shipped_plans() -> list:
    here = os.path.dirname(os.path.abspath(__file__))
    folder = os.path.join(here, "data", "plans")
    if not os.path.isdir(folder):
        return []
    return sorted(f[:-5] for f in os.listdir(folder) if f.endswith(".json"))


def load_shipped_plan(name: str) -> ExperimentPlan:
    path = shipped_plan_path(name)
    if not os.path.exists(path):
        raise InvalidParameterError(
            f"no shipped plan named {name!r}; available: {list_shipped_plans()}"
        )
    return load_plan(path)


# ---------------------------------------------------------------------------
# workspace configuration


@dataclass(frozen=True)
class WorkspaceConfig:
    """Root folder plus conventional subpaths for datasets, models, reports."""

    root: str
    datasets: str = "datasets"
    models: str = "models"
    reports: str = "reports"
    surrogate_config: str = None

    def path(self, kind: str) -> str:
        sub = {"datasets": self.datasets, "models": self.models,
               "reports": self.reports}.get(kind)
        if sub is None:
            raise InvalidParameterError(f"unknown workspace path kind {kind!r}")
        return os.path.join(self.root, sub)


def workspace_root(explicit=None) -> str:
    if explicit:
        return str(explicit)
    return os.environ.get(WORKSPACE_ENV_VAR, os.getcwd())


def load_workspace(root=None) -> WorkspaceConfig:
    """Load <root>/workspace.json when present, else the conventional layout."""
    root = workspace_root(root)
    path = os.path.join(root, "workspace.json")
    if not os.path.exists(path):
        return WorkspaceConfig(root=root)
    try:
        with open(path, "r", encoding="ascii") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise FileFormatError(f"{path}: not a JSON workspace config")
    if doc.get("format_version") != WORKSPACE_VERSION:
        raise VersionError(f"{path}: unsupported workspace version "
                           f"{doc.get('format_version')!r}")
    paths = doc.get("paths", {})
    surrogate = doc.get("surrogate_config")
    if surrogate is not None:
        full = os.path.join(root, surrogate)
        if not os.path.exists(full):
            raise InvalidDataError(f"{path}: surrogate config {surrogate!r} not found")
    return WorkspaceConfig(
        root=root,
        datasets=paths.get("datasets", "datasets"),
        models=paths.get("models", "models"),
        reports=paths.get("reports", "reports"),
        surrogate_config=surrogate,
    )


def save_workspace(cfg: WorkspaceConfig) -> None:
    doc = {
        "kind": "headstrain-workspace",
        "format_version": WORKSPACE_VERSION,
        "paths": {"datasets": cfg.datasets, "models": cfg.models,
                  "reports": cfg.reports},
        "surrogate_config": cfg.surrogate_config,
    }
    with open(os.path.join(cfg.root, "workspace.json"), "w", encoding="ascii") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
