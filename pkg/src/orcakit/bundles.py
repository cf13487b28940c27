"""Tensor-bundle files (manifest + raw little-endian blobs), CSV ingestion
for tabular data, and the seeded synthetic task generators."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError
from .tensor import make_rng

DTYPES = {"f32": "<f4", "i32": "<i4"}


@dataclass
class Bundle:
    name: str
    features: np.ndarray          # (n, c, *spatial) float32
    labels: np.ndarray            # (n,) int32 or (n, c_out, *spatial) float32
    label_kind: str               # classification | dense
    classes: int

    def __post_init__(self):
        if self.label_kind not in ("classification", "dense"):
            raise ContractError(f"unknown label kind {self.label_kind!r}")
        n = self.features.shape[0]
        if self.labels.shape[0] != n:
            raise ContractError("feature/label sample counts differ")
        if self.label_kind == "classification" and self.labels.ndim != 1:
            raise ContractError("classification labels must be a flat id vector")

    @property
    def n(self):
        return self.features.shape[0]

    def subset(self, idx) -> "Bundle":
        return Bundle(self.name, self.features[idx], self.labels[idx],
                      self.label_kind, self.classes)


def save_bundle(bundle: Bundle, path) -> str:
    os.makedirs(path, exist_ok=True)
    feats = np.ascontiguousarray(bundle.features, dtype="<f4")
    if bundle.label_kind == "classification":
        labels = np.ascontiguousarray(bundle.labels, dtype="<i4")
        label_dtype = "i32"
    else:
        labels = np.ascontiguousarray(bundle.labels, dtype="<f4")
        label_dtype = "f32"
    manifest = {
        "name": bundle.name,
        "byte_order": "little",
        "features": {"file": "features.bin", "dtype": "f32",
                     "shape": list(feats.shape)},
        "labels": {"file": "labels.bin", "dtype": label_dtype,
                   "shape": list(labels.shape)},
        "label_kind": bundle.label_kind,
        "classes": bundle.classes,
    }
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    with open(os.path.join(path, "features.bin"), "wb") as f:
        f.write(feats.tobytes(order="C"))
    with open(os.path.join(path, "labels.bin"), "wb") as f:
        f.write(labels.tobytes(order="C"))
    return path


def _read_blob(path, rec, what):
    np_dtype = DTYPES.get(rec["dtype"])
    if np_dtype is None:
        raise FormatError(f"{what}: unknown dtype {rec['dtype']!r}")
    expected = int(np.prod(rec["shape"])) * 4
    with open(os.path.join(path, rec["file"]), "rb") as f:
        raw = f.read()
    if len(raw) != expected:
        raise FormatError(
            f"{what}: blob length mismatch, expected {expected} bytes, got {len(raw)}"
        )
    return np.frombuffer(raw, dtype=np_dtype).reshape(rec["shape"]).copy()


def load_bundle(path) -> Bundle:
    if os.path.isfile(path):
        path = os.path.dirname(path)
    try:
        with open(os.path.join(path, "manifest.json")) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read bundle manifest at {path}: {exc}") from exc
    if manifest.get("byte_order") != "little":
        raise FormatError("unsupported byte order")
    feats = _read_blob(path, manifest["features"], "features").astype(np.float32)
    labels = _read_blob(path, manifest["labels"], "labels")
    return Bundle(
        name=manifest.get("name", os.path.basename(path)),
        features=feats,
        labels=labels,
        label_kind=manifest["label_kind"],
        classes=int(manifest["classes"]),
    )


def load_csv(path, label_column: str | None = None) -> Bundle:
    """Tabular ingestion: numeric columns standardized (population mean/std),
    categorical columns one-hot; the label column defaults to 'label' or the
    last column."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if len(rows) < 2:
        raise FormatError("CSV needs a header row and at least one data row")
    header = rows[0]
    data = rows[1:]
    if label_column is None:
        label_column = "label" if "label" in header else header[-1]
    if label_column not in header:
        raise FormatError(f"label column {label_column!r} not in header")
    li = header.index(label_column)

    cols = []
    for j, name in enumerate(header):
        if j == li:
            continue
        raw = [r[j] for r in data]
        try:
            vals = np.array([float(v) for v in raw])
            std = vals.std()  # population divisor
            cols.append((vals - vals.mean()) / (std if std > 0 else 1.0))
        except ValueError:
            cats = sorted(set(raw))
            for c in cats:
                cols.append(np.array([1.0 if v == c else 0.0 for v in raw]))
    feats = np.stack(cols, axis=1).astype(np.float32)[:, None, :]  # (n, 1, d)

    raw_labels = [r[li] for r in data]
    uniq = sorted(set(raw_labels))
    label_ids = np.array([uniq.index(v) for v in raw_labels], dtype=np.int32)
    return Bundle(os.path.basename(path), feats, label_ids, "classification", len(uniq))


# ---------------------------------------------------------------------------
# synthetic tasks

BLOB_CENTERS = np.array([[0.25, 0.25], [0.25, 0.75], [0.75, 0.25], [0.75, 0.75]])
SPECTRA_CENTERS = np.array([0.15, 0.38, 0.62, 0.85])


def synth_blobs2d(n: int = 256, size: int = 16, classes: int = 4, noise: float = 0.1,
                  seed: int = 0) -> Bundle:
    """Gaussian blobs rendered into 1 x size x size images, one blob location
    per class."""
    if classes < 1 or classes > len(BLOB_CENTERS):
        raise ContractError(f"blobs2d supports 1..{len(BLOB_CENTERS)} classes")
    if size < 4 or n < classes:
        raise ContractError("blobs2d: size >= 4 and n >= classes required")
    rng = make_rng(seed, "blobs2d")
    grid = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    labels = rng.integers(classes, size=n).astype(np.int32)
    feats = np.zeros((n, 1, size, size), dtype=np.float32)
    for i in range(n):
        cy, cx = BLOB_CENTERS[labels[i]] + rng.normal(0, 0.03, size=2)
        width = 0.12 * (1 + 0.2 * rng.normal())
        img = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        feats[i, 0] = img + noise * rng.normal(size=(size, size))
    return Bundle("blobs2d", feats, labels, "classification", classes)


def synth_spectra1d(n: int = 256, length: int = 128, classes: int = 4,
                    noise: float = 0.05, seed: int = 0) -> Bundle:
    """1D spectra whose bump positions render the same latent classes as the
    2D blobs, through a different (nonlinear) observation map."""
    if classes < 1 or classes > len(SPECTRA_CENTERS):
        raise ContractError(f"spectra1d supports 1..{len(SPECTRA_CENTERS)} classes")
    if length < 8 or n < classes:
        raise ContractError("spectra1d: length >= 8 and n >= classes required")
    rng = make_rng(seed, "spectra1d")
    grid = (np.arange(length) + 0.5) / length
    labels = rng.integers(classes, size=n).astype(np.int32)
    feats = np.zeros((n, 1, length), dtype=np.float32)
    for i in range(n):
        c = SPECTRA_CENTERS[labels[i]] + rng.normal(0, 0.015)
        w = 0.04 * (1 + 0.2 * rng.normal())
        amp = 1.0 + 0.2 * rng.normal()
        sig = amp * np.exp(-((grid - c) ** 2) / (2 * w ** 2))
        # second harmonic bump makes the rendering nonlinear in the latent
        sig += 0.4 * amp * np.exp(-((grid - (c / 2 + 0.45)) ** 2) / (2 * (w / 2) ** 2))
        feats[i, 0] = sig + noise * rng.normal(size=length)
    return Bundle("spectra1d", feats, labels, "classification", classes)


def synth_advect1d(n: int = 128, length: int = 256, beta: float = 0.1,
                   seed: int = 0) -> Bundle:
    """Periodic advection of a Gaussian pulse: input is the pulse at t0, the
    dense label is the same pulse shifted by beta (grid fractions).

    Pulse parameters are drawn before gridding, so regenerating at a finer
    resolution samples the same continuous profiles.
    """
    if length < 8 or n < 1:
        raise ContractError("advect1d: length >= 8 and n >= 1 required")
    rng = make_rng(seed, "advect1d")
    centers = rng.uniform(0, 1, size=n)
    widths = rng.uniform(0.03, 0.08, size=n)
    amps = rng.uniform(0.5, 1.5, size=n)
    grid = np.arange(length) / length

    def pulse(c, w, a, shift):
        d = np.abs((grid - c - shift + 0.5) % 1.0 - 0.5)  # periodic distance
        return a * np.exp(-(d ** 2) / (2 * w ** 2))

    feats = np.zeros((n, 1, length), dtype=np.float32)
    labels = np.zeros((n, 1, length), dtype=np.float32)
    for i in range(n):
        feats[i, 0] = pulse(centers[i], widths[i], amps[i], 0.0)
        labels[i, 0] = pulse(centers[i], widths[i], amps[i], beta)
    return Bundle("advect1d", feats, labels, "dense", 1)


SYNTH_KINDS = {
    "blobs2d": synth_blobs2d,
    "spectra1d": synth_spectra1d,
    "advect1d": synth_advect1d,
}


def synth_task(kind: str, seed: int = 0, **params) -> Bundle:
    if kind not in SYNTH_KINDS:
        raise ContractError(f"unknown synthetic task {kind!r}")
    return SYNTH_KINDS[kind](seed=seed, **params)
