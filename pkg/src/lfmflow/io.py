"""CSV readers and writers with schema checks.

Schemas
-------
data CSV:    ``t, <obs dim names...>, mask_<obs dim names...>``
path CSV:    ``t, <state row names...>``
samples CSV: ``sample_id, t, dim, value`` (long format, ``dim`` is the state index)
ELBO CSV:    ``epoch, elbo, grad_norm, dropped_samples``
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from lfmflow.errors import DataError
from lfmflow.flows import Observations

SAMPLES_HEADER = ["sample_id", "t", "dim", "value"]
ELBO_HEADER = ["epoch", "elbo", "grad_norm", "dropped_samples"]


def _fmt(x: float) -> str:
    return repr(float(x))


def _read_rows(path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise DataError(f"{path}: empty file") from None
            rows = [(reader.line_num, row) for row in reader if row]
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    return header, rows


def _float(path, line: int, text: str, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{path}:{line}: column {column!r} is not a number: {text!r}") from None


# ----------------------------------------------------------------------------
# observation data


def write_data_csv(path, data: Observations, names: list[str]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *names, *(f"mask_{n}" for n in names)])
        for t, y, m in zip(data.times, data.y, data.mask):
            w.writerow([_fmt(t), *(_fmt(v) for v in y), *(str(int(v)) for v in m)])


def read_data_csv(path, names: list[str]) -> Observations:
    """Read observations for the observable dims ``names`` (in that order)."""
    header, rows = _read_rows(path)
    expected = ["t", *names, *(f"mask_{n}" for n in names)]
    if header != expected:
        raise DataError(f"{path}:1: header {header} does not match expected {expected}")
    p = len(names)
    times, ys, masks = [], [], []
    for line, row in rows:
        if len(row) != len(expected):
            raise DataError(f"{path}:{line}: expected {len(expected)} fields, got {len(row)}")
        t = _float(path, line, row[0], "t")
        if times and not t > times[-1]:
            raise DataError(f"{path}:{line}: t must be strictly increasing")
        mask = []
        for j in range(p):
            mv = _float(path, line, row[1 + p + j], expected[1 + p + j])
            if mv not in (0.0, 1.0):
                raise DataError(f"{path}:{line}: mask values must be 0 or 1")
            mask.append(mv)
        y = []
        for j in range(p):
            v = row[1 + j].strip()
            val = _float(path, line, v, names[j]) if v else math.nan
            if mask[j] and not math.isfinite(val):
                raise DataError(f"{path}:{line}: observed value of {names[j]!r} is not finite")
            y.append(val if mask[j] else 0.0)
        times.append(t)
        ys.append(y)
        masks.append(mask)
    return Observations(np.array(times), np.array(ys).reshape(len(times), p),
                        np.array(masks).reshape(len(times), p))


# ----------------------------------------------------------------------------
# state paths and samples


def write_path_csv(path, mesh, states: np.ndarray, names: list[str]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *names])
        for t, row in zip(mesh, states):
            w.writerow([_fmt(t), *(_fmt(v) for v in row)])


def read_path_csv(path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    header, rows = _read_rows(path)
    if not header or header[0] != "t":
        raise DataError(f"{path}:1: first column must be 't'")
    vals = []
    for line, row in rows:
        if len(row) != len(header):
            raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
        vals.append([_float(path, line, v, c) for v, c in zip(row, header)])
    arr = np.array(vals).reshape(len(vals), len(header))
    return arr[:, 0], arr[:, 1:], header[1:]


def write_samples_csv(path, mesh, samples: np.ndarray, dims: list[int] | None = None) -> None:
    """``samples`` is ``[n, T, d]``; ``dims`` selects which state indices to write."""
    samples = np.asarray(samples)
    dims = list(range(samples.shape[2])) if dims is None else list(dims)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SAMPLES_HEADER)
        for s in range(samples.shape[0]):
            for k, t in enumerate(mesh):
                for dim in dims:
                    w.writerow([s, _fmt(t), dim, _fmt(samples[s, k, dim])])


def read_samples_csv(path) -> tuple[np.ndarray, list[int], np.ndarray]:
    """Return ``(mesh, dims, values [n, T, len(dims)])``; the grid must be complete."""
    header, rows = _read_rows(path)
    if header != SAMPLES_HEADER:
        raise DataError(f"{path}:1: header {header} does not match expected {SAMPLES_HEADER}")
    recs = {}
    for line, row in rows:
        if len(row) != 4:
            raise DataError(f"{path}:{line}: expected 4 fields, got {len(row)}")
        try:
            sid, dim = int(row[0]), int(row[2])
        except ValueError:
            raise DataError(f"{path}:{line}: sample_id and dim must be integers") from None
        t = _float(path, line, row[1], "t")
        v = _float(path, line, row[3], "value")
        key = (sid, t, dim)
        if key in recs:
            raise DataError(f"{path}:{line}: duplicate entry for sample {sid}, t={t}, dim {dim}")
        recs[key] = v
    if not recs:
        raise DataError(f"{path}: no samples")
    sids = sorted({k[0] for k in recs})
    times = sorted({k[1] for k in recs})
    dims = sorted({k[2] for k in recs})
    if len(recs) != len(sids) * len(times) * len(dims):
        raise DataError(f"{path}: incomplete grid ({len(recs)} rows for {len(sids)} samples x "
                        f"{len(times)} times x {len(dims)} dims)")
    si = {s: i for i, s in enumerate(sids)}
    ti = {t: i for i, t in enumerate(times)}
    di = {d: i for i, d in enumerate(dims)}
    out = np.empty((len(sids), len(times), len(dims)))
    for (s, t, d), v in recs.items():
        out[si[s], ti[t], di[d]] = v
    return np.array(times), dims, out


def write_elbo_csv(path, records) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ELBO_HEADER)
        for r in records:
            w.writerow([r.epoch, _fmt(r.elbo), _fmt(r.grad_norm), r.dropped])
