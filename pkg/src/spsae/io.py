"""File formats, covariate coding, and the goodness-of-fit diagnostic.

Samples and cross-tabulations are comma-delimited text with a header row.
Categorical covariate columns are expanded automatically to reference-coded
indicators (lexicographically smallest level as reference), and the coding
learned from a sample is applied verbatim to its cross-tabulation. Output
files carry '#'-prefixed header lines echoing version, seed, and the fully
resolved configuration; numeric values are written with 17 significant
digits so that files round-trip bit-exactly.
"""

from __future__ import annotations

import csv
import io as _io
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from ._version import __version__
from .exceptions import DataError
from .model import AreaSample, FitResult, MixtureParams, PopulationCrossTab, SurveyData

__all__ = [
    "CovariateCoding",
    "load_sample",
    "load_crosstab",
    "write_fit",
    "read_fit",
    "write_table",
    "read_table",
    "direct_estimates",
    "wald_gof",
]


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _is_numeric_column(values) -> bool:
    try:
        for v in values:
            float(v)
    except ValueError:
        return False
    return True


@dataclass(frozen=True)
class CovariateCoding:
    """How raw covariate columns map to model design columns."""

    columns: tuple[str, ...]
    kinds: tuple[str, ...]
    levels: dict

    @property
    def feature_names(self) -> tuple[str, ...]:
        names = []
        for col, kind in zip(self.columns, self.kinds):
            if kind == "numeric":
                names.append(col)
            else:
                names.extend(f"{col}={lev}" for lev in self.levels[col][1:])
        return tuple(names)

    @property
    def p(self) -> int:
        return len(self.feature_names)

    def encode_row(self, raw: dict) -> np.ndarray:
        out = np.zeros(self.p)
        pos = 0
        for col, kind in zip(self.columns, self.kinds):
            value = raw[col]
            if kind == "numeric":
                out[pos] = float(value)
                pos += 1
            else:
                levels = self.levels[col]
                if value not in levels:
                    raise DataError(
                        f"column {col!r}: level {value!r} does not match the sample coding"
                    )
                k = levels.index(value)
                if k > 0:
                    out[pos + k - 1] = 1.0
                pos += len(levels) - 1
        return out

    @classmethod
    def infer(cls, columns, rows) -> "CovariateCoding":
        kinds = []
        levels = {}
        for col in columns:
            values = [r[col] for r in rows]
            if _is_numeric_column(values):
                kinds.append("numeric")
            else:
                kinds.append("categorical")
                levels[col] = tuple(sorted(set(values)))
        return cls(tuple(columns), tuple(kinds), levels)


def _read_csv_rows(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as handle:
        lines = [ln for ln in handle if not ln.startswith("#")]
    if not lines:
        raise DataError(f"{path}: empty file")
    reader = csv.reader(_io.StringIO("".join(lines)))
    header = next(reader)
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
        rows.append(dict(zip(header, row)))
    if not rows:
        raise DataError(f"{path}: no data rows")
    return header, rows


def load_sample(path, coding: CovariateCoding | None = None) -> tuple[SurveyData, CovariateCoding]:
    """Read a unit-level sample: columns area_id, y, then covariates.

    With ``coding`` given (e.g. taken from a stored fit) the file is encoded
    with it instead of inferring a fresh coding, so designs stay aligned.
    """
    header, rows = _read_csv_rows(path)
    if header[:2] != ["area_id", "y"]:
        raise DataError(f"{path}: header must start with area_id,y")
    covariate_cols = header[2:]
    for row in rows:
        if row["y"] not in ("0", "1"):
            raise DataError(f"{path}: non-binary response {row['y']!r}")
    if coding is not None:
        if set(covariate_cols) != set(coding.columns):
            raise DataError(f"{path}: covariate columns do not match the stored coding")
    else:
        coding = CovariateCoding.infer(covariate_cols, rows)
    area_ids = [row["area_id"] for row in rows]
    y = np.array([float(row["y"]) for row in rows])
    X = np.array([coding.encode_row(row) for row in rows]).reshape(len(rows), coding.p)
    return SurveyData.from_arrays(np.array(area_ids, dtype=object), y, X), coding


def load_crosstab(path, coding: CovariateCoding) -> dict:
    """Read per-area population cross-tabulations, coded like the sample.

    Header: area_id, the sample's covariate columns (any order), count.
    Returns an ordered mapping area_id -> PopulationCrossTab.
    """
    header, rows = _read_csv_rows(path)
    if header[0] != "area_id" or header[-1] != "count":
        raise DataError(f"{path}: header must be area_id,<covariates>,count")
    if set(header[1:-1]) != set(coding.columns):
        raise DataError(
            f"{path}: covariate columns {header[1:-1]} do not match the sample coding "
            f"{list(coding.columns)}"
        )
    by_area: dict = {}
    for row in rows:
        count = float(row["count"])
        if count < 0:
            raise DataError(f"{path}: negative count for area {row['area_id']!r}")
        x = coding.encode_row(row)
        by_area.setdefault(row["area_id"], []).append((x, count))
    tabs = {}
    for area_id, pairs in by_area.items():
        X = np.array([x for x, _ in pairs])
        counts = np.array([c for _, c in pairs])
        tabs[area_id] = PopulationCrossTab(area_id, X, counts)
    return tabs


def write_sample(path, data: SurveyData, coding: CovariateCoding | None = None, header=None):
    """Write a sample back to disk (numeric design columns as-is)."""
    names = coding.feature_names if coding is not None else tuple(
        f"x{i + 1}" for i in range(data.p)
    )
    with open(path, "w", newline="") as handle:
        _write_header(handle, header)
        writer = csv.writer(handle)
        writer.writerow(["area_id", "y"] + list(names))
        for area in data.areas:
            for yi, xi in zip(area.y, area.X):
                writer.writerow([area.area_id, int(yi)] + [_fmt(v) for v in xi])


def _write_header(handle, header):
    handle.write(f"# spsae {__version__}\n")
    for key, value in (header or {}).items():
        handle.write(f"# {key}: {value}\n")


def write_table(path, columns, rows, header=None):
    """Write a delimited table with a commented header block."""
    with open(path, "w", newline="") as handle:
        _write_header(handle, header)
        writer = csv.writer(handle)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(row)


def read_table(path) -> tuple[list[str], list[dict]]:
    """Read a table written by ``write_table`` (header lines are skipped)."""
    return _read_csv_rows(path)


def write_fit(path, fit: FitResult, coding: CovariateCoding | None = None, header=None):
    """Serialize a fit as diff-able key = value text at full precision.

    The covariate coding, when given, is stored so that prediction from the
    file alone can re-encode cross-tabulations consistently.
    """
    params = fit.params
    lines = []
    if coding is not None:
        lines.append(("covariates", ",".join(coding.feature_names)))
        lines.append(("coding.columns", ",".join(coding.columns)))
        lines.append(("coding.kinds", ",".join(coding.kinds)))
        for col in coding.columns:
            if col in coding.levels:
                levels = coding.levels[col]
                if any("|" in lev or "=" in lev for lev in levels):
                    raise DataError("categorical levels may not contain '|' or '='")
                lines.append((f"coding.levels.{col}", "|".join(levels)))
    lines += [
        ("p", str(params.p)),
        ("G", str(params.G)),
        ("loglik", _fmt(fit.loglik)),
        ("aic", _fmt(fit.aic)),
        ("bic", _fmt(fit.bic)),
        ("converged", str(fit.converged).lower()),
        ("n_iter", str(fit.n_iter)),
        ("final_rel_change", _fmt(fit.final_rel_change)),
        ("start_index", str(fit.start_index)),
        ("covariance_method", fit.covariance_method),
        ("beta", ",".join(_fmt(v) for v in params.beta)),
        ("xi", ",".join(_fmt(v) for v in params.xi)),
        ("pi", ",".join(_fmt(v) for v in params.pi)),
    ]
    if fit.covariance is not None:
        lines.append(("covariance", ",".join(_fmt(v) for v in fit.covariance.ravel())))
    ids = [str(a) for a in fit.area_ids]
    if any("," in s or "=" in s for s in ids):
        raise DataError("area ids may not contain ',' or '=' in fit files")
    lines.append(("area_ids", ",".join(ids)))
    for aid, row in zip(ids, fit.tau):
        lines.append((f"tau.{aid}", ",".join(_fmt(v) for v in row)))
    with open(path, "w") as handle:
        _write_header(handle, header)
        for key, value in lines:
            handle.write(f"{key} = {value}\n")


def read_fit(path) -> tuple[FitResult, CovariateCoding | None]:
    """Read a fit file; returns (fit, stored covariate coding or None)."""
    values = {}
    with open(path) as handle:
        for line in handle:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}: malformed line {line!r}")
            key, _, raw = line.partition("=")
            values[key.strip()] = raw.strip()
    try:
        params = MixtureParams(
            _floats(values["beta"]) if values["beta"] else np.zeros(0),
            _floats(values["xi"]),
            _floats(values["pi"]),
        )
        area_ids = tuple(values["area_ids"].split(","))
        tau = np.array([_floats(values[f"tau.{aid}"]) for aid in area_ids])
        covariance = None
        if "covariance" in values:
            K = params.n_free
            covariance = _floats(values["covariance"]).reshape(K, K)
        fit = FitResult(
            params=params,
            area_ids=area_ids,
            tau=tau,
            loglik=float(values["loglik"]),
            aic=float(values["aic"]),
            bic=float(values["bic"]),
            converged=values["converged"] == "true",
            n_iter=int(values["n_iter"]),
            final_rel_change=float(values["final_rel_change"]),
            start_index=int(values["start_index"]),
            covariance=covariance,
            covariance_method=values.get("covariance_method", "sandwich"),
        )
    except KeyError as exc:
        raise DataError(f"{path}: missing field {exc}") from None
    coding = None
    if "coding.columns" in values:
        columns = tuple(v for v in values["coding.columns"].split(",") if v)
        kinds = tuple(v for v in values["coding.kinds"].split(",") if v)
        levels = {
            col: tuple(values[f"coding.levels.{col}"].split("|"))
            for col, kind in zip(columns, kinds)
            if kind == "categorical"
        }
        coding = CovariateCoding(columns, kinds, levels)
    return fit, coding


def _floats(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")]) if text else np.zeros(0)


def direct_estimates(data: SurveyData):
    """Per-area sample proportions with variance p(1-p)/n_i.

    Areas without sampled units are omitted.
    """
    ids, est, var = [], [], []
    for area in data.areas:
        if area.n_i == 0:
            continue
        p_hat = float(area.y.mean())
        ids.append(area.area_id)
        est.append(p_hat)
        var.append(p_hat * (1.0 - p_hat) / area.n_i)
    return ids, np.array(est), np.array(var)


def wald_gof(direct, predictions, variances, mses):
    """Wald statistic comparing direct and model-based estimates.

    W sums (direct - model)^2 / (direct variance + model MSE) over areas;
    its null distribution is chi-squared with one degree of freedom per
    compared area. Areas with a zero denominator are excluded with a
    warning.
    """
    direct = np.asarray(direct, dtype=float)
    predictions = np.asarray(predictions, dtype=float)
    variances = np.asarray(variances, dtype=float)
    mses = np.asarray(mses, dtype=float)
    if not (direct.shape == predictions.shape == variances.shape == mses.shape):
        raise DataError("all inputs to wald_gof must be aligned vectors")
    denom = variances + mses
    keep = denom > 0
    if not keep.all():
        warnings.warn(
            f"excluded {int((~keep).sum())} area(s) with zero denominator from the Wald statistic",
            RuntimeWarning,
            stacklevel=2,
        )
    if not keep.any():
        raise DataError("no areas with a positive denominator")
    W = float(((direct[keep] - predictions[keep]) ** 2 / denom[keep]).sum())
    df = int(keep.sum())
    return W, df, float(chi2.sf(W, df))
