"""Figure regeneration from benchmark CSV outputs.

Reads only the harness CSV schemas (never the estimation code), renders
the six standard figure layouts, and reports a checksum of exactly the
values it plotted so callers can verify nothing was altered or reordered.
"""

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["FigureSpec", "RenderResult", "MissingColumn", "render", "checksum_values"]

FIGURE_IDS = ("fig1", "fig2", "fig3", "fig4", "fig5", "fig6")


class MissingColumn(KeyError):
    """A required CSV column is absent; the message names it."""


@dataclass
class FigureSpec:
    figure: str
    inputs: list
    output: str
    style: dict = field(default_factory=dict)


@dataclass
class RenderResult:
    path: str
    value_checksum: str
    reference_lines: list
    warnings: list

    @property
    def status(self):
        return "partial" if self.warnings else "ok"


def read_csv(path):
    """Rows of a harness CSV, skipping provenance comment lines."""
    with open(path, newline="") as handle:
        rows = [r for r in csv.reader(handle) if r and not r[0].startswith("#")]
    header, data = rows[0], rows[1:]
    return header, data


def column(header, data, name, numeric=True):
    if name not in header:
        raise MissingColumn(f"column {name!r} not found, have {header}")
    idx = header.index(name)
    vals = [row[idx] for row in data]
    if not numeric:
        return vals
    return np.array([float(v) if v != "" else np.nan for v in vals])


def checksum_values(*arrays):
    """Order-sensitive checksum of the plotted float values."""
    digest = hashlib.sha256()
    for arr in arrays:
        digest.update(np.ascontiguousarray(np.asarray(arr, dtype=np.float64)).tobytes())
    return digest.hexdigest()


def _save(fig, spec):
    out = Path(spec.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=int(spec.style.get("dpi", 120)), metadata=_metadata(out))
    plt.close(fig)
    return str(out)


def _metadata(path):
    # strip creation dates so identical inputs give identical bytes
    suffix = path.suffix.lower()
    if suffix == ".png":
        return {"Software": "plotkit"}
    if suffix == ".svg":
        return {"Date": None}
    if suffix == ".pdf":
        return {"CreationDate": None}
    return None


def _fig1(spec):
    header, data = read_csv(spec.inputs[0])
    methods = sorted(set(column(header, data, "method", numeric=False)))
    eps = column(header, data, "epsilon")
    mean = column(header, data, "mean_err")
    std = column(header, data, "std_err")
    names = np.array(column(header, data, "method", numeric=False))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    plotted = []
    warnings = []
    for m in methods:
        sel = names == m
        order = np.argsort(eps[sel], kind="stable")
        x, y, e = eps[sel][order], mean[sel][order], std[sel][order]
        if np.all(np.isnan(y)):
            warnings.append(f"method {m} has no error values; curve omitted")
            continue
        ax.errorbar(x, y, yerr=e, marker="o", capsize=3, label=m)
        plotted.extend([x, y, e])
    ax.set_xlabel("contamination fraction")
    ax.set_ylabel("mean estimation error")
    ax.legend(fontsize=8)
    path = _save(fig, spec)
    return RenderResult(path, checksum_values(*plotted), [], warnings)


def _fig2(spec):
    header, data = read_csv(spec.inputs[0])
    s = column(header, data, "s")
    gamma = column(header, data, "gamma")
    err = column(header, data, "mean_error")
    w_chg = column(header, data, "weight_l1_change")
    c_chg = column(header, data, "center_l2_change")
    clean = column(header, data, "clean_cov_opnorm")
    oracle = column(header, data, "oracle_error")
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    refs = []
    axes[0].plot(s, gamma, marker="o")
    axes[0].axhline(clean[0], linestyle=":", color="k")
    refs.append(("clean_cov_opnorm", float(clean[0])))
    axes[0].set_xlabel("outer iteration")
    axes[0].set_ylabel("spectral certificate")
    warnings = []
    if np.all(np.isnan(err)):
        warnings.append("mean_error column empty; error panel omitted")
        plotted_err = []
    else:
        axes[1].plot(s, err, marker="o")
        axes[1].axhline(oracle[0], linestyle=":", color="k")
        refs.append(("oracle_error", float(oracle[0])))
        plotted_err = [err]
    axes[1].set_xlabel("outer iteration")
    axes[1].set_ylabel("weighted-mean error")
    axes[2].semilogy(s, np.maximum(w_chg, 1e-300), marker="o", label="weights")
    axes[2].semilogy(s, np.maximum(c_chg, 1e-300), marker="s", label="center")
    axes[2].set_xlabel("outer iteration")
    axes[2].set_ylabel("iterate change")
    axes[2].legend(fontsize=8)
    fig.tight_layout()
    path = _save(fig, spec)
    return RenderResult(
        path, checksum_values(s, gamma, *plotted_err, w_chg, c_chg), refs, warnings
    )


def _fig3(spec):
    header, data = read_csv(spec.inputs[0])
    assumed = column(header, data, "assumed_epsilon")
    err = column(header, data, "mean_err")
    std = column(header, data, "std_err")
    mass = column(header, data, "mean_outlier_mass")
    true_eps = column(header, data, "true_epsilon")
    order = np.argsort(assumed, kind="stable")
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    axes[0].errorbar(assumed[order], err[order], yerr=std[order], marker="o", capsize=3)
    axes[0].axvline(true_eps[0], linestyle=":", color="k")
    axes[0].set_xlabel("assumed contamination")
    axes[0].set_ylabel("mean estimation error")
    axes[1].semilogy(assumed[order], np.maximum(mass[order], 1e-300), marker="o")
    axes[1].axvline(true_eps[0], linestyle=":", color="k")
    axes[1].set_xlabel("assumed contamination")
    axes[1].set_ylabel("residual outlier mass")
    fig.tight_layout()
    path = _save(fig, spec)
    refs = [("true_epsilon", float(true_eps[0])), ("true_epsilon", float(true_eps[0]))]
    return RenderResult(path, checksum_values(assumed, err, std, mass), refs, [])


def _fig4(spec):
    header, data = read_csv(spec.inputs[0])
    i = column(header, data, "i")
    t = column(header, data, "t")
    obj = column(header, data, "objective")
    grad = column(header, data, "grad_norm")
    step = np.arange(1, i.size + 1)
    mass_cols = [h for h in header if h.startswith("outlier_mass_")]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    axes[0].semilogy(step, np.maximum(np.abs(obj), 1e-300))
    axes[0].set_xlabel("inner iteration")
    axes[0].set_ylabel("objective")
    axes[1].semilogy(step, np.maximum(grad, 1e-300))
    axes[1].set_xlabel("inner iteration")
    axes[1].set_ylabel("gradient norm")
    plotted = [obj, grad]
    warnings = []
    for name in mass_cols:
        vals = column(header, data, name)
        if np.all(np.isnan(vals)):
            warnings.append(f"column {name} empty; curve omitted")
            continue
        axes[2].plot(step, vals, label=name.replace("outlier_mass_", "order "))
        plotted.append(vals)
    axes[2].set_xlabel("inner iteration")
    axes[2].set_ylabel("retained outlier mass")
    if axes[2].lines:
        axes[2].legend(fontsize=8)
    fig.tight_layout()
    path = _save(fig, spec)
    return RenderResult(path, checksum_values(*plotted), [], warnings)


def _fig5(spec):
    header, data = read_csv(spec.inputs[0])
    configs = column(header, data, "configuration", numeric=False)
    methods = column(header, data, "method", numeric=False)
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.8))
    plotted = []
    case_names = list(dict.fromkeys(configs))
    method_names = list(dict.fromkeys(methods))
    for ax, metric in zip(axes, ("err_pi", "err_mu", "err_sigma")):
        vals = column(header, data, metric)
        groups, labels = [], []
        for case in case_names:
            for m in method_names:
                sel = [
                    v
                    for v, c, mm in zip(vals, configs, methods)
                    if c == case and mm == m
                ]
                groups.append(sel)
                labels.append(f"{case}\n{m}")
                plotted.append(np.asarray(sel, dtype=float))
        ax.boxplot(groups)
        ax.set_xticklabels(labels, fontsize=5, rotation=90)
        ax.set_yscale("log")
        ax.set_title(metric, fontsize=9)
    fig.tight_layout()
    path = _save(fig, spec)
    return RenderResult(path, checksum_values(*plotted), [], [])


def _fig6(spec):
    header, data = read_csv(spec.inputs[0])
    geos = column(header, data, "geometry", numeric=False)
    methods = column(header, data, "method", numeric=False)
    geo_names = list(dict.fromkeys(geos))
    method_names = list(dict.fromkeys(methods))
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    plotted = []
    width = 0.8 / len(method_names)
    for ax, metric in zip(axes, ("err_pi", "err_mu", "err_sigma")):
        vals = column(header, data, metric)
        for k, m in enumerate(method_names):
            means = []
            for geo in geo_names:
                sel = [
                    v
                    for v, g, mm in zip(vals, geos, methods)
                    if g == geo and mm == m
                ]
                means.append(float(np.mean(sel)))
            x = np.arange(len(geo_names)) + k * width
            ax.bar(x, means, width=width, label=m)
            plotted.append(np.asarray(means))
        ax.set_xticks(np.arange(len(geo_names)) + 0.4 - width / 2)
        ax.set_xticklabels(geo_names, fontsize=8)
        ax.set_yscale("log")
        ax.set_title(metric, fontsize=9)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    path = _save(fig, spec)
    return RenderResult(path, checksum_values(*plotted), [], [])


_RENDERERS = {
    "fig1": _fig1,
    "fig2": _fig2,
    "fig3": _fig3,
    "fig4": _fig4,
    "fig5": _fig5,
    "fig6": _fig6,
}


def render(spec: FigureSpec) -> RenderResult:
    """Render one figure id from its input CSVs.

    Returns the output path, the checksum of the plotted values, the
    reference lines drawn, and degradation warnings (missing optional
    columns omit their curve and mark the result partial).
    """
    if spec.figure not in _RENDERERS:
        raise ValueError(f"unknown figure id {spec.figure!r}, have {FIGURE_IDS}")
    if not spec.inputs:
        raise ValueError("no input CSVs given")
    for path in spec.inputs:
        if not Path(path).exists():
            raise FileNotFoundError(path)
    return _RENDERERS[spec.figure](spec)
