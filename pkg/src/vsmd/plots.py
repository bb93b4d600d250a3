"""Static SVG figures: sample scatters, forecast fans and per-stage curves."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def scatter_svg(path, generated, reference=None, title="", max_points=5000, seed=0):
    rng = np.random.default_rng(seed)

    def thin(p):
        p = np.atleast_2d(p)
        return p if p.shape[0] <= max_points else p[rng.choice(p.shape[0], max_points, replace=False)]

    panels = [("generated", generated)] + ([("reference", reference)] if reference is not None else [])
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 4), squeeze=False)
    lims = np.percentile(np.vstack([np.atleast_2d(p)[:, :2] for _, p in panels]), [0.5, 99.5], axis=0)
    for ax, (name, pts) in zip(axes[0], panels):
        pts = thin(pts)
        ax.scatter(pts[:, 0], pts[:, 1], s=1, alpha=0.5)
        ax.set_xlim(lims[0, 0], lims[1, 0])
        ax.set_ylim(lims[0, 1], lims[1, 1])
        ax.set_title(f"{title} {name}".strip())
    return _save(fig, path)


def curves_svg(path, xs, series, xlabel="stage", ylabel="", title=""):
    """``series`` maps a label to y-values aligned with ``xs``."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, ys in series.items():
        ax.plot(xs, ys, marker="o", ms=3, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend(fontsize=8)
    return _save(fig, path)


def forecast_svg(path, history, paths, observed=None, dim_sum=True):
    """Fan chart of the dimension-summed forecast (5-95% band and median)."""
    h = np.asarray(history).sum(axis=1) if dim_sum else np.asarray(history)[:, 0]
    p = np.asarray(paths).sum(axis=2) if dim_sum else np.asarray(paths)[:, :, 0]
    t0 = np.arange(-h.shape[0], 0)
    t1 = np.arange(p.shape[1])
    lo, med, hi = np.percentile(p, [5, 50, 95], axis=0)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(t0, h, color="k", lw=1)
    ax.fill_between(t1, lo, hi, alpha=0.3, label="5-95%")
    ax.plot(t1, med, label="median")
    if observed is not None:
        o = np.asarray(observed).sum(axis=1) if dim_sum else np.asarray(observed)[:, 0]
        ax.plot(t1, o, color="k", ls="--", lw=1, label="observed")
    ax.legend(fontsize=8)
    return _save(fig, path)
