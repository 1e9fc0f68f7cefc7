"""Plot-ready tables derived from policies and simulations, and their figures."""

from __future__ import annotations

import numpy as np

from .ldr import INVESTMENTS, LdrPolicy

CLASS_LABELS = {"invest_gen": "generation", "invest_energy": "storage_energy", "invest_power": "storage_power"}


def sensitivity_rows(policy: LdrPolicy, tol: float = 1e-9) -> list:
    """Nonzero rule coefficients on random coordinates: (stage, decision, coordinate, value)."""
    st = policy.structure
    rows = []
    for t, X in enumerate(policy.rules):
        r, c = np.nonzero(np.abs(X[:, 1:]) > tol)
        for i, j in zip(r.tolist(), c.tolist()):
            rows.append((t, st.variable_name(i), j + 1, float(X[i, j + 1])))
    return rows


def capacity_bands(policy: LdrPolicy, scenarios: np.ndarray) -> list:
    """Cumulative installed capacity per class and stage.

    Mean and standard deviation are exact (the capacity is affine in ``xi``); the
    quantiles come from ``scenarios``.  ``lower``/``upper`` are mean -/+ one std.
    """
    st = policy.structure
    u = st.uncertainty
    rows = []
    for name, _ in INVESTMENTS:
        idx = st.var(name)
        if not idx.size:
            continue
        coef = np.zeros(u.size)
        for t in range(policy.stages):
            X = policy.rules[t][idx]
            coef[: X.shape[1]] += X.sum(axis=0)
            mean = float(coef.sum())
            std = float(np.linalg.norm(u.chol.T @ coef))
            draws = scenarios @ coef
            q05, q50, q95 = np.quantile(draws, [0.05, 0.5, 0.95]) if draws.size else (mean, mean, mean)
            rows.append((CLASS_LABELS[name], t, mean, std, mean - std, mean + std, float(q05), float(q50), float(q95)))
    return rows


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_bands(bands: dict, path) -> None:
    """One panel per capacity class; ``bands`` maps plan names to capacity_bands rows."""
    plt = _pyplot()
    classes = sorted({r[0] for rows in bands.values() for r in rows})
    fig, axes = plt.subplots(1, max(1, len(classes)), figsize=(4.2 * max(1, len(classes)), 3.4), squeeze=False)
    for ax, cls in zip(axes[0], classes):
        for plan, rows in sorted(bands.items()):
            sel = [r for r in rows if r[0] == cls]
            t = [r[1] + 1 for r in sel]
            (line,) = ax.plot(t, [r[2] for r in sel], marker="o", label=plan)
            ax.fill_between(t, [r[6] for r in sel], [r[8] for r in sel], color=line.get_color(), alpha=0.15)
            ax.set_xticks(t)
        ax.set_title(cls.replace("_", " "))
        ax.set_xlabel("stage")
        ax.set_ylabel("cumulative capacity")
        ax.grid(alpha=0.3)
    axes[0][0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_emissions(hist_rows: list, path) -> None:
    """Stage-by-stage emission histograms; rows are (plan, dist, stage, lo, hi, count)."""
    plt = _pyplot()
    stages = sorted({r[2] for r in hist_rows})
    fig, axes = plt.subplots(1, max(1, len(stages)), figsize=(3.2 * max(1, len(stages)), 3.0), squeeze=False)
    series = sorted({(r[0], r[1]) for r in hist_rows})
    for ax, t in zip(axes[0], stages):
        for plan, dist in series:
            sel = [r for r in hist_rows if r[0] == plan and r[1] == dist and r[2] == t]
            if not sel:
                continue
            mids = [(r[3] + r[4]) / 2.0 for r in sel]
            ax.step(mids, [r[5] for r in sel], where="mid", label=f"{plan} {dist}".strip())
        ax.set_title(f"stage {t + 1}")
        ax.set_xlabel("emissions")
        ax.ticklabel_format(axis="x", useOffset=False)
        lo, hi = ax.get_xlim()
        centre = (lo + hi) / 2.0
        if hi - lo < 1e-3 * max(1.0, abs(centre)):
            # constant emissions: a readable window around the value
            pad = 0.05 * max(1.0, abs(centre))
            ax.set_xlim(centre - pad, centre + pad)
        ax.grid(alpha=0.3)
    axes[0][0].set_ylabel("scenarios")
    axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sensitivity(policy: LdrPolicy, path, names=("invest_gen", "invest_energy", "invest_power")) -> None:
    """Heat map of investment rule coefficients on the random coordinates."""
    plt = _pyplot()
    st = policy.structure
    labels, rows = [], []
    for t, X in enumerate(policy.rules):
        for name in names:
            for i in st.var(name):
                row = np.zeros(st.uncertainty.size - 1)
                row[: X.shape[1] - 1] = X[i, 1:]
                rows.append(row)
                labels.append(f"{st.variable_name(int(i))} t{t + 1}")
    data = np.array(rows) if rows else np.zeros((1, max(1, st.uncertainty.size - 1)))
    fig, ax = plt.subplots(figsize=(6.0, max(2.5, 0.18 * len(labels))))
    lim = float(np.abs(data).max()) or 1.0
    im = ax.imshow(data, aspect="auto", cmap="coolwarm", vmin=-lim, vmax=lim)
    ax.set_yticks(range(len(labels)))
    ax.set_yticklabels(labels, fontsize=6)
    ax.set_xticks(range(data.shape[1]))
    ax.set_xticklabels([str(j + 1) for j in range(data.shape[1])], fontsize=7)
    ax.set_xlabel("uncertainty coordinate")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
