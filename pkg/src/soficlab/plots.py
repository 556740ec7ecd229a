"""Figure rendering for scenario outputs.

Figures are derived views of the CSV/JSON series the runner emits; they
are written as PNGs next to the delimited output and are not part of
the determinism contract.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _style(ax, xlabel: str, ylabel: str, title: str) -> None:
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)


def _save(fig, outdir: str, name: str) -> str:
    path = os.path.join(outdir, name)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_mixture(data: dict, outdir: str, prefix: str) -> list[str]:
    rows = data["rows"]
    ns = sorted({r["n"] for r in rows})
    first = {n: next(r for r in rows if r["n"] == n) for n in ns}
    files = []

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ns, [first[n]["log_cov_main"] / n for n in ns], "o-",
            label=f"log cov / n at eps={data['cov_eps']}")
    ax.plot(ns, [first[n]["H_per_site"] for n in ns], "s-", label="H / n")
    ax.axhline(data["H_p"], ls="--", c="gray", label="H(p)")
    ax.axhline(data["H_q"], ls=":", c="gray", label="H(q)")
    _style(ax, "n", "nats per site", "covering and entropy rates")
    ax.legend()
    files.append(_save(fig, outdir, f"{prefix}_rates.png"))

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ns, [first[n]["lw_mixture_fraction"] for n in ns], "o-",
            label="lw* fraction (mixture target)")
    ax.plot(ns, [first[n]["lw_p_target_fraction"] for n in ns], "s-",
            label="lw* fraction (p target)")
    ax.plot(ns, [first[n]["le_mixture"] for n in ns], "^-",
            label="good-model mass (mixture target)")
    ax.set_ylim(-0.05, 1.05)
    _style(ax, "n", "fraction / mass", "local weak* holds, empirical fails")
    ax.legend()
    files.append(_save(fig, outdir, f"{prefix}_convergence.png"))

    fig, ax = plt.subplots(figsize=(6, 4))
    for n in ns:
        pairs = sorted(((float(e), m) for e, m in
                        first[n]["aep_hp_band_mass"].items()))
        ax.plot([e for e, _ in pairs], [m for _, m in pairs], "o-",
                label=f"n={n}")
    ax.axhline(0.5, ls="--", c="gray", label="1/2")
    ax.set_ylim(-0.05, 1.05)
    _style(ax, "eps", "band mass", "typical-set mass at rate H(p)")
    ax.legend()
    files.append(_save(fig, outdir, f"{prefix}_aep.png"))
    return files


def render_conditioning(data: dict, outdir: str, prefix: str) -> list[str]:
    rows = data["rows"]
    ns = [r["n"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ns, [r["le_unconditioned"] for r in rows], "o-", label="le mass")
    ax.plot(ns, [r["le_conditioned"] for r in rows], "s-",
            label="le mass conditioned")
    ax.plot(ns, [1 - r["bound_with_ci"] for r in rows], "--", c="gray",
            label="averaging bound floor")
    ax.set_xscale("log", base=2)
    ax.set_ylim(-0.05, 1.05)
    _style(ax, "n", "good-model mass", "conditioning keeps empirical mass")
    ax.legend()
    return [_save(fig, outdir, f"{prefix}_stability.png")]


def render_coinduction(data: dict, outdir: str, prefix: str) -> list[str]:
    rows = data["additivity_rows"]
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [f"{r['V']}x{r['W']}" for r in rows]
    devs = np.array([max(r["relative_deviation"], 1e-18) for r in rows])
    ax.bar(range(len(rows)), devs)
    ax.set_yscale("log")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=45, fontsize=7)
    _style(ax, "V x W", "relative deviation",
           "entropy additivity across fibre powers")
    return [_save(fig, outdir, f"{prefix}_additivity.png")]


RENDERERS = {
    "mixture_example": render_mixture,
    "conditioning_stability": render_conditioning,
    "coinduction": render_coinduction,
}


def render_scenario(scenario: str, data: dict, outdir: str, prefix: str) -> list[str]:
    fn = RENDERERS.get(scenario)
    if fn is None:
        return []
    return fn(data, outdir, prefix)
