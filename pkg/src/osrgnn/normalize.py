"""Piecewise-linear empirical-CDF feature normalization."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .h2mg import Grid, Injections, Lines

# Numeric channels; zone flags, S and in_service pass through untouched.
CHANNELS = ("gen.P", "load.P", "line.F_bar", "line.X")


def channel_values(grid: Grid, channel: str) -> np.ndarray:
    return {
        "gen.P": grid.generators.p,
        "load.P": grid.loads.p,
        "line.F_bar": grid.lines.f_bar,
        "line.X": grid.lines.x,
    }[channel]


def fit_knots(values, n_knots: int) -> tuple[np.ndarray, np.ndarray]:
    """Quantile knots of the empirical CDF.

    Knot ordinates are ``linspace(0, 1, n_knots)``; abscissae are the matching
    empirical quantiles.  Repeated abscissae (atoms) collapse onto one knot
    whose ordinate is the mean of the run, except that the runs holding the
    first and last knot keep 0 and 1.  A constant sample yields a single knot
    at ordinate 0.5.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if n_knots < 2:
        raise ValueError("need at least 2 knots")
    if values.size == 0:
        raise ValueError("cannot fit knots on an empty sample")
    probs = np.linspace(0.0, 1.0, n_knots)
    xs = np.quantile(values, probs)
    ux, start = np.unique(xs, return_index=True)
    if len(ux) == 1:
        return ux, np.array([0.5])
    stop = np.append(start[1:], len(xs))
    ys = np.array([probs[a:b].mean() for a, b in zip(start, stop)])
    ys[0], ys[-1] = 0.0, 1.0
    return ux, ys


def apply_knots(values, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    # np.interp clamps to the end ordinates outside the observed range
    return np.interp(np.asarray(values, dtype=np.float64), xs, ys)


class EcdfNormalizer(BaseEstimator, TransformerMixin):
    """Map every numeric grid feature through its fitted empirical CDF.

    ``fit`` takes a collection of grids and ``transform`` returns new grids
    whose powers, thermal limits and reactances lie in [0, 1].

    Parameters
    ----------
    n_knots : int
        Number of evenly spaced quantile knots per channel.
    """

    def __init__(self, n_knots: int = 100):
        self.n_knots = n_knots

    def fit(self, X, y=None):
        grids = list(X)
        if not grids:
            raise ValueError("cannot fit a normalizer on an empty collection")
        self.knots_ = {}
        for ch in CHANNELS:
            vals = np.concatenate([channel_values(g, ch) for g in grids])
            # a class absent from every grid still gets an identity-free map
            self.knots_[ch] = fit_knots(vals if vals.size else np.zeros(1), self.n_knots)
        return self

    def transform_grid(self, grid: Grid) -> Grid:
        check_is_fitted(self, "knots_")
        k = self.knots_
        g, ld, ln = grid.generators, grid.loads, grid.lines
        return replace(
            grid,
            generators=Injections(g.port, apply_knots(g.p, *k["gen.P"]), g.in_z1, g.in_z2),
            loads=Injections(ld.port, apply_knots(ld.p, *k["load.P"]), ld.in_z1, ld.in_z2),
            lines=Lines(
                ln.port_of, ln.port_ot, apply_knots(ln.f_bar, *k["line.F_bar"]),
                apply_knots(ln.x, *k["line.X"]), ln.s, ln.in_service,
            ),
        )

    def transform(self, X):
        return [self.transform_grid(g) for g in X]


def fit_normalizer(grids, knots: int = 100) -> EcdfNormalizer:
    return EcdfNormalizer(n_knots=knots).fit(grids)


def apply_normalizer(normalizer: EcdfNormalizer, grid: Grid) -> Grid:
    return normalizer.transform_grid(grid)
