"""Learned substation switching for inter-zone exchange capacity.

Grids are heterogeneous hyper-graphs of generators, loads, switches and
lines attached to addresses; a decision opens or closes every switch and the
DC exchange-capacity LP scores it.
"""
from .h2mg import Grid, bus_partition, load_grid, make_grid, save_grid, toy_grid, validate_grid
from .powerlp import exchange_capacity

__version__ = "0.1.0"

__all__ = [
    "Grid", "bus_partition", "exchange_capacity", "load_grid", "make_grid", "save_grid", "toy_grid",
    "validate_grid",
]
