"""General compact model: inverse-distance-weighted ensembles of lattice-calibrated
device cards, a small MNA circuit simulator and an RC-triggered ESD clamp bench."""

__version__ = "0.1.0"
