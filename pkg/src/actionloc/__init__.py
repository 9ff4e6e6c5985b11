"""Single-stage spatiotemporal action localization on numpy."""
__version__ = "0.1.0"
