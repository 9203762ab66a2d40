"""Machine-learned default risk versus crowd pricing in peer-to-peer lending."""

__version__ = "0.1.0"
