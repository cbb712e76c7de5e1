"""Learning component dynamics of generators and grid-forming inverters with a stable-integral RNN."""

__version__ = "0.1.0"
