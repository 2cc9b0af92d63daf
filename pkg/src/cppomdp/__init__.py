"""Joint communication and control in a sensor-assisted gridworld."""

__version__ = "0.1.0"
