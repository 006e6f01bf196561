"""Event-driven spiking neural network engine for driver-distraction classification."""

__version__ = "0.1.0"
