"""Memory-aided semantic transceiver simulator."""
__version__ = "0.1.0"
