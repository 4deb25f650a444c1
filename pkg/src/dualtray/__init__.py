"""Non-prehensile object manipulation on a dual-arm-held tilting tray."""

__version__ = "0.1.0"
