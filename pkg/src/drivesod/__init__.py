"""Task-aware salient object detection for driving scenes."""

__version__ = "0.1.0"
