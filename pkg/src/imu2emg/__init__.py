"""IMU-to-EMG envelope estimation with a GEGLU-Transformer."""
__version__ = "0.1.0"
