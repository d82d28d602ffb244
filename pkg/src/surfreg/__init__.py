"""surfreg: RGB-D stream fusion, voxel-mask surface tracking, and robust
rigid model-to-scene registration, with reconstruction and landmark
accuracy evaluation."""

__version__ = "0.1.0"
