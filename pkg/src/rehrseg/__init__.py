"""Self-supervised through-plane super-resolution and SR-assisted 3D segmentation."""
from .volume_io import LabelVolume, Volume, load_labels, load_volume, resample_isotropic, save_labels, save_volume

__version__ = "0.1.0"
