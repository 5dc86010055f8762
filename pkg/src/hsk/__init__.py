"""Hyperspectral pixel classification with spectrum kernels on hierarchical segmentation features."""
from .datamodel import FeatureSequence, GramMatrix, HyperCube, LabelRaster
from .hierarchy import Hierarchy, extract_sequence, extract_sequences, import_hierarchy, segment
from .kernel import Constant, Decay, KernelConfig, QSpectrum, gram, normalized_kernel, spectrum_kernel_all_p
from .svm import SvmModel, predict, train

__version__ = "0.1.0"

__all__ = [
    "Constant",
    "Decay",
    "FeatureSequence",
    "GramMatrix",
    "Hierarchy",
    "HyperCube",
    "KernelConfig",
    "LabelRaster",
    "QSpectrum",
    "SvmModel",
    "extract_sequence",
    "extract_sequences",
    "gram",
    "import_hierarchy",
    "normalized_kernel",
    "predict",
    "segment",
    "spectrum_kernel_all_p",
    "train",
]
