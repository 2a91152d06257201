"""Multi-task 3D network for glioma genotype, grade and lesion segmentation."""

__version__ = "0.1.0"
