"""Few-shot binary segmentation: class-per-directory datasets, episodic training and evaluation."""
__version__ = "0.1.0"
