"""swinscan: shifted-window transformer pipeline for brain-MRI diagnostics.

Detection (tumor yes/no), 3-class tumor-type classification, threshold
segmentation with size estimation, a nine-measure evaluation suite, and a
JSON-over-HTTP service that renders PDF diagnostic reports.
"""

__version__ = "0.1.0"
