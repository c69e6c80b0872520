"""Fruitlet sizing, cross-day association, and growth-rate reporting.

The package provides:

* a small float64 autodiff core (:mod:`fruitlets.tensor`, :mod:`fruitlets.nn`,
  :mod:`fruitlets.optim`),
* per-detection metric sizing from segmentation and stereo disparity
  (:mod:`fruitlets.sizing`),
* an attentional graph network with optimal-transport assignment for
  matching detections across capture days (:mod:`fruitlets.assoc`),
* deterministic synthetic orchard data (:mod:`fruitlets.synth`),
* training, evaluation, and growth-rate reporting
  (:mod:`fruitlets.train`, :mod:`fruitlets.growth`),
* file formats and a command-line interface (:mod:`fruitlets.dataio`,
  :mod:`fruitlets.cli`).
"""

__version__ = "0.1.0"
