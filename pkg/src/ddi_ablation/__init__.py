"""Siamese graph neural network ablation for drug-drug interaction prediction.

Modules: :mod:`chemgraph` (SMILES parsing, featurization, graph cache),
:mod:`numerics` (autodiff, losses, optimizer, RNG), :mod:`model` (encoder and
the three combiners), :mod:`data` (pair files, negatives, splits),
:mod:`metrics`, :mod:`pipeline` (training, evaluation, reports),
:mod:`synthetic` (planted-mechanism benchmark) and :mod:`cli`.
"""

__version__ = "0.1.0"
