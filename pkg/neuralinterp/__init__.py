"""
neuralinterp - Neural Interpreter networks in numpy, trained on fuzzy
Boolean multi-task regression.
"""

__version__ = "0.1.0"
__author__ = "neuralinterp"
