"""facexplain: saliency maps and evaluation for black-box facial-expression classifiers."""

__version__ = "0.1.0"
