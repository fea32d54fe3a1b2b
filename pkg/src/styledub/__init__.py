"""Style-preserving translation of facial-expression sequences between two actors."""

__version__ = "0.1.0"
