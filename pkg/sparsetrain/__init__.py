"""Toolkit de treinamento esparso dinâmico (DynSparse) em escala de mesa."""

__version__ = "0.1.0"
