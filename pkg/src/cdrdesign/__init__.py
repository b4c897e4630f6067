"""Antibody CDR sequence-structure co-design with antigen-forcing diagnostics."""

__version__ = "0.1.0"
