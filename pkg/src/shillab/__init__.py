"""Single-fake-user shilling attacks on recommenders, with victims and a detection harness."""

__version__ = "0.1.0"
